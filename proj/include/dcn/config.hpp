#pragma once

// Flat `key = value` run configuration. One file drives model shape,
// training and evaluation; the same text doubles as the snapshot embedded in
// checkpoints, so dumping is canonical: fixed key order, shortest fixed-point
// numbers, lists as comma-joined integers.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dcn/episodic.hpp"
#include "dcn/model.hpp"
#include "dcn/trainer.hpp"

namespace dcn {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  int base_classes = 0;  // 0 derives the head width from the dataset
};

namespace detail {

inline void config_fail(int line, const std::string& what) {
  throw std::runtime_error("config line " + std::to_string(line) + ": " + what);
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_int(const std::string& text, int line) {
  T v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) config_fail(line, "not an integer: '" + text + "'");
  return v;
}

inline float parse_float(const std::string& text, int line) {
  float v = 0.0f;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) config_fail(line, "not a number: '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& text, int line) {
  if (text == "true") return true;
  if (text == "false") return false;
  config_fail(line, "not a boolean (use true or false): '" + text + "'");
  return false;
}

inline std::vector<int> parse_int_list(const std::string& text, int line) {
  std::vector<int> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) out.push_back(parse_int<int>(trim(item), line));
  if (out.empty()) config_fail(line, "empty list");
  return out;
}

inline std::string format_int(std::int64_t v) {
  char buf[24];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string format_u64(std::uint64_t v) {
  char buf[24];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string format_float(float v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed);
  return std::string(buf, ptr);
}

inline std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_int(v[i]);
  }
  return out;
}

// One row per key: how to read it into the config and how to print it back.
struct ConfigKey {
  const char* name;
  std::function<void(RunConfig&, const std::string&, int)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"input_h",
       [](RunConfig& c, const std::string& v, int l) { c.model.encoder.input_h = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.model.encoder.input_h); }},
      {"input_w",
       [](RunConfig& c, const std::string& v, int l) { c.model.encoder.input_w = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.model.encoder.input_w); }},
      {"input_channels",
       [](RunConfig& c, const std::string& v, int l) { c.model.encoder.input_channels = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.model.encoder.input_channels); }},
      {"blocks",
       [](RunConfig& c, const std::string& v, int l) { c.model.encoder.blocks = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.model.encoder.blocks); }},
      {"channels",
       [](RunConfig& c, const std::string& v, int l) { c.model.encoder.channels = parse_int_list(v, l); },
       [](const RunConfig& c) { return format_int_list(c.model.encoder.channels); }},
      {"residual",
       [](RunConfig& c, const std::string& v, int l) { c.model.encoder.residual = parse_bool(v, l); },
       [](const RunConfig& c) { return std::string(c.model.encoder.residual ? "true" : "false"); }},
      {"base_classes",
       [](RunConfig& c, const std::string& v, int l) { c.base_classes = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.base_classes); }},
      {"proj_hidden",
       [](RunConfig& c, const std::string& v, int l) { c.model.proj_hidden = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.model.proj_hidden); }},
      {"proj_out",
       [](RunConfig& c, const std::string& v, int l) { c.model.proj_out = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.model.proj_out); }},
      {"m_sp",
       [](RunConfig& c, const std::string& v, int l) { c.model.m_sp = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.model.m_sp); }},
      {"reduction",
       [](RunConfig& c, const std::string& v, int l) { c.model.reduction = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.model.reduction); }},
      {"cbar",
       [](RunConfig& c, const std::string& v, int l) { c.model.cbar = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.model.cbar); }},
      {"epochs",
       [](RunConfig& c, const std::string& v, int l) { c.train.epochs = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.train.epochs); }},
      {"batch_n",
       [](RunConfig& c, const std::string& v, int l) { c.train.batch_n = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.train.batch_n); }},
      {"lr",
       [](RunConfig& c, const std::string& v, int l) { c.train.lr = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.lr); }},
      {"momentum",
       [](RunConfig& c, const std::string& v, int l) { c.train.momentum = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.momentum); }},
      {"weight_decay",
       [](RunConfig& c, const std::string& v, int l) { c.train.weight_decay = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.weight_decay); }},
      {"alpha",
       [](RunConfig& c, const std::string& v, int l) { c.train.alpha = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.alpha); }},
      {"beta",
       [](RunConfig& c, const std::string& v, int l) { c.train.beta = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.beta); }},
      {"gamma",
       [](RunConfig& c, const std::string& v, int l) { c.train.gamma = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.gamma); }},
      {"tau",
       [](RunConfig& c, const std::string& v, int l) { c.train.tau = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.tau); }},
      {"tau_bar",
       [](RunConfig& c, const std::string& v, int l) { c.train.tau_bar = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.tau_bar); }},
      {"seed",
       [](RunConfig& c, const std::string& v, int l) { c.train.seed = parse_int<std::uint64_t>(v, l); },
       [](const RunConfig& c) { return format_u64(c.train.seed); }},
      {"crop_fraction",
       [](RunConfig& c, const std::string& v, int l) { c.train.augment.crop_fraction = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.augment.crop_fraction); }},
      {"flip_prob",
       [](RunConfig& c, const std::string& v, int l) { c.train.augment.flip_prob = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.augment.flip_prob); }},
      {"jitter_range",
       [](RunConfig& c, const std::string& v, int l) { c.train.augment.jitter_range = parse_float(v, l); },
       [](const RunConfig& c) { return format_float(c.train.augment.jitter_range); }},
      {"way",
       [](RunConfig& c, const std::string& v, int l) { c.eval.episode.way = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.eval.episode.way); }},
      {"shot",
       [](RunConfig& c, const std::string& v, int l) { c.eval.episode.shot = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.eval.episode.shot); }},
      {"query",
       [](RunConfig& c, const std::string& v, int l) { c.eval.episode.query = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.eval.episode.query); }},
      {"tasks",
       [](RunConfig& c, const std::string& v, int l) { c.eval.tasks = parse_int<int>(v, l); },
       [](const RunConfig& c) { return format_int(c.eval.tasks); }},
      {"deterministic",
       [](RunConfig& c, const std::string& v, int l) { c.eval.deterministic = parse_bool(v, l); },
       [](const RunConfig& c) { return std::string(c.eval.deterministic ? "true" : "false"); }},
  };
  return keys;
}

}  // namespace detail

// Parse `key = value` text. Blank lines are skipped, `#` starts a comment,
// keys may appear at most once and must be known.
inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::vector<bool> seen(detail::config_keys().size(), false);
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      detail::config_fail(line_no, "expected `key = value`, got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) detail::config_fail(line_no, "missing key");

    const auto& keys = detail::config_keys();
    bool handled = false;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      if (key != keys[i].name) continue;
      if (seen[i]) detail::config_fail(line_no, "duplicate key '" + key + "'");
      seen[i] = true;
      keys[i].set(cfg, value, line_no);
      handled = true;
      break;
    }
    if (!handled) detail::config_fail(line_no, "unknown key '" + key + "'");
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) detail::io_fail(path.string(), "cannot open config");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

// Canonical text: every key, fixed order, re-parses to the same config.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& key : detail::config_keys()) {
    out += key.name;
    out += " = ";
    out += key.get(cfg);
    out += '\n';
  }
  return out;
}

}  // namespace dcn
