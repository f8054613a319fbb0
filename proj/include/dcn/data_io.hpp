#pragma once

// Dataset plumbing: a small binary tensor format, dataset directories with a
// split manifest, a synthetic grating generator for self-contained runs, and
// the two-view augmentation used by the trainer. Everything here is plain
// data movement; nothing records on a tape.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dcn/rng.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

namespace detail {

inline void io_fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                 static_cast<char>((v >> 16) & 0xff),
                                 static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

inline bool get_u32(std::istream& in, std::uint32_t& v) {
  std::array<unsigned char, 4> b;
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline bool get_f32(std::istream& in, float& f) {
  std::uint32_t bits;
  if (!get_u32(in, bits)) return false;
  std::memcpy(&f, &bits, 4);
  return true;
}

}  // namespace detail

// Tensor container: "DCNT", version byte, rank byte, u32 dims, f32 payload,
// all little endian.
inline constexpr char kTensorMagic[4] = {'D', 'C', 'N', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;

inline void write_tensor_stream(std::ostream& out, const TensorF& t, const std::string& path) {
  out.write(kTensorMagic, 4);
  out.put(static_cast<char>(kTensorVersion));
  out.put(static_cast<char>(t.ndim()));
  for (int d = 0; d < t.ndim(); ++d) detail::put_u32(out, static_cast<std::uint32_t>(t.dim(d)));
  for (float v : t.values()) {
    if (!std::isfinite(v)) detail::io_fail(path, "refusing to write non-finite values");
    detail::put_f32(out, v);
  }
  if (!out) detail::io_fail(path, "write failed");
}

inline void save_tensor(const std::filesystem::path& path, const TensorF& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) detail::io_fail(path.string(), "cannot open for writing");
  write_tensor_stream(out, t, path.string());
}

inline TensorF read_tensor_stream(std::istream& in, const std::string& path) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0)
    detail::io_fail(path, "not a tensor file (bad magic)");
  const int version = in.get();
  if (version != kTensorVersion) detail::io_fail(path, "unsupported tensor version");
  const int ndim = in.get();
  if (ndim < 0 || ndim > 8) detail::io_fail(path, "corrupt tensor rank");
  std::vector<int> shape(static_cast<std::size_t>(ndim));
  std::size_t numel = 1;
  for (int d = 0; d < ndim; ++d) {
    std::uint32_t v = 0;
    if (!detail::get_u32(in, v)) detail::io_fail(path, "truncated tensor header");
    if (v == 0 || v > (1u << 24)) detail::io_fail(path, "corrupt tensor dimension");
    shape[static_cast<std::size_t>(d)] = static_cast<int>(v);
    numel *= v;
  }
  std::vector<float> values(numel);
  for (std::size_t i = 0; i < numel; ++i) {
    if (!detail::get_f32(in, values[i])) detail::io_fail(path, "truncated tensor payload");
    if (!std::isfinite(values[i])) detail::io_fail(path, "non-finite tensor payload");
  }
  return TensorF(std::move(shape), std::move(values));
}

inline TensorF load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) detail::io_fail(path.string(), "cannot open for reading");
  return read_tensor_stream(in, path.string());
}

// A dataset directory holds manifest.tsv (one `name<TAB>split` line per
// class) and one subdirectory of tensor files per class.
enum class Split { base, val, novel };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::base: return "base";
    case Split::val: return "val";
    default: return "novel";
  }
}

struct DatasetClass {
  std::string name;
  Split split = Split::base;
  std::vector<TensorF> images;
};

struct Dataset {
  std::vector<DatasetClass> classes;
  int height = 0, width = 0, channels = 0;

  std::vector<int> indices_of(Split s) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(classes.size()); ++i)
      if (classes[static_cast<std::size_t>(i)].split == s) out.push_back(i);
    return out;
  }
};

inline Dataset load_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / "manifest.tsv";
  std::ifstream manifest(manifest_path);
  if (!manifest) detail::io_fail(manifest_path.string(), "cannot open manifest");

  Dataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      detail::io_fail(manifest_path.string(),
                      "line " + std::to_string(line_no) + ": expected name<TAB>split");
    DatasetClass cls;
    cls.name = line.substr(0, tab);
    const std::string split = line.substr(tab + 1);
    if (split == "base")
      cls.split = Split::base;
    else if (split == "val")
      cls.split = Split::val;
    else if (split == "novel")
      cls.split = Split::novel;
    else
      detail::io_fail(manifest_path.string(),
                      "line " + std::to_string(line_no) + ": unknown split '" + split + "'");
    for (const auto& existing : ds.classes)
      if (existing.name == cls.name)
        detail::io_fail(manifest_path.string(),
                        "line " + std::to_string(line_no) + ": duplicate class '" + cls.name + "'");
    ds.classes.push_back(std::move(cls));
  }
  if (ds.classes.empty()) detail::io_fail(manifest_path.string(), "manifest lists no classes");

  for (auto& cls : ds.classes) {
    const auto dir = root / cls.name;
    if (!std::filesystem::is_directory(dir)) detail::io_fail(dir.string(), "class directory missing");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) detail::io_fail(dir.string(), "class directory has no images");
    for (const auto& f : files) {
      TensorF img = load_tensor(f);
      if (img.ndim() != 3) detail::io_fail(f.string(), "image tensor must be h x w x c");
      if (ds.height == 0) {
        ds.height = img.dim(0);
        ds.width = img.dim(1);
        ds.channels = img.dim(2);
      } else if (img.dim(0) != ds.height || img.dim(1) != ds.width ||
                 img.dim(2) != ds.channels) {
        detail::io_fail(f.string(), "image shape differs from the rest of the dataset");
      }
      cls.images.push_back(std::move(img));
    }
  }
  return ds;
}

inline void save_dataset(const std::filesystem::path& root, const Dataset& ds) {
  std::filesystem::create_directories(root);
  std::ofstream manifest(root / "manifest.tsv", std::ios::trunc);
  if (!manifest) detail::io_fail((root / "manifest.tsv").string(), "cannot open for writing");
  for (const auto& cls : ds.classes) manifest << cls.name << '\t' << split_name(cls.split) << '\n';
  manifest.close();
  for (const auto& cls : ds.classes) {
    const auto dir = root / cls.name;
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < cls.images.size(); ++i) {
      std::ostringstream name;
      name << "img_" << std::setw(4) << std::setfill('0') << i << ".dcnt";
      save_tensor(dir / name.str(), cls.images[i]);
    }
  }
}

// Synthetic scenes: oriented sinusoidal gratings. Every class owns one
// frequency/orientation pair, images of a class differ by a small phase
// offset plus pixel noise, and channels are phase shifted copies. Classes are
// assigned to splits round robin as base, base, val, novel.
struct SynthConfig {
  int classes = 20;
  int per_class = 40;
  int height = 32;
  int width = 32;
  int channels = 3;
  std::uint64_t seed = 1;
};

// Noise-free pattern of one class; exposed so tests can measure how the
// generator separates classes.
inline TensorF synth_pattern(int class_id, int n_classes, int h, int w, int c, float phase) {
  TensorF img({h, w, c});
  const float theta = 3.14159265358979323846f * static_cast<float>(class_id) /
                      static_cast<float>(n_classes);
  const float cycles = 4.0f + 3.0f * static_cast<float>(class_id % 5);
  const float freq = 2.0f * 3.14159265358979323846f * cycles / static_cast<float>(w);
  const float cx = std::cos(theta), sx = std::sin(theta);
  auto& v = img.values();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float u = cx * static_cast<float>(x) + sx * static_cast<float>(y);
      for (int ch = 0; ch < c; ++ch)
        v[(static_cast<std::size_t>(y) * w + x) * c + ch] =
            std::cos(freq * u + phase + 0.2f * static_cast<float>(ch));
    }
  return img;
}

inline Dataset synth_dataset(const SynthConfig& cfg) {
  detail::check(cfg.classes >= 4, "synth: need at least four classes, one per split");
  detail::check(cfg.per_class >= 16, "synth: need at least sixteen images per class");
  detail::check(cfg.height >= 1 && cfg.width >= 1 && cfg.channels >= 1,
                "synth: image dimensions must be positive");

  Dataset ds;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.channels = cfg.channels;
  static const Split kRoundRobin[4] = {Split::base, Split::base, Split::val, Split::novel};
  for (int k = 0; k < cfg.classes; ++k) {
    DatasetClass cls;
    std::ostringstream name;
    name << "synth_" << std::setw(3) << std::setfill('0') << k;
    cls.name = name.str();
    cls.split = kRoundRobin[k % 4];
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(k));
    for (int i = 0; i < cfg.per_class; ++i) {
      const float phase = uniform_real<float>(rng, -0.1f, 0.1f);
      TensorF img = synth_pattern(k, cfg.classes, cfg.height, cfg.width, cfg.channels, phase);
      for (auto& v : img.values()) v += 0.1f * normal<float>(rng);
      cls.images.push_back(std::move(img));
    }
    ds.classes.push_back(std::move(cls));
  }
  return ds;
}

// Two-view augmentation. Both views take a random crop (resized back with
// nearest neighbor) and a coin-flip horizontal mirror; the second view adds a
// brightness/contrast jitter clamped to the source value range. Draw order
// per view is fixed: crop row, crop column, flip, then jitter scale and shift.
struct AugmentConfig {
  float crop_fraction = 0.875f;
  float flip_prob = 0.5f;
  float jitter_range = 0.2f;
};

namespace detail {

inline TensorF crop_resize_flip(const TensorF& img, int oy, int ox, int ch_, int cw, bool flip) {
  const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
  TensorF out({h, w, c});
  const auto& src = img.values();
  auto& dst = out.values();
  for (int y = 0; y < h; ++y) {
    const int sy = oy + y * ch_ / h;
    for (int x = 0; x < w; ++x) {
      int sx = ox + x * cw / w;
      if (flip) sx = ox + cw - 1 - (x * cw / w);
      for (int ci = 0; ci < c; ++ci)
        dst[(static_cast<std::size_t>(y) * w + x) * c + ci] =
            src[(static_cast<std::size_t>(sy) * w + sx) * c + ci];
    }
  }
  return out;
}

}  // namespace detail

inline TensorF augment_view(const TensorF& img, const AugmentConfig& cfg, Rng& rng, bool jitter) {
  detail::check(img.ndim() == 3, "augment_view: image must be h x w x c");
  detail::check(cfg.crop_fraction > 0.0f && cfg.crop_fraction <= 1.0f,
                "augment_view: crop fraction must be in (0, 1]");
  detail::check(cfg.flip_prob >= 0.0f && cfg.flip_prob <= 1.0f,
                "augment_view: flip probability must be in [0, 1]");
  detail::check(cfg.jitter_range >= 0.0f, "augment_view: jitter range must be nonnegative");
  const int h = img.dim(0), w = img.dim(1);
  const int ch_ = std::max(1, static_cast<int>(std::lround(cfg.crop_fraction * h)));
  const int cw = std::max(1, static_cast<int>(std::lround(cfg.crop_fraction * w)));
  const int oy = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(h - ch_ + 1)));
  const int ox = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(w - cw + 1)));
  const bool flip = coin(rng, cfg.flip_prob);
  TensorF out = detail::crop_resize_flip(img, oy, ox, ch_, cw, flip);
  if (jitter && cfg.jitter_range > 0.0f) {
    const float a = uniform_real<float>(rng, -cfg.jitter_range, cfg.jitter_range);
    const float b = uniform_real<float>(rng, -cfg.jitter_range, cfg.jitter_range);
    float lo = img.values()[0], hi = img.values()[0];
    for (float v : img.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    for (auto& v : out.values()) v = std::clamp(v * (1.0f + a) + b, lo, hi);
  }
  return out;
}

inline std::pair<TensorF, TensorF> augment_pair(const TensorF& img, const AugmentConfig& cfg,
                                                Rng& rng) {
  TensorF first = augment_view(img, cfg, rng, false);
  TensorF second = augment_view(img, cfg, rng, true);
  return {std::move(first), std::move(second)};
}

}  // namespace dcn
