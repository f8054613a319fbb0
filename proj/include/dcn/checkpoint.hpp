#pragma once

// Model checkpoints: "DCNC", a version byte, the canonical config text, the
// named parameter tensors in enumeration order, and a trailing FNV-1a hash
// of everything before it. Stored weights are single precision, matching the
// training representation.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dcn/config.hpp"
#include "dcn/data_io.hpp"
#include "dcn/model.hpp"

namespace dcn {

inline constexpr char kCheckpointMagic[4] = {'D', 'C', 'N', 'C'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (unsigned char b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ull;
  }
  return hash;
}

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_block(std::ostream& out, const std::string& bytes) {
  put_u32(out, static_cast<std::uint32_t>(bytes.size()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string get_block(std::istream& in, const std::string& path, const char* what) {
  std::uint32_t len = 0;
  if (!get_u32(in, len)) io_fail(path, std::string("truncated ") + what);
  if (len > (1u << 26)) io_fail(path, std::string("oversized ") + what);
  std::string bytes(len, '\0');
  if (!in.read(bytes.data(), len)) io_fail(path, std::string("truncated ") + what);
  return bytes;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, DcnModel<float>& model,
                            const RunConfig& cfg) {
  detail::check(cfg.base_classes == model.cfg.classes,
                "checkpoint: config base_classes out of step with the model head");
  std::ostringstream body;
  body.write(kCheckpointMagic, 4);
  body.put(static_cast<char>(kCheckpointVersion));
  detail::put_block(body, dump_config(cfg));

  auto params = model.named_params();
  detail::put_u32(body, static_cast<std::uint32_t>(params.size()));
  for (auto& [name, tensor] : params) {
    detail::put_block(body, name);
    std::ostringstream block;
    write_tensor_stream(block, *tensor, path.string() + ":" + name);
    detail::put_block(body, block.str());
  }

  const std::string bytes = body.str();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) detail::io_fail(path.string(), "cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  detail::put_u64(out, fnv1a64(bytes));
  if (!out) detail::io_fail(path.string(), "write failed");
}

struct LoadedCheckpoint {
  RunConfig config;
  DcnModel<float> model;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) detail::io_fail(path.string(), "cannot open for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string all = buf.str();
  if (all.size() < 13) detail::io_fail(path.string(), "file too short for a checkpoint");

  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(all[all.size() - 8 + i]))
              << (8 * i);
  all.resize(all.size() - 8);
  if (fnv1a64(all) != stored)
    detail::io_fail(path.string(), "checksum mismatch, the checkpoint is corrupt");

  std::istringstream body(all);
  char magic[4];
  if (!body.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    detail::io_fail(path.string(), "not a checkpoint file (bad magic)");
  if (body.get() != kCheckpointVersion)
    detail::io_fail(path.string(), "unsupported checkpoint version");

  LoadedCheckpoint out;
  out.config = parse_config(detail::get_block(body, path.string(), "config snapshot"));
  detail::check(out.config.base_classes >= 1, "checkpoint: snapshot lacks the head width");
  ModelConfig mc = out.config.model;
  mc.classes = out.config.base_classes;
  out.model = DcnModel<float>::init(mc, 0);

  std::uint32_t count = 0;
  if (!detail::get_u32(body, count)) detail::io_fail(path.string(), "truncated parameter count");
  auto params = out.model.named_params();
  if (count != params.size())
    detail::io_fail(path.string(), "checkpoint holds " + std::to_string(count) +
                                       " parameters, the model needs " +
                                       std::to_string(params.size()));
  for (auto& [name, tensor] : params) {
    const std::string stored_name = detail::get_block(body, path.string(), "parameter name");
    if (stored_name != name)
      detail::io_fail(path.string(),
                      "unexpected parameter '" + stored_name + "', wanted '" + name + "'");
    std::istringstream block(detail::get_block(body, path.string(), "parameter tensor"));
    TensorF loaded = read_tensor_stream(block, path.string() + ":" + name);
    if (loaded.shape() != tensor->shape())
      detail::io_fail(path.string(), "parameter '" + name + "' has the wrong shape");
    tensor->values() = loaded.values();
  }
  return out;
}

}  // namespace dcn
