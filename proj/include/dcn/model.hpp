#pragma once

// The full network: one shared encoder feeding two parallel branches. The
// condenser summarizes a feature map into a context vector, the smelter
// re-weights it into a detail map; each branch carries its own classifier
// head and its own projection for the contrastive losses.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dcn/condenser.hpp"
#include "dcn/encoder.hpp"
#include "dcn/smelter.hpp"

namespace dcn {

struct ModelConfig {
  EncoderConfig encoder;
  int classes = 1;         // width of both classifier heads
  int proj_hidden = 640;   // context projection, hidden layer
  int proj_out = 128;      // context projection, embedding width
  int m_sp = 4;            // detail branch, spatial conv width
  int reduction = 4;       // detail branch, channel bottleneck divisor
  int cbar = 128;          // detail projection width

  void validate() const {
    encoder.validate();
    detail::check(classes >= 1, "model: need at least one class");
    detail::check(proj_hidden >= 1 && proj_out >= 1 && cbar >= 1,
                  "model: projection widths must be positive");
    detail::check(m_sp >= 1, "model: spatial branch width must be positive");
    detail::check(encoder.out_channels() / reduction >= 1,
                  "model: channel bottleneck leaves no channels");
    detail::check(encoder.out_h() >= 2 && encoder.out_w() >= 2,
                  "model: encoder output too small for the detail branch");
  }
};

template <typename R>
struct DcnModel {
  ModelConfig cfg;
  EncoderParams<R> encoder;
  CondenserParams<R> condenser;
  SmelterParams<R> smelter;

  static DcnModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DcnModel m;
    m.cfg = cfg;
    Rng rng = make_rng(seed);
    const int c = cfg.encoder.out_channels();
    m.encoder = EncoderParams<R>::init(cfg.encoder, rng);
    m.condenser = CondenserParams<R>::init(c, cfg.classes, cfg.proj_hidden, cfg.proj_out, rng);
    m.smelter = SmelterParams<R>::init(c, cfg.classes, cfg.m_sp, cfg.reduction, cfg.cbar, rng);
    for (auto& [name, t] : m.named_params()) t->set_requires_grad(true);
    return m;
  }

  // Stable enumeration shared by the optimizer and the checkpoint format.
  std::vector<std::pair<std::string, TensorT<R>*>> named_params() {
    std::vector<std::pair<std::string, TensorT<R>*>> out;
    for (std::size_t b = 0; b < encoder.blocks.size(); ++b) {
      const std::string prefix = "encoder.block" + std::to_string(b) + ".";
      out.emplace_back(prefix + "w", &encoder.blocks[b].w);
      out.emplace_back(prefix + "b", &encoder.blocks[b].b);
    }
    out.emplace_back("condenser.squeeze1_w", &condenser.squeeze1_w);
    out.emplace_back("condenser.squeeze1_b", &condenser.squeeze1_b);
    out.emplace_back("condenser.squeeze2_w", &condenser.squeeze2_w);
    out.emplace_back("condenser.squeeze2_b", &condenser.squeeze2_b);
    out.emplace_back("condenser.expand_w", &condenser.expand_w);
    out.emplace_back("condenser.expand_b", &condenser.expand_b);
    out.emplace_back("condenser.head_w", &condenser.head_w);
    out.emplace_back("condenser.head_b", &condenser.head_b);
    out.emplace_back("condenser.proj1_w", &condenser.proj1_w);
    out.emplace_back("condenser.proj1_b", &condenser.proj1_b);
    out.emplace_back("condenser.proj2_w", &condenser.proj2_w);
    out.emplace_back("condenser.proj2_b", &condenser.proj2_b);
    out.emplace_back("smelter.sp3_w", &smelter.sp3_w);
    out.emplace_back("smelter.sp3_b", &smelter.sp3_b);
    out.emplace_back("smelter.sp1_w", &smelter.sp1_w);
    out.emplace_back("smelter.sp1_b", &smelter.sp1_b);
    out.emplace_back("smelter.ch_a_w", &smelter.ch_a_w);
    out.emplace_back("smelter.ch_a_b", &smelter.ch_a_b);
    out.emplace_back("smelter.ch_b_w", &smelter.ch_b_w);
    out.emplace_back("smelter.ch_b_b", &smelter.ch_b_b);
    out.emplace_back("smelter.fuse_w", &smelter.fuse_w);
    out.emplace_back("smelter.fuse_b", &smelter.fuse_b);
    out.emplace_back("smelter.head_w", &smelter.head_w);
    out.emplace_back("smelter.head_b", &smelter.head_b);
    out.emplace_back("smelter.proj_w", &smelter.proj_w);
    out.emplace_back("smelter.proj_b", &smelter.proj_b);
    return out;
  }
};

// Everything one image produces on its way through both branches.
template <typename R>
struct ImageFeatures {
  TensorT<R> enhanced;    // context branch map, h x w x c
  TensorT<R> context;     // pooled context vector, 1 x 1 x c
  TensorT<R> detail_map;  // detail branch map, h x w x c
};

template <typename R>
ImageFeatures<R> forward_features(TapeT<R>& tape, const TensorT<R>& image, DcnModel<R>& model) {
  auto z = encode(tape, image, model.cfg.encoder, model.encoder);
  auto cond = condense(tape, z, model.condenser);
  ImageFeatures<R> f;
  f.enhanced = cond.enhanced;
  f.context = cond.context;
  f.detail_map = smelt(tape, z, model.smelter);
  return f;
}

}  // namespace dcn
