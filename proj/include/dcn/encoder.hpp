#pragma once

// Convolutional backbone. Each block is conv3x3 (stride 1, pad 1) followed by
// per-channel layer normalization (statistics over the h x w plane), ReLU and
// a 2x2 max downsample. Feature maps stay channel-last throughout.

#include <string>
#include <vector>

#include "dcn/init.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

struct EncoderConfig {
  int input_h = 32;
  int input_w = 32;
  int input_channels = 3;
  int blocks = 4;
  std::vector<int> channels = {32, 64, 64, 64};
  bool residual = false;

  void validate() const {
    detail::check(blocks >= 1, "encoder: needs at least one block");
    detail::check(static_cast<int>(channels.size()) == blocks,
                  "encoder: channels list length must equal blocks");
    for (int c : channels) detail::check(c >= 1, "encoder: channel counts must be positive");
    detail::check(input_channels >= 1, "encoder: input channels must be positive");
    const int div = 1 << blocks;
    detail::check(input_h % div == 0 && input_w % div == 0,
                  "encoder: input height and width must be divisible by 2^blocks");
  }

  int out_h() const { return input_h >> blocks; }
  int out_w() const { return input_w >> blocks; }
  int out_channels() const { return channels.back(); }
};

template <typename R>
struct EncoderParams {
  struct Block {
    TensorT<R> w;
    TensorT<R> b;
  };
  std::vector<Block> blocks;

  static EncoderParams init(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParams p;
    int c_in = cfg.input_channels;
    for (int i = 0; i < cfg.blocks; ++i) {
      const int c_out = cfg.channels[static_cast<std::size_t>(i)];
      p.blocks.push_back({conv_weight<R>(3, c_in, c_out, rng), TensorT<R>({c_out})});
      c_in = c_out;
    }
    return p;
  }
};

// image {H, W, C_in} -> feature maps {H/2^blocks, W/2^blocks, channels.back()}.
template <typename R>
TensorT<R> encode(TapeT<R>& tape, const TensorT<R>& image, const EncoderConfig& cfg,
                  const EncoderParams<R>& params) {
  cfg.validate();
  detail::check(image.ndim() == 3 && image.dim(0) == cfg.input_h &&
                    image.dim(1) == cfg.input_w && image.dim(2) == cfg.input_channels,
                "encode: image shape does not match the encoder config");
  detail::check(static_cast<int>(params.blocks.size()) == cfg.blocks,
                "encode: parameter block count does not match the config");
  TensorT<R> x = image;
  for (int i = 0; i < cfg.blocks; ++i) {
    const auto& blk = params.blocks[static_cast<std::size_t>(i)];
    auto y = conv2d(tape, x, blk.w, blk.b, 1, 1);
    const int h = y.dim(0), w = y.dim(1), c = y.dim(2);
    y = layer_norm(tape, y, GroupSpec{1, static_cast<std::int64_t>(h) * w, c});
    y = relu(tape, y);
    // Identity skips need matching channel counts; blocks that widen skip the skip.
    if (cfg.residual && x.dim(2) == c) y = add(tape, y, x);
    x = max_pool2x2(tape, y);
  }
  return x;
}

template <typename R>
std::vector<TensorT<R>> encode_batch(TapeT<R>& tape, const std::vector<TensorT<R>>& images,
                                     const EncoderConfig& cfg, const EncoderParams<R>& params) {
  std::vector<TensorT<R>> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(encode(tape, img, cfg, params));
  return out;
}

}  // namespace dcn
