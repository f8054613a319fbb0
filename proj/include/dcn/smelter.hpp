#pragma once

// Detail branch. Two descriptor paths, spatial (channel-mean map through a
// strided conv and back up) and channel (squeeze-excite style bottleneck),
// meet in an outer product; a fused 1x1 conv and a sigmoid produce the gate
// S, and Z_d = S * Z + Z. Also hosts the per-position projection that turns
// detail maps into alignment triples.

#include "dcn/init.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

template <typename R>
struct SmelterParams {
  TensorT<R> sp3_w, sp3_b;    // 3x3 conv, 1 -> m_sp, stride 2, pad 1
  TensorT<R> sp1_w, sp1_b;    // 1x1 conv, m_sp -> 1
  TensorT<R> ch_a_w, ch_a_b;  // 1x1 conv, c -> c/r
  TensorT<R> ch_b_w, ch_b_b;  // 1x1 conv, c/r -> c
  TensorT<R> fuse_w, fuse_b;  // 1x1 conv, c -> c
  TensorT<R> head_w, head_b;  // linear, c -> classes
  TensorT<R> proj_w, proj_b;  // per-position linear, c -> cbar

  static SmelterParams init(int c, int classes, int m_sp, int reduction, int cbar, Rng& rng) {
    detail::check(c >= 1 && classes >= 1 && m_sp >= 1 && reduction >= 1 && cbar >= 1,
                  "smelter: dimensions must be positive");
    const int cr = c / reduction;
    detail::check(cr >= 1, "smelter: channel reduction leaves no channels");
    SmelterParams p;
    p.sp3_w = conv_weight<R>(3, 1, m_sp, rng);
    p.sp3_b = TensorT<R>({m_sp});
    p.sp1_w = conv_weight<R>(1, m_sp, 1, rng);
    p.sp1_b = TensorT<R>({1});
    p.ch_a_w = conv_weight<R>(1, c, cr, rng);
    p.ch_a_b = TensorT<R>({cr});
    p.ch_b_w = conv_weight<R>(1, cr, c, rng);
    p.ch_b_b = TensorT<R>({c});
    p.fuse_w = conv_weight<R>(1, c, c, rng);
    p.fuse_b = TensorT<R>({c});
    p.head_w = linear_weight<R>(classes, c, rng);
    p.head_b = TensorT<R>({classes});
    p.proj_w = linear_weight<R>(cbar, c, rng);
    p.proj_b = TensorT<R>({cbar});
    return p;
  }
};

template <typename R>
TensorT<R> smelt(TapeT<R>& tape, const TensorT<R>& z, const SmelterParams<R>& p) {
  detail::check(z.ndim() == 3, "smelt: input must be h x w x c");
  const int h = z.dim(0), w = z.dim(1);
  detail::check(h >= 2 && w >= 2, "smelt: feature map must be at least 2 x 2");
  detail::check(p.ch_a_w.dim(2) == z.dim(2),
                "smelt: channel count does not match the parameters");
  auto spatial_desc = channel_mean(tape, z);      // {h, w, 1}
  auto channel_desc = global_avg_pool(tape, z);   // {1, 1, c}

  auto sp = conv2d(tape, spatial_desc, p.sp3_w, p.sp3_b, 2, 1);
  sp = upsample_nearest(tape, sp, h, w);
  auto z_sp = conv2d(tape, sp, p.sp1_w, p.sp1_b, 1, 0);  // {h, w, 1}

  auto bottleneck = relu(tape, conv2d(tape, channel_desc, p.ch_a_w, p.ch_a_b, 1, 0));
  auto z_ch = conv2d(tape, bottleneck, p.ch_b_w, p.ch_b_b, 1, 0);  // {1, 1, c}

  auto joint = outer_spatial_channel(tape, z_sp, z_ch);
  auto gate = sigmoid(tape, conv2d(tape, joint, p.fuse_w, p.fuse_b, 1, 0));
  return add(tape, mul(tape, gate, z), z);
}

template <typename R>
TensorT<R> detail_logits(TapeT<R>& tape, const TensorT<R>& z_d, const SmelterParams<R>& p) {
  auto pooled = global_avg_pool(tape, z_d);
  return linear(tape, p.head_w, pooled, p.head_b);
}

// Query, key and value of one detail map; equal by construction right after
// projection, so a single matrix backs all three.
template <typename R>
struct AlignmentTriple {
  TensorT<R> qkv;  // {hw, cbar}
  int hw = 0;
  int cbar = 0;

  const TensorT<R>& q() const { return qkv; }
  const TensorT<R>& k() const { return qkv; }
  const TensorT<R>& v() const { return qkv; }
};

template <typename R>
AlignmentTriple<R> project_detail(TapeT<R>& tape, const TensorT<R>& z_d,
                                  const SmelterParams<R>& p) {
  detail::check(z_d.ndim() == 3, "project_detail: input must be h x w x c");
  const int hw = z_d.dim(0) * z_d.dim(1);
  const int c = z_d.dim(2);
  detail::check(p.proj_w.dim(1) == c, "project_detail: channel count does not match");
  auto rows = reshape(tape, z_d, {hw, c});
  auto projected = matmul(tape, rows, transpose2d(tape, p.proj_w));
  auto shifted = add_row_broadcast(tape, projected, p.proj_b);
  AlignmentTriple<R> t;
  t.qkv = relu(tape, shifted);
  t.hw = hw;
  t.cbar = p.proj_w.dim(0);
  return t;
}

}  // namespace dcn
