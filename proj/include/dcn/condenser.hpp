#pragma once

// Context branch. A squeeze conv scores every position, spatial softmax turns
// the scores into an attention map, and the gated map is squeezed, normalized
// and re-expanded before the residual add. Global average pooling of the
// enhanced map yields the context feature vector.

#include "dcn/init.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

template <typename R>
struct CondenserParams {
  TensorT<R> squeeze1_w, squeeze1_b;  // 1x1 conv, c -> 1
  TensorT<R> squeeze2_w, squeeze2_b;  // 1x1 conv, c -> 1
  TensorT<R> expand_w, expand_b;      // 1x1 conv, 1 -> c
  TensorT<R> head_w, head_b;          // linear, c -> classes
  TensorT<R> proj1_w, proj1_b;        // linear, c -> proj_hidden
  TensorT<R> proj2_w, proj2_b;        // linear, proj_hidden -> proj_out

  static CondenserParams init(int c, int classes, int proj_hidden, int proj_out, Rng& rng) {
    detail::check(c >= 1 && classes >= 1 && proj_hidden >= 1 && proj_out >= 1,
                  "condenser: dimensions must be positive");
    CondenserParams p;
    p.squeeze1_w = conv_weight<R>(1, c, 1, rng);
    p.squeeze1_b = TensorT<R>({1});
    p.squeeze2_w = conv_weight<R>(1, c, 1, rng);
    p.squeeze2_b = TensorT<R>({1});
    p.expand_w = conv_weight<R>(1, 1, c, rng);
    p.expand_b = TensorT<R>({c});
    p.head_w = linear_weight<R>(classes, c, rng);
    p.head_b = TensorT<R>({classes});
    p.proj1_w = linear_weight<R>(proj_hidden, c, rng);
    p.proj1_b = TensorT<R>({proj_hidden});
    p.proj2_w = linear_weight<R>(proj_out, proj_hidden, rng);
    p.proj2_b = TensorT<R>({proj_out});
    return p;
  }
};

template <typename R>
struct CondenseResult {
  TensorT<R> enhanced;  // Z~, same shape as the input map
  TensorT<R> context;   // {1, 1, c} pooled context features
};

template <typename R>
CondenseResult<R> condense(TapeT<R>& tape, const TensorT<R>& z, const CondenserParams<R>& p) {
  detail::check(z.ndim() == 3, "condense: input must be h x w x c");
  detail::check(p.squeeze1_w.dim(2) == z.dim(2),
                "condense: channel count does not match the parameters");
  const std::int64_t hw = static_cast<std::int64_t>(z.dim(0)) * z.dim(1);
  auto scores = conv2d(tape, z, p.squeeze1_w, p.squeeze1_b, 1, 0);
  auto attn = softmax(tape, scores, GroupSpec{1, hw, 1});
  auto gated = mul_broadcast_spatial(tape, attn, z);
  auto squeezed = conv2d(tape, gated, p.squeeze2_w, p.squeeze2_b, 1, 0);
  auto normed = layer_norm(tape, squeezed, GroupSpec{1, hw, 1});
  auto activated = relu(tape, normed);
  auto expanded = conv2d(tape, activated, p.expand_w, p.expand_b, 1, 0);
  CondenseResult<R> out;
  out.enhanced = add(tape, expanded, z);
  out.context = global_avg_pool(tape, out.enhanced);
  return out;
}

template <typename R>
TensorT<R> context_logits(TapeT<R>& tape, const TensorT<R>& context,
                          const CondenserParams<R>& p) {
  return linear(tape, p.head_w, context, p.head_b);
}

// Unit-norm embedding for the contrastive objective: MLP with one hidden
// ReLU layer, then L2 normalization.
template <typename R>
TensorT<R> project_context(TapeT<R>& tape, const TensorT<R>& context,
                           const CondenserParams<R>& p) {
  auto hidden = relu(tape, linear(tape, p.proj1_w, context, p.proj1_b));
  auto out = linear(tape, p.proj2_w, hidden, p.proj2_b);
  return l2_normalize(tape, out);
}

}  // namespace dcn
