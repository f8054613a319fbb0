#pragma once

// Parameter initialization: Kaiming-uniform fan-in weights, zero biases.

#include <cmath>

#include "dcn/rng.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

template <typename R>
void kaiming_fill(TensorT<R>& w, int fan_in, Rng& rng) {
  const R bound = std::sqrt(R(6) / static_cast<R>(fan_in));
  for (auto& v : w.values()) v = uniform_real<R>(rng, -bound, bound);
}

template <typename R>
TensorT<R> conv_weight(int k, int c_in, int c_out, Rng& rng) {
  TensorT<R> w({k, k, c_in, c_out});
  kaiming_fill(w, k * k * c_in, rng);
  return w;
}

template <typename R>
TensorT<R> linear_weight(int out, int in, Rng& rng) {
  TensorT<R> w({out, in});
  kaiming_fill(w, in, rng);
  return w;
}

}  // namespace dcn
