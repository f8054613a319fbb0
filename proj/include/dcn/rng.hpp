#pragma once

// Seeded randomness helpers. The engine is std::mt19937_64 (bit-exact by the
// standard); the value transforms below are hand-rolled so that draws are
// reproducible across standard library implementations too.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace dcn {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Independent stream for subtask `index` of a run seeded with `seed`.
inline Rng make_rng(std::uint64_t seed, std::uint64_t index = 0) {
  return Rng(splitmix64(seed) ^ splitmix64(0x517cc1b727220a95ull * (index + 1)));
}

// Unbiased integer in [0, n) via rejection; avoids modulo bias.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_below: n must be positive");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v = rng();
  while (v >= limit) v = rng();
  return v % n;
}

template <typename R>
R uniform_real(Rng& rng, R lo, R hi) {
  const R u = static_cast<R>(rng() >> 11) * static_cast<R>(0x1p-53);
  return lo + (hi - lo) * u;
}

template <typename R>
R normal(Rng& rng, R mean = R(0), R stddev = R(1)) {
  R u1 = uniform_real<R>(rng, R(0), R(1));
  while (u1 <= R(0)) u1 = uniform_real<R>(rng, R(0), R(1));
  const R u2 = uniform_real<R>(rng, R(0), R(1));
  const R mag = std::sqrt(R(-2) * std::log(u1));
  return mean + stddev * mag * std::cos(R(2) * R(M_PI) * u2);
}

inline bool coin(Rng& rng, double p) {
  return uniform_real<double>(rng, 0.0, 1.0) < p;
}

// Partial Fisher-Yates: first `take` entries of a random permutation of [0, n).
inline std::vector<int> sample_without_replacement(Rng& rng, int n, int take) {
  if (take < 0 || take > n) {
    throw std::invalid_argument("sample_without_replacement: take out of range");
  }
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < take; ++i) {
    const auto j = i + static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(take));
  return idx;
}

}  // namespace dcn
