#pragma once

// Contrastive objectives. Both losses share one supervised contrastive core
// over a 2N x 2N score matrix: every sample is an anchor, its positives are
// the other samples with the same label, and the denominator runs over all
// entries except the anchor itself. The context loss scores pairs by dot
// product of unit embeddings; the detail loss scores them by the cosine of
// cross-aligned value maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "dcn/smelter.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

// Supervised contrastive loss over a square score matrix. Returns the sum
// over anchors of -(1/|P_i|) sum_{p in P_i} log softmax_{k != i}(s_ip / tau).
// The diagonal never enters numerator or denominator.
template <typename R>
TensorT<R> supcon_loss(TapeT<R>& tape, const TensorT<R>& scores,
                       const std::vector<int>& labels, R tau) {
  detail::check(scores.ndim() == 2 && scores.dim(0) == scores.dim(1),
                "supcon_loss: scores must be a square matrix");
  const int n = scores.dim(0);
  detail::check(n >= 2, "supcon_loss: need at least two samples");
  detail::check(static_cast<int>(labels.size()) == n,
                "supcon_loss: one label per row required");
  detail::check(tau > R(0), "supcon_loss: temperature must be positive");

  std::vector<int> pos_count(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n; ++k)
      if (k != i && labels[static_cast<std::size_t>(k)] == labels[static_cast<std::size_t>(i)])
        ++pos_count[static_cast<std::size_t>(i)];
    detail::check(pos_count[static_cast<std::size_t>(i)] > 0,
                  "supcon_loss: every anchor needs at least one positive");
  }

  const auto& sv = scores.values();
  // Off-diagonal softmax probabilities, cached for the backward pass.
  auto probs = std::make_shared<std::vector<R>>(static_cast<std::size_t>(n) * n, R(0));
  R total = R(0);
  for (int i = 0; i < n; ++i) {
    R mx = -std::numeric_limits<R>::infinity();
    for (int k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, sv[static_cast<std::size_t>(i) * n + k] / tau);
    R denom = R(0);
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      const R e = std::exp(sv[static_cast<std::size_t>(i) * n + k] / tau - mx);
      (*probs)[static_cast<std::size_t>(i) * n + k] = e;
      denom += e;
    }
    const R log_denom = std::log(denom);
    R row = R(0);
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      (*probs)[static_cast<std::size_t>(i) * n + k] /= denom;
      if (labels[static_cast<std::size_t>(k)] == labels[static_cast<std::size_t>(i)])
        row += sv[static_cast<std::size_t>(i) * n + k] / tau - mx - log_denom;
    }
    total -= row / static_cast<R>(pos_count[static_cast<std::size_t>(i)]);
  }

  TensorT<R> out = TensorT<R>::scalar(total);
  if (detail::start_node(tape, {&scores}, out)) {
    tape.record([n, tau, labels, pos_count, probs, sg = scores.grad_ptr(),
                 og = out.grad_ptr()] {
      if (!sg) return;
      const R g = (*og)[0];
      for (int i = 0; i < n; ++i) {
        const R inv_p = R(1) / static_cast<R>(pos_count[static_cast<std::size_t>(i)]);
        for (int k = 0; k < n; ++k) {
          if (k == i) continue;
          const bool positive =
              labels[static_cast<std::size_t>(k)] == labels[static_cast<std::size_t>(i)];
          const R p = (*probs)[static_cast<std::size_t>(i) * n + k];
          (*sg)[static_cast<std::size_t>(i) * n + k] +=
              g * (p - (positive ? inv_p : R(0))) / tau;
        }
      }
    });
  }
  return out;
}

// Context-level loss: dot products of unit embeddings feed the core.
template <typename R>
TensorT<R> ccl_loss(TapeT<R>& tape, const std::vector<TensorT<R>>& embeddings,
                    const std::vector<int>& labels, R tau) {
  detail::check(!embeddings.empty(), "ccl_loss: no embeddings");
  auto f = stack_rows(tape, embeddings);
  auto scores = matmul(tape, f, transpose2d(tape, f));
  return supcon_loss(tape, scores, labels, tau);
}

// Value map of `other` re-expressed at the positions of `anchor`: each anchor
// position attends over the other map's positions with scaled dot products.
template <typename R>
TensorT<R> align_values(TapeT<R>& tape, const AlignmentTriple<R>& anchor,
                        const AlignmentTriple<R>& other) {
  detail::check(anchor.cbar == other.cbar, "align_values: projection widths differ");
  const R inv_sqrt = R(1) / std::sqrt(static_cast<R>(anchor.cbar));
  auto logits = scale(tape, matmul(tape, anchor.q(), transpose2d(tape, other.k())), inv_sqrt);
  auto attn = softmax(tape, logits, GroupSpec{anchor.hw, other.hw, 1});
  return matmul(tape, attn, other.v());
}

// Symmetric similarity of two detail maps: cosine of each map against the
// other one aligned to it, averaged. Swapping the arguments swaps the two
// addends only, so the result is symmetric to the last bit.
template <typename R>
TensorT<R> aligned_similarity(TapeT<R>& tape, const AlignmentTriple<R>& a,
                              const AlignmentTriple<R>& b) {
  auto b_at_a = align_values(tape, a, b);
  auto a_at_b = align_values(tape, b, a);
  auto cos_a = cosine_flat(tape, a.v(), b_at_a);
  auto cos_b = cosine_flat(tape, b.v(), a_at_b);
  return scale(tape, add(tape, cos_a, cos_b), R(0.5));
}

// Detail-level loss: pairwise aligned similarities fill a symmetric score
// matrix (diagonal zero, never read by the core).
template <typename R>
TensorT<R> dcl_loss(TapeT<R>& tape, const std::vector<AlignmentTriple<R>>& triples,
                    const std::vector<int>& labels, R tau_bar) {
  const int n = static_cast<int>(triples.size());
  detail::check(n >= 2, "dcl_loss: need at least two detail maps");
  std::vector<TensorT<R>> upper;
  upper.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      upper.push_back(aligned_similarity(tape, triples[static_cast<std::size_t>(i)],
                                         triples[static_cast<std::size_t>(j)]));
  auto scores = pack_symmetric(tape, upper, n);
  return supcon_loss(tape, scores, labels, tau_bar);
}

// Combined contrastive objective.
template <typename R>
TensorT<R> cl_loss(TapeT<R>& tape, const std::vector<TensorT<R>>& embeddings,
                   const std::vector<AlignmentTriple<R>>& triples,
                   const std::vector<int>& labels, R tau, R tau_bar, R alpha) {
  auto ccl = ccl_loss(tape, embeddings, labels, tau);
  auto dcl = dcl_loss(tape, triples, labels, tau_bar);
  return add(tape, ccl, scale(tape, dcl, alpha));
}

}  // namespace dcn
