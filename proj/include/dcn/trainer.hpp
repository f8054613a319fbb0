#pragma once

// Episode-free pretraining over the base classes. Every step augments each
// image into two views, pushes all views through both branches, and descends
// the classification losses plus the two contrastive losses with heavy-ball
// SGD and uniform weight decay.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "dcn/contrastive.hpp"
#include "dcn/data_io.hpp"
#include "dcn/model.hpp"

namespace dcn {

// Negative log softmax probability of one label.
template <typename R>
TensorT<R> cross_entropy(TapeT<R>& tape, const TensorT<R>& logits, int label) {
  detail::check(logits.numel() >= 2, "cross_entropy: need at least two classes");
  const int n = static_cast<int>(logits.numel());
  detail::check(label >= 0 && label < n, "cross_entropy: label out of range");
  const auto& lv = logits.values();
  R mx = lv[0];
  for (R v : lv) mx = std::max(mx, v);
  R sum = R(0);
  for (R v : lv) sum += std::exp(v - mx);
  const R lse = mx + std::log(sum);
  TensorT<R> out = TensorT<R>::scalar(lse - lv[static_cast<std::size_t>(label)]);
  if (detail::start_node(tape, {&logits}, out)) {
    tape.record([n, label, mx, lse, ld = logits.data_ptr(), lg = logits.grad_ptr(),
                 og = out.grad_ptr()] {
      if (!lg) return;
      const R g = (*og)[0];
      for (int k = 0; k < n; ++k) {
        const R p = std::exp((*ld)[static_cast<std::size_t>(k)] - lse);
        (*lg)[static_cast<std::size_t>(k)] += g * (p - (k == label ? R(1) : R(0)));
      }
    });
  }
  return out;
}

struct TrainConfig {
  int epochs = 15;
  int batch_n = 16;  // images per step; each yields two views
  float lr = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 0.0005f;
  float alpha = 1.0f;  // detail contrastive weight inside the contrastive pair
  float beta = 0.1f;   // detail cross entropy weight
  float gamma = 1.0f;  // contrastive weight against cross entropy
  float tau = 0.1f;
  float tau_bar = 0.1f;
  std::uint64_t seed = 1;
  AugmentConfig augment;

  void validate() const {
    detail::check(epochs >= 0, "train: epochs must be nonnegative");
    detail::check(batch_n >= 1, "train: batch size must be positive");
    detail::check(lr >= 0.0f && momentum >= 0.0f && weight_decay >= 0.0f,
                  "train: optimizer constants must be nonnegative");
    detail::check(tau > 0.0f && tau_bar > 0.0f, "train: temperatures must be positive");
  }
};

template <typename R>
struct LossBreakdown {
  R ce = R(0);
  R ccl = R(0);
  R dcl = R(0);
  R total = R(0);
};

template <typename R>
struct LossGraph {
  TensorT<R> total;
  LossBreakdown<R> parts;
};

// Forward pass over a batch of views. Labels index the classifier heads and
// double as the grouping for both contrastive losses.
template <typename R>
LossGraph<R> compute_total_loss(TapeT<R>& tape, const std::vector<TensorT<R>>& views,
                                const std::vector<int>& labels, DcnModel<R>& model,
                                const TrainConfig& cfg) {
  detail::check(views.size() >= 2 && views.size() == labels.size(),
                "loss: need matched views and labels, two or more");
  std::vector<TensorT<R>> embeddings;
  std::vector<AlignmentTriple<R>> triples;
  TensorT<R> ce_ctx = TensorT<R>::scalar(R(0));
  TensorT<R> ce_det = TensorT<R>::scalar(R(0));
  for (std::size_t i = 0; i < views.size(); ++i) {
    auto f = forward_features(tape, views[i], model);
    auto ctx_logits = context_logits(tape, f.context, model.condenser);
    auto det_logits = detail_logits(tape, f.detail_map, model.smelter);
    ce_ctx = add(tape, ce_ctx, cross_entropy(tape, ctx_logits, labels[i]));
    ce_det = add(tape, ce_det, cross_entropy(tape, det_logits, labels[i]));
    embeddings.push_back(project_context(tape, f.context, model.condenser));
    triples.push_back(project_detail(tape, f.detail_map, model.smelter));
  }
  const R inv = R(1) / static_cast<R>(views.size());
  ce_ctx = scale(tape, ce_ctx, inv);
  ce_det = scale(tape, ce_det, inv);
  auto ce = add(tape, ce_ctx, scale(tape, ce_det, static_cast<R>(cfg.beta)));
  auto ccl = ccl_loss(tape, embeddings, labels, static_cast<R>(cfg.tau));
  auto dcl = dcl_loss(tape, triples, labels, static_cast<R>(cfg.tau_bar));
  auto cl = add(tape, ccl, scale(tape, dcl, static_cast<R>(cfg.alpha)));

  LossGraph<R> g;
  g.total = add(tape, ce, scale(tape, cl, static_cast<R>(cfg.gamma)));
  g.parts.ce = ce.value();
  g.parts.ccl = ccl.value();
  g.parts.dcl = dcl.value();
  g.parts.total = g.total.value();
  return g;
}

// Heavy-ball update; weight decay enters through the gradient, equivalent to
// a quadratic penalty on every parameter.
template <typename R>
void sgd_step(std::vector<std::pair<std::string, TensorT<R>*>>& params,
              std::vector<std::vector<R>>& velocity, const TrainConfig& cfg) {
  if (velocity.empty()) {
    velocity.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p)
      velocity[p].assign(params[p].second->numel(), R(0));
  }
  detail::check(velocity.size() == params.size(), "sgd: velocity out of step with params");
  for (std::size_t p = 0; p < params.size(); ++p) {
    TensorT<R>& t = *params[p].second;
    auto& v = velocity[p];
    auto& theta = t.values();
    const auto& g = t.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = static_cast<R>(cfg.momentum) * v[i] -
             static_cast<R>(cfg.lr) * (g[i] + static_cast<R>(cfg.weight_decay) * theta[i]);
      theta[i] += v[i];
    }
    t.zero_grad();
  }
}

// One optimizer step on a batch of source images: augment to two views each
// (twin views sit N apart), build the loss, backpropagate, update.
template <typename R>
LossBreakdown<R> train_step(DcnModel<R>& model,
                            std::vector<std::pair<std::string, TensorT<R>*>>& params,
                            std::vector<std::vector<R>>& velocity,
                            const std::vector<const TensorF*>& images,
                            const std::vector<int>& labels, const TrainConfig& cfg, Rng& rng) {
  detail::check(!images.empty() && images.size() == labels.size(),
                "train_step: need matched images and labels");
  const std::size_t n = images.size();
  std::vector<TensorT<R>> views(2 * n);
  std::vector<int> view_labels(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    auto [first, second] = augment_pair(*images[i], cfg.augment, rng);
    views[i] = TensorT<R>(first.shape(), std::vector<R>(first.values().begin(),
                                                        first.values().end()));
    views[i + n] = TensorT<R>(second.shape(), std::vector<R>(second.values().begin(),
                                                             second.values().end()));
    view_labels[i] = labels[i];
    view_labels[i + n] = labels[i];
  }

  TapeT<R> tape;
  auto graph = compute_total_loss(tape, views, view_labels, model, cfg);
  if (!std::isfinite(graph.parts.total))
    throw std::runtime_error("training diverged: loss is not finite");
  tape.backward(graph.total);
  sgd_step(params, velocity, cfg);
  return graph.parts;
}

template <typename R>
struct EpochStats {
  int epoch = 0;
  LossBreakdown<R> mean;
};

// Full training loop over one flattened image list. Writes one line per
// epoch ("epoch l_ce l_ccl l_dcl l_total") to `metrics` when given.
template <typename R>
std::vector<EpochStats<R>> run_training(DcnModel<R>& model,
                                        const std::vector<const TensorF*>& images,
                                        const std::vector<int>& labels, const TrainConfig& cfg,
                                        std::ostream* metrics) {
  cfg.validate();
  detail::check(images.size() == labels.size() && !images.empty(),
                "train: need matched images and labels");
  auto params = model.named_params();
  std::vector<std::vector<R>> velocity;
  std::vector<EpochStats<R>> stats;
  const int n = static_cast<int>(images.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(epoch) + 1);
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(i) + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    EpochStats<R> ep;
    ep.epoch = epoch;
    int steps = 0;
    for (int start = 0; start < n; start += cfg.batch_n) {
      const int stop = std::min(n, start + cfg.batch_n);
      std::vector<const TensorF*> batch;
      std::vector<int> batch_labels;
      for (int i = start; i < stop; ++i) {
        batch.push_back(images[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        batch_labels.push_back(labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
      }
      auto parts = train_step(model, params, velocity, batch, batch_labels, cfg, rng);
      ep.mean.ce += parts.ce;
      ep.mean.ccl += parts.ccl;
      ep.mean.dcl += parts.dcl;
      ep.mean.total += parts.total;
      ++steps;
    }
    ep.mean.ce /= static_cast<R>(steps);
    ep.mean.ccl /= static_cast<R>(steps);
    ep.mean.dcl /= static_cast<R>(steps);
    ep.mean.total /= static_cast<R>(steps);
    stats.push_back(ep);
    if (metrics)
      *metrics << epoch << '\t' << ep.mean.ce << '\t' << ep.mean.ccl << '\t' << ep.mean.dcl
               << '\t' << ep.mean.total << '\n';
  }
  return stats;
}

}  // namespace dcn
