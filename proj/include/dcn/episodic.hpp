#pragma once

// Few-shot evaluation. The trained model is frozen, every image of the
// evaluation split is embedded once, and episodes are then drawn over the
// cached vectors: `way` classes, `shot` support and `query` test images each.
// Queries are scored against class prototypes with both branches' cosines.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <string>
#include <thread>
#include <vector>

#include "dcn/data_io.hpp"
#include "dcn/model.hpp"

namespace dcn {

struct EpisodeSpec {
  int way = 5;
  int shot = 1;
  int query = 15;

  void validate() const {
    detail::check(way >= 2, "episode: need at least two classes per task");
    detail::check(shot >= 1 && query >= 1, "episode: shot and query must be positive");
  }
};

struct Episode {
  std::vector<int> classes;                // positions into the candidate class list
  std::vector<std::vector<int>> support;   // way x shot image indices
  std::vector<std::vector<int>> query;     // way x query image indices
};

// Draw order is fixed: classes first, then the images of each chosen class
// in class order. Every draw is without replacement.
inline Episode sample_episode(Rng& rng, const std::vector<int>& images_per_class,
                              const EpisodeSpec& spec) {
  spec.validate();
  const int candidates = static_cast<int>(images_per_class.size());
  detail::check(candidates >= spec.way, "episode: not enough classes in the split");
  Episode ep;
  ep.classes = sample_without_replacement(rng, candidates, spec.way);
  for (int c : ep.classes) {
    const int have = images_per_class[static_cast<std::size_t>(c)];
    detail::check(have >= spec.shot + spec.query,
                  "episode: a class has too few images for shot plus query");
    auto picks = sample_without_replacement(rng, have, spec.shot + spec.query);
    ep.support.emplace_back(picks.begin(), picks.begin() + spec.shot);
    ep.query.emplace_back(picks.begin() + spec.shot, picks.end());
  }
  return ep;
}

// One image reduced to its two branch vectors, both of length c.
struct BranchEmbedding {
  std::vector<float> context;
  std::vector<float> detail;
};

template <typename R>
BranchEmbedding embed_image(DcnModel<R>& model, const TensorF& image) {
  TapeT<R> tape;
  tape.set_recording(false);
  TensorT<R> img(image.shape(),
                 std::vector<R>(image.values().begin(), image.values().end()));
  auto f = forward_features(tape, img, model);
  auto pooled_detail = global_avg_pool(tape, f.detail_map);
  BranchEmbedding e;
  e.context.assign(f.context.values().begin(), f.context.values().end());
  e.detail.assign(pooled_detail.values().begin(), pooled_detail.values().end());
  return e;
}

namespace detail {

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline std::vector<double> softmax_plain(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double denom = 0.0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    denom += out[i];
  }
  for (auto& v : out) v /= denom;
  return out;
}

}  // namespace detail

// Mean of the support embeddings, branch by branch.
inline BranchEmbedding compute_prototype(const std::vector<const BranchEmbedding*>& support) {
  detail::check(!support.empty(), "prototype: no support embeddings");
  BranchEmbedding proto;
  proto.context.assign(support[0]->context.size(), 0.0f);
  proto.detail.assign(support[0]->detail.size(), 0.0f);
  for (const auto* e : support) {
    for (std::size_t i = 0; i < proto.context.size(); ++i) proto.context[i] += e->context[i];
    for (std::size_t i = 0; i < proto.detail.size(); ++i) proto.detail[i] += e->detail[i];
  }
  const float inv = 1.0f / static_cast<float>(support.size());
  for (auto& v : proto.context) v *= inv;
  for (auto& v : proto.detail) v *= inv;
  return proto;
}

// Fused two-branch scoring: the softmaxed context cosines and the softmaxed
// detail cosines are averaged, ties break toward the lowest class position.
inline int predict_query(const BranchEmbedding& query,
                         const std::vector<BranchEmbedding>& prototypes) {
  detail::check(!prototypes.empty(), "predict: no prototypes");
  std::vector<double> ctx_cos, det_cos;
  for (const auto& p : prototypes) {
    ctx_cos.push_back(detail::cosine(query.context, p.context));
    det_cos.push_back(detail::cosine(query.detail, p.detail));
  }
  const auto ctx_p = detail::softmax_plain(ctx_cos);
  const auto det_p = detail::softmax_plain(det_cos);
  int best = 0;
  double best_score = -1.0;
  for (std::size_t k = 0; k < prototypes.size(); ++k) {
    const double score = 0.5 * (ctx_p[k] + det_p[k]);
    if (score > best_score) {
      best_score = score;
      best = static_cast<int>(k);
    }
  }
  return best;
}

// Fraction of correctly classified queries in one episode over a cache of
// embeddings, indexed [class][image].
inline double run_episode(const std::vector<std::vector<BranchEmbedding>>& cache,
                          const Episode& ep, const EpisodeSpec& spec) {
  std::vector<BranchEmbedding> prototypes;
  for (int k = 0; k < spec.way; ++k) {
    std::vector<const BranchEmbedding*> support;
    for (int idx : ep.support[static_cast<std::size_t>(k)])
      support.push_back(&cache[static_cast<std::size_t>(ep.classes[static_cast<std::size_t>(k)])]
                              [static_cast<std::size_t>(idx)]);
    prototypes.push_back(compute_prototype(support));
  }
  int correct = 0, total = 0;
  for (int k = 0; k < spec.way; ++k)
    for (int idx : ep.query[static_cast<std::size_t>(k)]) {
      const auto& q = cache[static_cast<std::size_t>(ep.classes[static_cast<std::size_t>(k)])]
                           [static_cast<std::size_t>(idx)];
      if (predict_query(q, prototypes) == k) ++correct;
      ++total;
    }
  return static_cast<double>(correct) / static_cast<double>(total);
}

struct EvalSummary {
  double mean = 0.0;
  double ci95 = 0.0;
};

// Mean task accuracy with its 95 percent confidence interval, using the
// n-minus-one standard deviation. A single task has no spread to report.
inline EvalSummary summarize_accuracies(const std::vector<double>& acc) {
  detail::check(!acc.empty(), "summary: no task accuracies");
  EvalSummary s;
  for (double a : acc) s.mean += a;
  s.mean /= static_cast<double>(acc.size());
  if (acc.size() < 2) return s;
  double var = 0.0;
  for (double a : acc) var += (a - s.mean) * (a - s.mean);
  var /= static_cast<double>(acc.size() - 1);
  s.ci95 = 1.96 * std::sqrt(var) / std::sqrt(static_cast<double>(acc.size()));
  return s;
}

struct EvalConfig {
  EpisodeSpec episode;
  int tasks = 600;
  std::uint64_t seed = 1;
  bool deterministic = true;  // forces the task loop onto one thread
  int threads = 1;
};

struct EvalReport {
  double mean = 0.0;
  double ci95 = 0.0;
  int tasks = 0;
  EpisodeSpec episode;
};

// Embed every image of the split once, then score `tasks` episodes. Task t
// draws from its own generator, so the result is independent of threading.
template <typename R>
EvalReport evaluate(DcnModel<R>& model, const Dataset& ds, Split split, const EvalConfig& cfg) {
  cfg.episode.validate();
  detail::check(cfg.tasks >= 1, "evaluate: need at least one task");
  const auto class_indices = ds.indices_of(split);
  detail::check(static_cast<int>(class_indices.size()) >= cfg.episode.way,
                "evaluate: not enough classes in the split");

  std::vector<std::vector<BranchEmbedding>> cache;
  std::vector<int> images_per_class;
  for (int ci : class_indices) {
    const auto& cls = ds.classes[static_cast<std::size_t>(ci)];
    detail::check(static_cast<int>(cls.images.size()) >= cfg.episode.shot + cfg.episode.query,
                  "evaluate: class '" + cls.name + "' has too few images");
    std::vector<BranchEmbedding> embeddings;
    for (const auto& img : cls.images) embeddings.push_back(embed_image(model, img));
    cache.push_back(std::move(embeddings));
    images_per_class.push_back(static_cast<int>(cls.images.size()));
  }

  std::vector<double> acc(static_cast<std::size_t>(cfg.tasks), 0.0);
  auto run_task = [&](int t) {
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(t) + 1);
    const Episode ep = sample_episode(rng, images_per_class, cfg.episode);
    acc[static_cast<std::size_t>(t)] = run_episode(cache, ep, cfg.episode);
  };

  const int threads = cfg.deterministic ? 1 : std::max(1, cfg.threads);
  if (threads == 1) {
    for (int t = 0; t < cfg.tasks; ++t) run_task(t);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (int t = next.fetch_add(1); t < cfg.tasks; t = next.fetch_add(1)) run_task(t);
      });
    for (auto& th : pool) th.join();
  }

  const EvalSummary s = summarize_accuracies(acc);
  EvalReport report;
  report.mean = s.mean;
  report.ci95 = s.ci95;
  report.tasks = cfg.tasks;
  report.episode = cfg.episode;
  return report;
}

inline void write_eval_report(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) detail::io_fail(path.string(), "cannot open for writing");
  out << std::fixed << std::setprecision(6) << r.mean << '\t' << r.ci95 << '\t' << r.tasks
      << '\t' << r.episode.way << '\t' << r.episode.shot << '\t' << r.episode.query << '\n';
}

// Embedding spread per branch: how tightly classes cluster (mean pairwise
// distance inside a class) against how far apart they sit (mean pairwise
// centroid distance). All embeddings are L2 normalized first.
struct SpreadReport {
  double intra = 0.0;
  double inter = 0.0;
  std::vector<std::string> warnings;
};

inline SpreadReport embedding_spread(const std::vector<std::vector<std::vector<float>>>& by_class,
                                     const std::vector<std::string>& names) {
  detail::check(by_class.size() >= 2, "spread: need at least two classes");
  detail::check(by_class.size() == names.size(), "spread: one name per class");
  SpreadReport rep;
  std::vector<std::vector<double>> centroids;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    detail::check(!by_class[c].empty(), "spread: class without embeddings");
    std::vector<std::vector<double>> unit;
    for (const auto& e : by_class[c]) {
      double nrm = 0.0;
      for (float v : e) nrm += static_cast<double>(v) * v;
      nrm = std::sqrt(nrm);
      std::vector<double> u(e.size(), 0.0);
      if (nrm > 0.0)
        for (std::size_t i = 0; i < e.size(); ++i) u[i] = e[i] / nrm;
      unit.push_back(std::move(u));
    }
    std::vector<double> centroid(unit[0].size(), 0.0);
    for (const auto& u : unit)
      for (std::size_t i = 0; i < u.size(); ++i) centroid[i] += u[i] / static_cast<double>(unit.size());
    centroids.push_back(std::move(centroid));

    if (unit.size() < 2) {
      rep.warnings.push_back("class '" + names[c] + "' has a single embedding, intra distance 0");
      continue;
    }
    double sum = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < unit.size(); ++i)
      for (std::size_t j = i + 1; j < unit.size(); ++j) {
        double d = 0.0;
        for (std::size_t k = 0; k < unit[i].size(); ++k)
          d += (unit[i][k] - unit[j][k]) * (unit[i][k] - unit[j][k]);
        sum += std::sqrt(d);
        ++pairs;
      }
    rep.intra += sum / pairs;
  }
  rep.intra /= static_cast<double>(by_class.size());

  double sum = 0.0;
  int pairs = 0;
  for (std::size_t a = 0; a < centroids.size(); ++a)
    for (std::size_t b = a + 1; b < centroids.size(); ++b) {
      double d = 0.0;
      for (std::size_t k = 0; k < centroids[a].size(); ++k)
        d += (centroids[a][k] - centroids[b][k]) * (centroids[a][k] - centroids[b][k]);
      sum += std::sqrt(d);
      ++pairs;
    }
  rep.inter = sum / pairs;
  return rep;
}

// Spread of both branches over one split of a dataset.
template <typename R>
std::pair<SpreadReport, SpreadReport> model_spread(DcnModel<R>& model, const Dataset& ds,
                                                   Split split) {
  const auto class_indices = ds.indices_of(split);
  std::vector<std::vector<std::vector<float>>> ctx, det;
  std::vector<std::string> names;
  for (int ci : class_indices) {
    const auto& cls = ds.classes[static_cast<std::size_t>(ci)];
    std::vector<std::vector<float>> c_embeds, d_embeds;
    for (const auto& img : cls.images) {
      auto e = embed_image(model, img);
      c_embeds.push_back(std::move(e.context));
      d_embeds.push_back(std::move(e.detail));
    }
    ctx.push_back(std::move(c_embeds));
    det.push_back(std::move(d_embeds));
    names.push_back(cls.name);
  }
  return {embedding_spread(ctx, names), embedding_spread(det, names)};
}

inline void write_spread_report(const std::filesystem::path& path, const SpreadReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) detail::io_fail(path.string(), "cannot open for writing");
  out << std::fixed << std::setprecision(6) << r.intra << '\t' << r.inter << '\n';
}

// Channel-mean activation maps of the three stages for the first `count`
// images of a split: raw and min-max normalized, six tensor files per image.
template <typename R>
std::vector<std::filesystem::path> export_activation_maps(DcnModel<R>& model, const Dataset& ds,
                                                          Split split,
                                                          const std::filesystem::path& dir,
                                                          int count) {
  detail::check(count >= 1, "maps: count must be positive");
  std::filesystem::create_directories(dir);
  const auto class_indices = ds.indices_of(split);
  detail::check(!class_indices.empty(), "maps: split is empty");

  auto channel_mean_plain = [](const TensorT<R>& t) {
    const int h = t.dim(0), w = t.dim(1), c = t.dim(2);
    TensorF out({h, w, 1});
    for (int q = 0; q < h * w; ++q) {
      double s = 0.0;
      for (int ch = 0; ch < c; ++ch) s += t.values()[static_cast<std::size_t>(q) * c + ch];
      out.values()[static_cast<std::size_t>(q)] = static_cast<float>(s / c);
    }
    return out;
  };
  auto min_max = [](const TensorF& t) {
    TensorF out = t;
    float lo = t.values()[0], hi = t.values()[0];
    for (float v : t.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    for (auto& v : out.values()) v = hi > lo ? (v - lo) / (hi - lo) : 0.0f;
    return out;
  };

  std::vector<std::filesystem::path> written;
  int done = 0;
  for (int ci : class_indices) {
    const auto& cls = ds.classes[static_cast<std::size_t>(ci)];
    for (const auto& img : cls.images) {
      if (done >= count) return written;
      TapeT<R> tape;
      tape.set_recording(false);
      TensorT<R> x(img.shape(), std::vector<R>(img.values().begin(), img.values().end()));
      auto z = encode(tape, x, model.cfg.encoder, model.encoder);
      auto cond = condense(tape, z, model.condenser);
      auto z_d = smelt(tape, z, model.smelter);
      const std::string stem = "img_" + std::to_string(done);
      const std::pair<const char*, TensorT<R>*> stages[3] = {
          {"base", &z}, {"context", &cond.enhanced}, {"detail", &z_d}};
      for (auto& [tag, map] : stages) {
        TensorF mean = channel_mean_plain(*map);
        const auto raw_path = dir / (stem + "." + tag + ".dcnt");
        const auto norm_path = dir / (stem + "." + tag + ".norm.dcnt");
        save_tensor(raw_path, mean);
        save_tensor(norm_path, min_max(mean));
        written.push_back(raw_path);
        written.push_back(norm_path);
      }
      ++done;
    }
  }
  return written;
}

}  // namespace dcn
