#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "dcn/contrastive.hpp"
#include "test_util.hpp"

using dcn::AlignmentTriple;
using dcn::TapeD;
using dcn::TensorD;
using Catch::Approx;

namespace {

// Loss oracle written as the direct double loop over anchors and positives,
// no shared code with the tape op.
double supcon_ref(const std::vector<double>& s, int n, const std::vector<int>& labels,
                  double tau) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double denom = 0.0;
    for (int k = 0; k < n; ++k)
      if (k != i) denom += std::exp(s[static_cast<std::size_t>(i) * n + k] / tau);
    double row = 0.0;
    int positives = 0;
    for (int p = 0; p < n; ++p) {
      if (p == i || labels[static_cast<std::size_t>(p)] != labels[static_cast<std::size_t>(i)])
        continue;
      row += -std::log(std::exp(s[static_cast<std::size_t>(i) * n + p] / tau) / denom);
      ++positives;
    }
    total += row / positives;
  }
  return total;
}

AlignmentTriple<double> make_triple(const std::vector<double>& vals, int hw, int cbar) {
  AlignmentTriple<double> t;
  t.qkv = TensorD({hw, cbar}, vals);
  t.hw = hw;
  t.cbar = cbar;
  return t;
}

AlignmentTriple<double> random_triple(dcn::Rng& rng, int hw, int cbar) {
  AlignmentTriple<double> t;
  t.qkv = TensorD({hw, cbar});
  testutil::randomize(t.qkv, rng, 0.0, 1.0);  // projection outputs are nonnegative
  t.hw = hw;
  t.cbar = cbar;
  return t;
}

}  // namespace

TEST_CASE("one positive pair has zero contrastive loss", "[contrastive]") {
  TapeD tape;
  TensorD scores({2, 2}, {0.0, 0.37, 0.37, 0.0});
  auto loss = dcn::supcon_loss(tape, scores, {4, 4}, 0.1);
  REQUIRE(loss.value() == Approx(0.0).margin(1e-7));
}

TEST_CASE("four identical embeddings give four times log three", "[contrastive]") {
  // All pairwise scores coincide, so each anchor sees a uniform softmax over
  // three candidates and exactly one positive.
  TapeD tape;
  TensorD e({3}, {0.6, 0.0, 0.8});
  std::vector<TensorD> embeddings{e, e, e, e};
  auto loss = dcn::ccl_loss(tape, embeddings, {0, 0, 1, 1}, 0.1);
  REQUIRE(loss.value() == Approx(4.0 * std::log(3.0)).margin(1e-5));
}

TEST_CASE("contrastive core matches the double-loop oracle", "[contrastive]") {
  dcn::Rng rng = dcn::make_rng(71);
  const int n = 6;
  const std::vector<int> labels = {0, 1, 0, 2, 2, 1};
  for (int trial = 0; trial < 5; ++trial) {
    TensorD scores({n, n});
    testutil::randomize(scores, rng);
    TapeD tape;
    auto loss = dcn::supcon_loss(tape, scores, labels, 0.1);
    REQUIRE(loss.value() ==
            Approx(supcon_ref(testutil::to_doubles(scores), n, labels, 0.1)).margin(1e-9));
  }
}

TEST_CASE("contrastive core rejects malformed batches", "[contrastive]") {
  TapeD tape;
  TensorD scores({4, 4}, 0.1);
  REQUIRE_THROWS_AS(dcn::supcon_loss(tape, scores, {0, 0, 1, 2}, 0.1),
                    std::invalid_argument);  // two singleton classes
  REQUIRE_THROWS_AS(dcn::supcon_loss(tape, scores, {0, 0, 1, 1}, 0.0),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(dcn::supcon_loss(tape, scores, {0, 0, 1}, 0.1), std::invalid_argument);
  REQUIRE_THROWS_AS(dcn::supcon_loss(tape, TensorD({2, 3}, 0.1), {0, 0}, 0.1),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(dcn::supcon_loss(tape, TensorD({1, 1}, 0.1), {0}, 0.1),
                    std::invalid_argument);
}

TEST_CASE("contrastive loss is invariant to sample order and label names", "[contrastive]") {
  dcn::Rng rng = dcn::make_rng(72);
  const int n = 6;
  std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  std::vector<TensorD> embeddings;
  for (int i = 0; i < n; ++i) {
    TensorD e({4});
    testutil::randomize(e, rng);
    embeddings.push_back(e);
  }
  TapeD tape;
  const double base = dcn::ccl_loss(tape, embeddings, labels, 0.1).value();

  // Renaming classes changes nothing at all.
  REQUIRE(dcn::ccl_loss(tape, embeddings, {9, 9, 4, 4, 7, 7}, 0.1).value() == base);

  const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  std::vector<TensorD> pe;
  std::vector<int> pl;
  for (int i : perm) {
    pe.push_back(embeddings[static_cast<std::size_t>(i)]);
    pl.push_back(labels[static_cast<std::size_t>(i)]);
  }
  REQUIRE(dcn::ccl_loss(tape, pe, pl, 0.1).value() == Approx(base).margin(1e-12));

  // Rotating every embedding preserves all dot products.
  const double ang = 0.83;
  std::vector<TensorD> rot;
  for (const auto& e : embeddings) {
    TensorD r({4});
    r.values()[0] = std::cos(ang) * e.values()[0] - std::sin(ang) * e.values()[1];
    r.values()[1] = std::sin(ang) * e.values()[0] + std::cos(ang) * e.values()[1];
    r.values()[2] = e.values()[2];
    r.values()[3] = e.values()[3];
    rot.push_back(r);
  }
  REQUIRE(dcn::ccl_loss(tape, rot, labels, 0.1).value() == Approx(base).margin(1e-9));
}

TEST_CASE("contrastive core gradient matches finite differences", "[contrastive]") {
  dcn::Rng rng = dcn::make_rng(73);
  TensorD scores({4, 4});
  // Keep scores / tau of order one; a saturated softmax leaves gradients too
  // small for central differences to resolve.
  testutil::randomize(scores, rng, -0.1, 0.1);
  const std::vector<int> labels = {0, 1, 1, 0};
  auto fn = [&labels](TapeD& t, const std::vector<TensorD>& in) {
    return dcn::supcon_loss(t, in[0], labels, 0.1);
  };
  auto report = dcn::grad_check<double>(fn, {scores}, 1e-5, 1e-4);
  REQUIRE(report.passed);

  // The diagonal never participates, so its gradient is exactly zero.
  TapeD tape;
  TensorD tracked = scores.clone_detached();
  tracked.set_requires_grad(true);
  auto loss = dcn::supcon_loss(tape, tracked, labels, 0.1);
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) REQUIRE(tracked.grad()[static_cast<std::size_t>(i) * 4 + i] == 0.0);
}

TEST_CASE("alignment with single-position maps is plain cosine", "[contrastive]") {
  auto a = make_triple({0.5, 1.25, 0.25}, 1, 3);
  auto b = make_triple({1.0, 0.5, 2.0}, 1, 3);
  TapeD tape;
  auto d = dcn::aligned_similarity(tape, a, b);
  REQUIRE(d.value() ==
          Approx(testutil::cosine_ref({0.5, 1.25, 0.25}, {1.0, 0.5, 2.0})).margin(1e-12));
}

TEST_CASE("aligned values match a hand-rolled attention", "[contrastive]") {
  dcn::Rng rng = dcn::make_rng(74);
  auto a = random_triple(rng, 2, 3);
  auto b = random_triple(rng, 4, 3);
  TapeD tape;
  auto got = dcn::align_values(tape, a, b);
  REQUIRE(got.shape() == std::vector<int>{2, 3});

  const auto av = testutil::to_doubles(a.qkv);
  const auto bv = testutil::to_doubles(b.qkv);
  for (int r = 0; r < 2; ++r) {
    std::vector<double> row(4, 0.0);
    for (int j = 0; j < 4; ++j) {
      double dot = 0.0;
      for (int c = 0; c < 3; ++c)
        dot += av[static_cast<std::size_t>(r) * 3 + c] * bv[static_cast<std::size_t>(j) * 3 + c];
      row[static_cast<std::size_t>(j)] = dot / std::sqrt(3.0);
    }
    auto attn = testutil::softmax_ref(row);
    for (int c = 0; c < 3; ++c) {
      double want = 0.0;
      for (int j = 0; j < 4; ++j)
        want += attn[static_cast<std::size_t>(j)] * bv[static_cast<std::size_t>(j) * 3 + c];
      REQUIRE(got.values()[static_cast<std::size_t>(r) * 3 + c] == Approx(want).margin(1e-9));
    }
  }
}

TEST_CASE("aligned similarity is symmetric to the last bit", "[contrastive]") {
  dcn::Rng rng = dcn::make_rng(75);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_triple(rng, 3, 4);
    auto b = random_triple(rng, 5, 4);
    TapeD tape;
    auto ab = dcn::aligned_similarity(tape, a, b);
    auto ba = dcn::aligned_similarity(tape, b, a);
    REQUIRE(ab.value() == ba.value());
    REQUIRE(ab.value() >= -1.0);
    REQUIRE(ab.value() <= 1.0);
  }
}

TEST_CASE("identical detail maps reproduce the uniform-score closed form", "[contrastive]") {
  dcn::Rng rng = dcn::make_rng(76);
  auto t = random_triple(rng, 4, 3);
  std::vector<AlignmentTriple<double>> triples{t, t, t, t};
  TapeD tape;
  auto loss = dcn::dcl_loss(tape, triples, {0, 0, 1, 1}, 0.1);
  REQUIRE(loss.value() == Approx(4.0 * std::log(3.0)).margin(1e-5));
}

TEST_CASE("combined loss is context plus scaled detail", "[contrastive]") {
  dcn::Rng rng = dcn::make_rng(77);
  const std::vector<int> labels = {0, 0, 1, 1};
  std::vector<TensorD> embeddings;
  std::vector<AlignmentTriple<double>> triples;
  for (int i = 0; i < 4; ++i) {
    TensorD e({5});
    testutil::randomize(e, rng);
    TapeD scratch;
    embeddings.push_back(dcn::l2_normalize(scratch, e));
    triples.push_back(random_triple(rng, 3, 4));
  }
  TapeD tape;
  const double alpha = 0.7;
  const double combined = dcn::cl_loss(tape, embeddings, triples, labels, 0.1, 0.1, alpha).value();
  const double ccl = dcn::ccl_loss(tape, embeddings, labels, 0.1).value();
  const double dcl = dcn::dcl_loss(tape, triples, labels, 0.1).value();
  REQUIRE(combined == ccl + alpha * dcl);
}

TEST_CASE("both losses backpropagate correctly end to end", "[contrastive]") {
  dcn::Rng rng = dcn::make_rng(78);
  const std::vector<int> labels = {0, 1, 0, 1};

  SECTION("context loss through normalization and stacking") {
    std::vector<TensorD> raw;
    for (int i = 0; i < 4; ++i) {
      TensorD e({3});
      testutil::randomize(e, rng);
      raw.push_back(e);
    }
    auto fn = [&labels](TapeD& t, const std::vector<TensorD>& in) {
      std::vector<TensorD> unit;
      for (const auto& e : in) unit.push_back(dcn::l2_normalize(t, e));
      return dcn::ccl_loss(t, unit, labels, 0.1);
    };
    auto report = dcn::grad_check<double>(fn, raw, 1e-5, 1e-4);
    REQUIRE(report.passed);
  }

  SECTION("detail loss through alignment") {
    std::vector<TensorD> maps;
    for (int i = 0; i < 4; ++i) {
      TensorD m({3, 2});
      testutil::randomize(m, rng, 0.1, 1.0);
      maps.push_back(m);
    }
    auto fn = [&labels](TapeD& t, const std::vector<TensorD>& in) {
      std::vector<AlignmentTriple<double>> triples;
      for (const auto& m : in) {
        AlignmentTriple<double> tr;
        tr.qkv = m;
        tr.hw = m.dim(0);
        tr.cbar = m.dim(1);
        triples.push_back(tr);
      }
      return dcn::dcl_loss(t, triples, labels, 0.1);
    };
    auto report = dcn::grad_check<double>(fn, maps, 1e-5, 1e-4);
    REQUIRE(report.passed);
  }
}
