#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "dcn/tensor.hpp"
#include "test_util.hpp"

using dcn::GroupSpec;
using dcn::TapeD;
using dcn::TensorD;
using Catch::Approx;

TEST_CASE("conv2d 1x1 identity kernel passes channels through", "[tensor]") {
  TapeD tape;
  TensorD x({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  // w[ci][co] = identity over two channels
  TensorD w({1, 1, 2, 2}, {1, 0, 0, 1});
  TensorD b({2});
  auto y = dcn::conv2d(tape, x, w, b, 1, 0);
  REQUIRE(y.shape() == std::vector<int>{2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) REQUIRE(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d 3x3 delta kernel with padding reproduces the input", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(11);
  TapeD tape;
  TensorD x({4, 5, 1});
  testutil::randomize(x, rng);
  TensorD w({3, 3, 1, 1});
  w.values()[4] = 1.0;  // center tap
  TensorD b({1});
  auto y = dcn::conv2d(tape, x, w, b, 1, 1);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.values().size(); ++i)
    REQUIRE(y.values()[i] == Approx(x.values()[i]).margin(1e-12));
}

TEST_CASE("conv2d matches the loop-nest reference on random inputs", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(12);
  for (int stride : {1, 2}) {
    for (int k : {1, 3}) {
      const int pad = (k == 3) ? 1 : 0;
      TapeD tape;
      TensorD x({5, 6, 3});
      TensorD w({k, k, 3, 4});
      TensorD b({4});
      testutil::randomize(x, rng);
      testutil::randomize(w, rng);
      testutil::randomize(b, rng);
      auto y = dcn::conv2d(tape, x, w, b, stride, pad);
      int ho = 0, wo = 0;
      auto ref = testutil::conv2d_ref(testutil::to_doubles(x), 5, 6, 3, testutil::to_doubles(w),
                                      k, testutil::to_doubles(b), 4, stride, pad, ho, wo);
      REQUIRE(y.shape() == std::vector<int>{ho, wo, 4});
      for (std::size_t i = 0; i < ref.size(); ++i)
        REQUIRE(y.values()[i] == Approx(ref[i]).margin(1e-6));
    }
  }
}

TEST_CASE("conv2d stride 1 with pad (k-1)/2 preserves spatial dims", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(13);
  TapeD tape;
  TensorD x({6, 4, 2});
  TensorD w({3, 3, 2, 5});
  TensorD b({5});
  testutil::randomize(x, rng);
  testutil::randomize(w, rng);
  auto y = dcn::conv2d(tape, x, w, b, 1, 1);
  REQUIRE(y.dim(0) == 6);
  REQUIRE(y.dim(1) == 4);
  REQUIRE(y.dim(2) == 5);
}

TEST_CASE("conv2d rejects bad arguments", "[tensor]") {
  TapeD tape;
  TensorD x({4, 4, 2});
  TensorD w({3, 3, 3, 4});  // channel mismatch
  TensorD b({4});
  REQUIRE_THROWS_AS(dcn::conv2d(tape, x, w, b, 1, 1), std::invalid_argument);
  TensorD w2({3, 3, 2, 4});
  TensorD b2({3});  // bias length mismatch
  REQUIRE_THROWS_AS(dcn::conv2d(tape, x, w2, b2, 1, 1), std::invalid_argument);
  TensorD tiny({1, 1, 2});  // 3x3 without padding cannot produce output
  REQUIRE_THROWS_AS(dcn::conv2d(tape, tiny, w2, b, 1, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(dcn::conv2d(tape, x, w2, b, 3, 1), std::invalid_argument);
}

TEST_CASE("softmax of equal scores is uniform", "[tensor]") {
  TapeD tape;
  TensorD x({4}, {0.0, 0.0, 0.0, 0.0});
  auto y = dcn::softmax(tape, x, GroupSpec{1, 4, 1});
  for (double v : y.values()) REQUIRE(v == Approx(0.25).margin(1e-15));
}

TEST_CASE("softmax of [0, ln 2] is [1/3, 2/3]", "[tensor]") {
  TapeD tape;
  TensorD x({2}, {0.0, std::log(2.0)});
  auto y = dcn::softmax(tape, x, GroupSpec{1, 2, 1});
  REQUIRE(y.values()[0] == Approx(1.0 / 3.0).margin(1e-12));
  REQUIRE(y.values()[1] == Approx(2.0 / 3.0).margin(1e-12));
}

TEST_CASE("softmax stays finite for large scores", "[tensor]") {
  TapeD tape;
  TensorD x({2}, {1000.0, 1001.0});
  auto y = dcn::softmax(tape, x, GroupSpec{1, 2, 1});
  auto ref = testutil::softmax_ref({1000.0, 1001.0});
  REQUIRE(std::isfinite(y.values()[0]));
  REQUIRE(y.values()[0] == Approx(ref[0]).margin(1e-12));
  REQUIRE(y.values()[1] == Approx(ref[1]).margin(1e-12));
}

TEST_CASE("softmax groups each sum to one and shifting scores changes nothing", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(21);
  TapeD tape;
  TensorD x({3, 5});
  testutil::randomize(x, rng, -3.0, 3.0);
  auto y = dcn::softmax(tape, x, GroupSpec{3, 5, 1});
  for (int r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int c = 0; c < 5; ++c) s += y.values()[static_cast<std::size_t>(r) * 5 + c];
    REQUIRE(s == Approx(1.0).margin(1e-12));
  }
  TensorD shifted = x.clone_detached();
  for (auto& v : shifted.values()) v += 7.25;
  auto y2 = dcn::softmax(tape, shifted, GroupSpec{3, 5, 1});
  for (std::size_t i = 0; i < y.values().size(); ++i)
    REQUIRE(y2.values()[i] == Approx(y.values()[i]).margin(1e-12));
}

TEST_CASE("softmax rejects an empty group", "[tensor]") {
  TapeD tape;
  TensorD x({4});
  REQUIRE_THROWS_AS(dcn::softmax(tape, x, GroupSpec{4, 0, 1}), std::invalid_argument);
  REQUIRE_THROWS_AS(dcn::softmax(tape, x, GroupSpec{1, 3, 1}), std::invalid_argument);
}

TEST_CASE("layer_norm maps a constant group to zeros", "[tensor]") {
  TapeD tape;
  TensorD x({5}, {2.5, 2.5, 2.5, 2.5, 2.5});
  auto y = dcn::layer_norm(tape, x, GroupSpec{1, 5, 1});
  for (double v : y.values()) REQUIRE(v == Approx(0.0).margin(1e-12));
}

TEST_CASE("layer_norm of [-1, 1] with tiny eps returns [-1, 1]", "[tensor]") {
  TapeD tape;
  TensorD x({2}, {-1.0, 1.0});
  auto y = dcn::layer_norm(tape, x, GroupSpec{1, 2, 1}, 1e-12);
  REQUIRE(y.values()[0] == Approx(-1.0).margin(1e-5));
  REQUIRE(y.values()[1] == Approx(1.0).margin(1e-5));
}

TEST_CASE("layer_norm matches the two-pass reference", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(22);
  TapeD tape;
  TensorD x({3, 3});
  testutil::randomize(x, rng, -2.0, 2.0);
  auto y = dcn::layer_norm(tape, x, GroupSpec{1, 9, 1});
  auto ref = testutil::layer_norm_ref(testutil::to_doubles(x), 1e-5);
  for (std::size_t i = 0; i < ref.size(); ++i)
    REQUIRE(y.values()[i] == Approx(ref[i]).margin(1e-6));
}

TEST_CASE("layer_norm with inner stride normalizes each channel plane", "[tensor]") {
  // {2, 2, 2} map: channel planes are strided; normalize each over its 4 positions.
  TapeD tape;
  TensorD x({2, 2, 2}, {1, 10, 2, 20, 3, 30, 4, 40});
  auto y = dcn::layer_norm(tape, x, GroupSpec{1, 4, 2});
  std::vector<double> p0 = {1, 2, 3, 4}, p1 = {10, 20, 30, 40};
  auto r0 = testutil::layer_norm_ref(p0, 1e-5);
  auto r1 = testutil::layer_norm_ref(p1, 1e-5);
  for (int p = 0; p < 4; ++p) {
    REQUIRE(y.values()[static_cast<std::size_t>(p) * 2] == Approx(r0[static_cast<std::size_t>(p)]).margin(1e-9));
    REQUIRE(y.values()[static_cast<std::size_t>(p) * 2 + 1] == Approx(r1[static_cast<std::size_t>(p)]).margin(1e-9));
  }
}

TEST_CASE("relu and sigmoid table values", "[tensor]") {
  TapeD tape;
  TensorD x({3}, {-1.0, 0.0, 2.0});
  auto r = dcn::relu(tape, x);
  REQUIRE(r.values() == std::vector<double>{0.0, 0.0, 2.0});
  TensorD z({1}, {0.0});
  REQUIRE(dcn::sigmoid(tape, z).values()[0] == 0.5);
  TensorD big({2}, {50.0, -50.0});
  auto s = dcn::sigmoid(tape, big);
  REQUIRE(s.values()[0] == Approx(1.0).margin(1e-6));
  REQUIRE(s.values()[1] == Approx(0.0).margin(1e-6));
  REQUIRE(std::isfinite(s.values()[0]));
  REQUIRE(std::isfinite(s.values()[1]));
}

TEST_CASE("global_avg_pool of a constant map is that constant", "[tensor]") {
  TapeD tape;
  TensorD x({3, 4, 2}, 1.75);
  auto y = dcn::global_avg_pool(tape, x);
  REQUIRE(y.shape() == std::vector<int>{1, 1, 2});
  REQUIRE(y.values()[0] == Approx(1.75).margin(1e-12));
  REQUIRE(y.values()[1] == Approx(1.75).margin(1e-12));
}

TEST_CASE("upsample_nearest 2x2 -> 4x4 repeats each entry", "[tensor]") {
  TapeD tape;
  TensorD x({2, 2, 1}, {1, 2, 3, 4});
  auto y = dcn::upsample_nearest(tape, x, 4, 4);
  const std::vector<double> want = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  REQUIRE(y.values() == want);
}

TEST_CASE("upsample_nearest 2x2 -> 3x3 uses the floor mapping", "[tensor]") {
  TapeD tape;
  TensorD x({2, 2, 1}, {1, 2, 3, 4});
  auto y = dcn::upsample_nearest(tape, x, 3, 3);
  // src index = floor(dst * 2 / 3): rows/cols map 0,0,1
  const std::vector<double> want = {1, 1, 2, 1, 1, 2, 3, 3, 4};
  REQUIRE(y.values() == want);
}

TEST_CASE("upsample_nearest rejects shrinking", "[tensor]") {
  TapeD tape;
  TensorD x({4, 4, 1});
  REQUIRE_THROWS_AS(dcn::upsample_nearest(tape, x, 2, 4), std::invalid_argument);
}

TEST_CASE("max_pool2x2 picks window maxima", "[tensor]") {
  TapeD tape;
  TensorD x({2, 4, 1}, {1, 5, 2, 0, 3, -1, 7, 4});
  auto y = dcn::max_pool2x2(tape, x);
  REQUIRE(y.shape() == std::vector<int>{1, 2, 1});
  REQUIRE(y.values() == std::vector<double>{5, 7});
  TensorD odd({3, 4, 1});
  REQUIRE_THROWS_AS(dcn::max_pool2x2(tape, odd), std::invalid_argument);
}

TEST_CASE("matmul identity and hand case", "[tensor]") {
  TapeD tape;
  TensorD a({2, 2}, {1, 2, 3, 4});
  TensorD eye({2, 2}, {1, 0, 0, 1});
  auto y = dcn::matmul(tape, a, eye);
  REQUIRE(y.values() == a.values());
  TensorD v({2, 1}, {0, 1});
  auto z = dcn::matmul(tape, a, v);
  REQUIRE(z.values() == std::vector<double>{2, 4});
}

TEST_CASE("matmul matches the triple-loop reference", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(23);
  TapeD tape;
  TensorD a({4, 5});
  TensorD b({5, 3});
  testutil::randomize(a, rng);
  testutil::randomize(b, rng);
  auto y = dcn::matmul(tape, a, b);
  auto ref = testutil::matmul_ref(testutil::to_doubles(a), 4, 5, testutil::to_doubles(b), 3);
  for (std::size_t i = 0; i < ref.size(); ++i)
    REQUIRE(y.values()[i] == Approx(ref[i]).margin(1e-9));
  TensorD bad({4, 3});
  REQUIRE_THROWS_AS(dcn::matmul(tape, a, bad), std::invalid_argument);
}

TEST_CASE("l2_normalize table and properties", "[tensor]") {
  TapeD tape;
  TensorD x({2}, {3.0, 4.0});
  auto y = dcn::l2_normalize(tape, x);
  REQUIRE(y.values()[0] == Approx(0.6).margin(1e-12));
  REQUIRE(y.values()[1] == Approx(0.8).margin(1e-12));

  TensorD zero({4});
  auto z = dcn::l2_normalize(tape, zero);
  for (double v : z.values()) REQUIRE(v == 0.0);

  dcn::Rng rng = dcn::make_rng(24);
  TensorD r({128});
  testutil::randomize(r, rng);
  auto n = dcn::l2_normalize(tape, r);
  double sq = 0.0;
  for (double v : n.values()) sq += v * v;
  REQUIRE(std::sqrt(sq) == Approx(1.0).margin(1e-6));
}

TEST_CASE("backward of sum gives ones", "[tensor]") {
  TapeD tape;
  TensorD x({2, 3});
  x.set_requires_grad(true);
  auto s = dcn::sum_all(tape, x);
  tape.backward(s);
  for (double g : x.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("backward of sum(x*x)/2 gives x", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(25);
  TapeD tape;
  TensorD x({7});
  testutil::randomize(x, rng);
  x.set_requires_grad(true);
  auto y = dcn::scale(tape, dcn::sum_all(tape, dcn::mul(tape, x, x)), 0.5);
  tape.backward(y);
  for (std::size_t i = 0; i < 7; ++i)
    REQUIRE(x.grad()[i] == Approx(x.values()[i]).margin(1e-12));
}

TEST_CASE("gradients accumulate additively across reuse", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(26);
  TensorD x0({5});
  testutil::randomize(x0, rng);

  // f = sum(x) + sum(x * x); reuse of x must add the two contributions.
  TapeD tape;
  TensorD x = x0.clone_detached();
  x.set_requires_grad(true);
  auto f = dcn::add(tape, dcn::sum_all(tape, x), dcn::sum_all(tape, dcn::mul(tape, x, x)));
  tape.backward(f);
  for (std::size_t i = 0; i < 5; ++i)
    REQUIRE(x.grad()[i] == Approx(1.0 + 2.0 * x.values()[i]).margin(1e-12));
}

TEST_CASE("tensors off the loss path keep zero gradients", "[tensor]") {
  TapeD tape;
  TensorD x({3}, {1, 2, 3});
  TensorD unused({3}, {4, 5, 6});
  x.set_requires_grad(true);
  unused.set_requires_grad(true);
  auto s = dcn::sum_all(tape, x);
  tape.backward(s);
  for (double g : unused.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss", "[tensor]") {
  TapeD tape;
  TensorD x({2}, {1, 2});
  x.set_requires_grad(true);
  auto y = dcn::mul(tape, x, x);
  REQUIRE_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("grad_check validates sigmoid-sum tightly", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(27);
  TensorD x({2, 3});
  testutil::randomize(x, rng, -2.0, 2.0);
  auto report = dcn::grad_check<double>(
      [](dcn::TapeD& t, const std::vector<TensorD>& in) {
        return dcn::sum_all(t, dcn::sigmoid(t, in[0]));
      },
      {x}, 1e-5, 1e-6);
  REQUIRE(report.passed);
  REQUIRE(report.max_rel_err < 1e-6);
}

TEST_CASE("grad_check validates a conv-sum", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(28);
  TensorD x({4, 4, 2});
  TensorD w({3, 3, 2, 3});
  TensorD b({3});
  testutil::randomize(x, rng);
  testutil::randomize(w, rng);
  testutil::randomize(b, rng);
  auto report = dcn::grad_check<double>(
      [](dcn::TapeD& t, const std::vector<TensorD>& in) {
        auto y = dcn::conv2d(t, in[0], in[1], in[2], 1, 1);
        return dcn::sum_all(t, dcn::mul(t, y, y));
      },
      {x, w, b}, 1e-5, 1e-5);
  REQUIRE(report.passed);
}

TEST_CASE("grad_check reports zero error for a constant function", "[tensor]") {
  TensorD x({3}, {1, 2, 3});
  auto report = dcn::grad_check<double>(
      [](dcn::TapeD& t, const std::vector<TensorD>& in) {
        return dcn::scale(t, dcn::sum_all(t, in[0]), 0.0);
      },
      {x}, 1e-5, 1e-6);
  REQUIRE(report.passed);
  REQUIRE(report.max_rel_err == 0.0);
}

TEST_CASE("grad_check covers the remaining differentiable ops", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(29);

  SECTION("softmax and layer_norm") {
    TensorD x({2, 4});
    testutil::randomize(x, rng, -2.0, 2.0);
    TensorD probe({2, 4});
    testutil::randomize(probe, rng);
    auto fn = [&probe](dcn::TapeD& t, const std::vector<TensorD>& in) {
      auto sm = dcn::softmax(t, in[0], GroupSpec{2, 4, 1});
      auto ln = dcn::layer_norm(t, sm, GroupSpec{1, 4, 2});
      return dcn::sum_all(t, dcn::mul(t, ln, probe));
    };
    auto report = dcn::grad_check<double>(fn, {x}, 1e-5, 1e-5);
    REQUIRE(report.passed);
  }

  SECTION("pooling, upsampling and broadcast products") {
    TensorD x({4, 4, 3});
    TensorD gate({2, 2, 1});
    testutil::randomize_kink_safe(x, rng);
    testutil::randomize(gate, rng, 0.25, 1.0);
    auto fn = [](dcn::TapeD& t, const std::vector<TensorD>& in) {
      auto pooled = dcn::max_pool2x2(t, in[0]);          // {2,2,3}
      auto gated = dcn::mul_broadcast_spatial(t, in[1], pooled);
      auto up = dcn::upsample_nearest(t, gated, 3, 3);
      auto avg = dcn::global_avg_pool(t, up);            // {1,1,3}
      auto sp = dcn::channel_mean(t, gated);             // {2,2,1}
      auto outer = dcn::outer_spatial_channel(t, sp, avg);
      return dcn::sum_all(t, dcn::mul(t, outer, outer));
    };
    auto report = dcn::grad_check<double>(fn, {x, gate}, 1e-5, 1e-4);
    REQUIRE(report.passed);
  }

  SECTION("matmul, linear, stacking and cosine") {
    TensorD a({3, 4});
    TensorD w({2, 4});
    TensorD b({2});
    TensorD v({4});
    TensorD probe({3, 3});
    testutil::randomize(a, rng);
    testutil::randomize(w, rng);
    testutil::randomize(b, rng);
    testutil::randomize(v, rng);
    testutil::randomize(probe, rng);
    auto fn = [&probe](dcn::TapeD& t, const std::vector<TensorD>& in) {
      auto prod = dcn::matmul(t, in[0], dcn::transpose2d(t, in[0]));  // {3,3}
      auto lin = dcn::linear(t, in[1], in[3], in[2]);                 // {2}
      auto rows = dcn::stack_rows(t, {lin, lin, lin});                // {3,2}
      auto plus = dcn::add_row_broadcast(t, rows, in[2]);
      auto cs = dcn::cosine_flat(t, prod, probe);
      auto n = dcn::l2_normalize(t, plus);
      return dcn::add(t, dcn::sum_all(t, n), cs);
    };
    auto report = dcn::grad_check<double>(fn, {a, w, b, v}, 1e-5, 1e-4);
    REQUIRE(report.passed);
  }

  SECTION("pack_symmetric routes pair gradients to both mirror slots") {
    TensorD s1 = TensorD::scalar(0.3);
    TensorD s2 = TensorD::scalar(-0.7);
    TensorD s3 = TensorD::scalar(0.1);
    TensorD probe({3, 3});
    testutil::randomize(probe, rng);
    auto fn = [&probe](dcn::TapeD& t, const std::vector<TensorD>& in) {
      auto m = dcn::pack_symmetric(t, {in[0], in[1], in[2]}, 3);
      return dcn::sum_all(t, dcn::mul(t, m, probe));
    };
    auto report = dcn::grad_check<double>(fn, {s1, s2, s3}, 1e-5, 1e-6);
    REQUIRE(report.passed);
  }
}

TEST_CASE("forward ops keep finite values on finite inputs", "[tensor]") {
  dcn::Rng rng = dcn::make_rng(30);
  TapeD tape;
  tape.set_recording(false);
  TensorD x({6, 6, 4});
  testutil::randomize(x, rng, -5.0, 5.0);
  TensorD w({3, 3, 4, 4});
  TensorD b({4});
  testutil::randomize(w, rng);
  auto y = dcn::conv2d(tape, x, w, b, 2, 1);
  auto s = dcn::softmax(tape, y, GroupSpec{1, y.numel(), 1});
  auto n = dcn::layer_norm(tape, y, GroupSpec{1, y.numel(), 1});
  for (double v : y.values()) REQUIRE(std::isfinite(v));
  for (double v : s.values()) REQUIRE(std::isfinite(v));
  for (double v : n.values()) REQUIRE(std::isfinite(v));
}

TEST_CASE("tape with recording disabled tracks nothing", "[tensor]") {
  TapeD tape;
  tape.set_recording(false);
  TensorD x({3}, {1, 2, 3});
  x.set_requires_grad(true);
  auto y = dcn::mul(tape, x, x);
  REQUIRE_FALSE(y.tracked());
  REQUIRE(tape.size() == 0);
}
