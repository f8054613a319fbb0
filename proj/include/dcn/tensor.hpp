#pragma once

// Dense row-major tensors with reverse-mode autodiff. Operations append a
// backward closure to an explicit tape; replaying the tape in reverse visits
// each node exactly once and accumulates gradients additively. Everything is
// templated on the scalar type: the training path instantiates float, the
// gradient checker double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcn {

template <typename R>
class TensorT {
 public:
  TensorT() : shape_{}, data_(std::make_shared<std::vector<R>>(1, R(0))) {}

  explicit TensorT(std::vector<int> shape, R fill = R(0))
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<R>>(checked_numel(shape_), fill)) {}

  TensorT(std::vector<int> shape, std::vector<R> values) : shape_(std::move(shape)) {
    if (static_cast<std::int64_t>(values.size()) != checked_numel(shape_)) {
      throw std::invalid_argument("Tensor: value count does not match shape");
    }
    data_ = std::make_shared<std::vector<R>>(std::move(values));
  }

  static TensorT scalar(R v) { return TensorT({}, std::vector<R>{v}); }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }

  std::vector<R>& values() { return *data_; }
  const std::vector<R>& values() const { return *data_; }
  R value() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::value: tensor is not scalar");
    return (*data_)[0];
  }

  bool requires_grad() const { return requires_grad_; }
  bool tracked() const { return grad_ != nullptr; }

  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on && !grad_) grad_ = std::make_shared<std::vector<R>>(data_->size(), R(0));
    if (!on) grad_.reset();
  }

  std::vector<R>& grad() {
    if (!grad_) throw std::runtime_error("Tensor::grad: gradient not tracked");
    return *grad_;
  }
  const std::vector<R>& grad() const {
    if (!grad_) throw std::runtime_error("Tensor::grad: gradient not tracked");
    return *grad_;
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), R(0));
  }

  // Fresh storage, no gradient tracking; used by the finite-difference checker.
  TensorT clone_detached() const { return TensorT(shape_, *data_); }

  std::shared_ptr<std::vector<R>> data_ptr() const { return data_; }
  std::shared_ptr<std::vector<R>> grad_ptr() const { return grad_; }

  // Internal: mark an op output as gradient-carrying.
  void track_for_tape() {
    requires_grad_ = true;
    if (!grad_) grad_ = std::make_shared<std::vector<R>>(data_->size(), R(0));
  }

 private:
  static std::int64_t checked_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<R>> data_;
  std::shared_ptr<std::vector<R>> grad_;
  bool requires_grad_ = false;
};

template <typename R>
class TapeT {
 public:
  void record(std::function<void()> node) { nodes_.push_back(std::move(node)); }

  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays recorded nodes newest-first. Only a
  // scalar loss is accepted; gradients land in the tracked leaves.
  void backward(TensorT<R>& loss) {
    if (loss.numel() != 1) {
      throw std::invalid_argument("Tape::backward: loss must be scalar");
    }
    if (!loss.tracked()) return;
    loss.grad()[0] += R(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
};

namespace detail {

template <typename R>
bool any_tracked(std::initializer_list<const TensorT<R>*> ts) {
  for (const auto* t : ts) {
    if (t->tracked()) return true;
  }
  return false;
}

template <typename R>
bool start_node(TapeT<R>& tape, std::initializer_list<const TensorT<R>*> ins, TensorT<R>& out) {
  if (!tape.recording() || !any_tracked<R>(ins)) return false;
  out.track_for_tape();
  return true;
}

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace detail

// Normalization groups: the tensor is viewed as [outer][group][inner] with
// flat index (o * group + g) * inner + i; statistics run over the group axis
// for every (outer, inner) pair. inner > 1 expresses strided groups such as
// per-channel planes of an h x w x c map.
struct GroupSpec {
  std::int64_t outer = 1;
  std::int64_t group = 1;
  std::int64_t inner = 1;
};

namespace detail {

template <typename R>
void check_group_spec(const TensorT<R>& t, const GroupSpec& spec, const char* op) {
  check(spec.group >= 1, std::string(op) + ": empty normalization group");
  check(spec.outer >= 1 && spec.inner >= 1, std::string(op) + ": bad group spec");
  check(spec.outer * spec.group * spec.inner == t.numel(),
        std::string(op) + ": group spec does not cover the tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename R>
TensorT<R> add(TapeT<R>& tape, const TensorT<R>& a, const TensorT<R>& b) {
  detail::check(a.shape() == b.shape(), "add: shape mismatch");
  TensorT<R> out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (detail::start_node(tape, {&a, &b}, out)) {
    tape.record([ag = a.grad_ptr(), bg = b.grad_ptr(), og = out.grad_ptr()] {
      for (std::size_t i = 0; i < og->size(); ++i) {
        if (ag) (*ag)[i] += (*og)[i];
        if (bg) (*bg)[i] += (*og)[i];
      }
    });
  }
  return out;
}

template <typename R>
TensorT<R> sub(TapeT<R>& tape, const TensorT<R>& a, const TensorT<R>& b) {
  detail::check(a.shape() == b.shape(), "sub: shape mismatch");
  TensorT<R> out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (detail::start_node(tape, {&a, &b}, out)) {
    tape.record([ag = a.grad_ptr(), bg = b.grad_ptr(), og = out.grad_ptr()] {
      for (std::size_t i = 0; i < og->size(); ++i) {
        if (ag) (*ag)[i] += (*og)[i];
        if (bg) (*bg)[i] -= (*og)[i];
      }
    });
  }
  return out;
}

template <typename R>
TensorT<R> mul(TapeT<R>& tape, const TensorT<R>& a, const TensorT<R>& b) {
  detail::check(a.shape() == b.shape(), "mul: shape mismatch");
  TensorT<R> out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (detail::start_node(tape, {&a, &b}, out)) {
    tape.record([ad = a.data_ptr(), bd = b.data_ptr(), ag = a.grad_ptr(), bg = b.grad_ptr(),
                 og = out.grad_ptr()] {
      for (std::size_t i = 0; i < og->size(); ++i) {
        if (ag) (*ag)[i] += (*bd)[i] * (*og)[i];
        if (bg) (*bg)[i] += (*ad)[i] * (*og)[i];
      }
    });
  }
  return out;
}

template <typename R>
TensorT<R> scale(TapeT<R>& tape, const TensorT<R>& a, R c) {
  TensorT<R> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (detail::start_node(tape, {&a}, out)) {
    tape.record([c, ag = a.grad_ptr(), og = out.grad_ptr()] {
      for (std::size_t i = 0; i < og->size(); ++i) (*ag)[i] += c * (*og)[i];
    });
  }
  return out;
}

template <typename R>
TensorT<R> reshape(TapeT<R>& tape, const TensorT<R>& a, std::vector<int> shape) {
  TensorT<R> out(std::move(shape), a.values());
  detail::check(out.numel() == a.numel(), "reshape: element count mismatch");
  if (detail::start_node(tape, {&a}, out)) {
    tape.record([ag = a.grad_ptr(), og = out.grad_ptr()] {
      for (std::size_t i = 0; i < og->size(); ++i) (*ag)[i] += (*og)[i];
    });
  }
  return out;
}

template <typename R>
TensorT<R> transpose2d(TapeT<R>& tape, const TensorT<R>& a) {
  detail::check(a.ndim() == 2, "transpose2d: expects a matrix");
  const int m = a.dim(0), n = a.dim(1);
  TensorT<R> out({n, m});
  const auto& av = a.values();
  auto& ov = out.values();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) ov[static_cast<std::size_t>(c) * m + r] = av[static_cast<std::size_t>(r) * n + c];
  if (detail::start_node(tape, {&a}, out)) {
    tape.record([m, n, ag = a.grad_ptr(), og = out.grad_ptr()] {
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c)
          (*ag)[static_cast<std::size_t>(r) * n + c] += (*og)[static_cast<std::size_t>(c) * m + r];
    });
  }
  return out;
}

template <typename R>
TensorT<R> relu(TapeT<R>& tape, const TensorT<R>& a) {
  TensorT<R> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > R(0) ? av[i] : R(0);
  if (detail::start_node(tape, {&a}, out)) {
    tape.record([ad = a.data_ptr(), ag = a.grad_ptr(), og = out.grad_ptr()] {
      for (std::size_t i = 0; i < og->size(); ++i)
        if ((*ad)[i] > R(0)) (*ag)[i] += (*og)[i];
    });
  }
  return out;
}

template <typename R>
TensorT<R> sigmoid(TapeT<R>& tape, const TensorT<R>& a) {
  TensorT<R> out(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const R x = av[i];
    if (x >= R(0)) {
      ov[i] = R(1) / (R(1) + std::exp(-x));
    } else {
      const R e = std::exp(x);
      ov[i] = e / (R(1) + e);
    }
  }
  if (detail::start_node(tape, {&a}, out)) {
    tape.record([od = out.data_ptr(), ag = a.grad_ptr(), og = out.grad_ptr()] {
      for (std::size_t i = 0; i < og->size(); ++i) {
        const R y = (*od)[i];
        (*ag)[i] += y * (R(1) - y) * (*og)[i];
      }
    });
  }
  return out;
}

template <typename R>
TensorT<R> sum_all(TapeT<R>& tape, const TensorT<R>& a) {
  TensorT<R> out = TensorT<R>::scalar(R(0));
  const auto& av = a.values();
  R s = R(0);
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  out.values()[0] = s;
  if (detail::start_node(tape, {&a}, out)) {
    tape.record([ag = a.grad_ptr(), og = out.grad_ptr()] {
      const R g = (*og)[0];
      for (std::size_t i = 0; i < ag->size(); ++i) (*ag)[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename R>
TensorT<R> matmul(TapeT<R>& tape, const TensorT<R>& a, const TensorT<R>& b) {
  detail::check(a.ndim() == 2 && b.ndim() == 2, "matmul: expects matrices");
  detail::check(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<R> out({m, n});
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (int r = 0; r < m; ++r) {
    R* orow = &ov[static_cast<std::size_t>(r) * n];
    for (int t = 0; t < k; ++t) {
      const R arv = av[static_cast<std::size_t>(r) * k + t];
      const R* brow = &bv[static_cast<std::size_t>(t) * n];
      for (int c = 0; c < n; ++c) orow[c] += arv * brow[c];
    }
  }
  if (detail::start_node(tape, {&a, &b}, out)) {
    tape.record([m, k, n, ad = a.data_ptr(), bd = b.data_ptr(), ag = a.grad_ptr(),
                 bg = b.grad_ptr(), og = out.grad_ptr()] {
      for (int r = 0; r < m; ++r) {
        const R* grow = &(*og)[static_cast<std::size_t>(r) * n];
        for (int t = 0; t < k; ++t) {
          const R* brow = &(*bd)[static_cast<std::size_t>(t) * n];
          if (ag) {
            R acc = R(0);
            for (int c = 0; c < n; ++c) acc += grow[c] * brow[c];
            (*ag)[static_cast<std::size_t>(r) * k + t] += acc;
          }
          if (bg) {
            const R arv = (*ad)[static_cast<std::size_t>(r) * k + t];
            R* bgrow = &(*bg)[static_cast<std::size_t>(t) * n];
            for (int c = 0; c < n; ++c) bgrow[c] += arv * grow[c];
          }
        }
      }
    });
  }
  return out;
}

// y = W x + b with x flattened; W is {out, in}, b is {out}.
template <typename R>
TensorT<R> linear(TapeT<R>& tape, const TensorT<R>& w, const TensorT<R>& x, const TensorT<R>& b) {
  detail::check(w.ndim() == 2, "linear: weight must be a matrix");
  const int o = w.dim(0), in = w.dim(1);
  detail::check(x.numel() == in, "linear: input length does not match weight");
  detail::check(b.ndim() == 1 && b.dim(0) == o, "linear: bias length does not match weight");
  TensorT<R> out({o});
  const auto& wv = w.values();
  const auto& xv = x.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (int r = 0; r < o; ++r) {
    R acc = bv[static_cast<std::size_t>(r)];
    const R* wrow = &wv[static_cast<std::size_t>(r) * in];
    for (int c = 0; c < in; ++c) acc += wrow[c] * xv[static_cast<std::size_t>(c)];
    ov[static_cast<std::size_t>(r)] = acc;
  }
  if (detail::start_node(tape, {&w, &x, &b}, out)) {
    tape.record([o, in, wd = w.data_ptr(), xd = x.data_ptr(), wg = w.grad_ptr(),
                 xg = x.grad_ptr(), bg = b.grad_ptr(), og = out.grad_ptr()] {
      for (int r = 0; r < o; ++r) {
        const R g = (*og)[static_cast<std::size_t>(r)];
        if (bg) (*bg)[static_cast<std::size_t>(r)] += g;
        for (int c = 0; c < in; ++c) {
          const std::size_t wi = static_cast<std::size_t>(r) * in + c;
          if (wg) (*wg)[wi] += g * (*xd)[static_cast<std::size_t>(c)];
          if (xg) (*xg)[static_cast<std::size_t>(c)] += g * (*wd)[wi];
        }
      }
    });
  }
  return out;
}

// Adds a length-n row vector to every row of an {m, n} matrix.
template <typename R>
TensorT<R> add_row_broadcast(TapeT<R>& tape, const TensorT<R>& m, const TensorT<R>& v) {
  detail::check(m.ndim() == 2, "add_row_broadcast: expects a matrix");
  detail::check(v.numel() == m.dim(1), "add_row_broadcast: row length mismatch");
  const int rows = m.dim(0), cols = m.dim(1);
  TensorT<R> out(m.shape());
  const auto& mv = m.values();
  const auto& vv = v.values();
  auto& ov = out.values();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * cols + c;
      ov[i] = mv[i] + vv[static_cast<std::size_t>(c)];
    }
  if (detail::start_node(tape, {&m, &v}, out)) {
    tape.record([rows, cols, mg = m.grad_ptr(), vg = v.grad_ptr(), og = out.grad_ptr()] {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * cols + c;
          if (mg) (*mg)[i] += (*og)[i];
          if (vg) (*vg)[static_cast<std::size_t>(c)] += (*og)[i];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution and pooling (feature maps are {h, w, c}, channel-last)
// ---------------------------------------------------------------------------

// Cross-correlation plus bias. Weights are {k, k, c_in, c_out}; zero padding.
template <typename R>
TensorT<R> conv2d(TapeT<R>& tape, const TensorT<R>& x, const TensorT<R>& w, const TensorT<R>& b,
                  int stride, int pad) {
  detail::check(x.ndim() == 3, "conv2d: input must be h x w x c");
  detail::check(w.ndim() == 4, "conv2d: weight must be k x k x c_in x c_out");
  detail::check(w.dim(0) == w.dim(1), "conv2d: kernel must be square");
  const int k = w.dim(0);
  detail::check(k == 1 || k == 3, "conv2d: kernel size must be 1 or 3");
  detail::check(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  detail::check(pad >= 0, "conv2d: negative padding");
  const int h = x.dim(0), wd = x.dim(1), ci = x.dim(2), co = w.dim(3);
  detail::check(w.dim(2) == ci, "conv2d: input channels do not match weight");
  detail::check(b.ndim() == 1 && b.dim(0) == co, "conv2d: bias length must equal c_out");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  detail::check(h + 2 * pad >= k && wd + 2 * pad >= k && ho >= 1 && wo >= 1,
                "conv2d: output would be empty");

  TensorT<R> out({ho, wo, co});
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      R* orow = &ov[(static_cast<std::size_t>(oy) * wo + ox) * co];
      for (int c = 0; c < co; ++c) orow[c] = bv[static_cast<std::size_t>(c)];
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= wd) continue;
          const R* xrow = &xv[(static_cast<std::size_t>(iy) * wd + ix) * ci];
          const R* wtap = &wv[(static_cast<std::size_t>(ky) * k + kx) * ci * co];
          for (int c = 0; c < ci; ++c) {
            const R xval = xrow[c];
            const R* wrow = &wtap[static_cast<std::size_t>(c) * co];
            for (int oc = 0; oc < co; ++oc) orow[oc] += xval * wrow[oc];
          }
        }
      }
    }
  }

  if (detail::start_node(tape, {&x, &w, &b}, out)) {
    tape.record([h, wd, ci, co, k, stride, pad, ho, wo, xd = x.data_ptr(), wdt = w.data_ptr(),
                 xg = x.grad_ptr(), wg = w.grad_ptr(), bg = b.grad_ptr(), og = out.grad_ptr()] {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const R* grow = &(*og)[(static_cast<std::size_t>(oy) * wo + ox) * co];
          if (bg) {
            for (int oc = 0; oc < co; ++oc) (*bg)[static_cast<std::size_t>(oc)] += grow[oc];
          }
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= wd) continue;
              const std::size_t xbase = (static_cast<std::size_t>(iy) * wd + ix) * ci;
              const std::size_t wbase = (static_cast<std::size_t>(ky) * k + kx) * ci * co;
              for (int c = 0; c < ci; ++c) {
                const R* wrow = &(*wdt)[wbase + static_cast<std::size_t>(c) * co];
                if (xg) {
                  R acc = R(0);
                  for (int oc = 0; oc < co; ++oc) acc += wrow[oc] * grow[oc];
                  (*xg)[xbase + static_cast<std::size_t>(c)] += acc;
                }
                if (wg) {
                  const R xval = (*xd)[xbase + static_cast<std::size_t>(c)];
                  R* wgrow = &(*wg)[wbase + static_cast<std::size_t>(c) * co];
                  for (int oc = 0; oc < co; ++oc) wgrow[oc] += xval * grow[oc];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename R>
TensorT<R> global_avg_pool(TapeT<R>& tape, const TensorT<R>& x) {
  detail::check(x.ndim() == 3, "global_avg_pool: input must be h x w x c");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const R inv = R(1) / static_cast<R>(h * w);
  TensorT<R> out({1, 1, c});
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int p = 0; p < h * w; ++p)
    for (int ch = 0; ch < c; ++ch) ov[static_cast<std::size_t>(ch)] += xv[static_cast<std::size_t>(p) * c + ch];
  for (int ch = 0; ch < c; ++ch) ov[static_cast<std::size_t>(ch)] *= inv;
  if (detail::start_node(tape, {&x}, out)) {
    tape.record([h, w, c, inv, xg = x.grad_ptr(), og = out.grad_ptr()] {
      for (int p = 0; p < h * w; ++p)
        for (int ch = 0; ch < c; ++ch)
          (*xg)[static_cast<std::size_t>(p) * c + ch] += inv * (*og)[static_cast<std::size_t>(ch)];
    });
  }
  return out;
}

// Per-position mean over channels: {h, w, c} -> {h, w, 1}.
template <typename R>
TensorT<R> channel_mean(TapeT<R>& tape, const TensorT<R>& x) {
  detail::check(x.ndim() == 3, "channel_mean: input must be h x w x c");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const R inv = R(1) / static_cast<R>(c);
  TensorT<R> out({h, w, 1});
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int p = 0; p < h * w; ++p) {
    R s = R(0);
    for (int ch = 0; ch < c; ++ch) s += xv[static_cast<std::size_t>(p) * c + ch];
    ov[static_cast<std::size_t>(p)] = s * inv;
  }
  if (detail::start_node(tape, {&x}, out)) {
    tape.record([h, w, c, inv, xg = x.grad_ptr(), og = out.grad_ptr()] {
      for (int p = 0; p < h * w; ++p) {
        const R g = inv * (*og)[static_cast<std::size_t>(p)];
        for (int ch = 0; ch < c; ++ch) (*xg)[static_cast<std::size_t>(p) * c + ch] += g;
      }
    });
  }
  return out;
}

// Nearest-neighbour upsampling; source row for output row y is floor(y*h/ho).
template <typename R>
TensorT<R> upsample_nearest(TapeT<R>& tape, const TensorT<R>& x, int ho, int wo) {
  detail::check(x.ndim() == 3, "upsample_nearest: input must be h x w x c");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  detail::check(ho >= h && wo >= w, "upsample_nearest: target smaller than input");
  TensorT<R> out({ho, wo, c});
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int y = 0; y < ho; ++y) {
    const int sy = static_cast<int>((static_cast<std::int64_t>(y) * h) / ho);
    for (int xo = 0; xo < wo; ++xo) {
      const int sx = static_cast<int>((static_cast<std::int64_t>(xo) * w) / wo);
      const R* src = &xv[(static_cast<std::size_t>(sy) * w + sx) * c];
      R* dst = &ov[(static_cast<std::size_t>(y) * wo + xo) * c];
      for (int ch = 0; ch < c; ++ch) dst[ch] = src[ch];
    }
  }
  if (detail::start_node(tape, {&x}, out)) {
    tape.record([h, w, c, ho, wo, xg = x.grad_ptr(), og = out.grad_ptr()] {
      for (int y = 0; y < ho; ++y) {
        const int sy = static_cast<int>((static_cast<std::int64_t>(y) * h) / ho);
        for (int xo = 0; xo < wo; ++xo) {
          const int sx = static_cast<int>((static_cast<std::int64_t>(xo) * w) / wo);
          const R* g = &(*og)[(static_cast<std::size_t>(y) * wo + xo) * c];
          R* dst = &(*xg)[(static_cast<std::size_t>(sy) * w + sx) * c];
          for (int ch = 0; ch < c; ++ch) dst[ch] += g[ch];
        }
      }
    });
  }
  return out;
}

// Stride-2 max over non-overlapping 2x2 windows; ties route the gradient to
// the first maximal entry in scan order.
template <typename R>
TensorT<R> max_pool2x2(TapeT<R>& tape, const TensorT<R>& x) {
  detail::check(x.ndim() == 3, "max_pool2x2: input must be h x w x c");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  detail::check(h % 2 == 0 && w % 2 == 0, "max_pool2x2: height and width must be even");
  const int ho = h / 2, wo = w / 2;
  TensorT<R> out({ho, wo, c});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out.values().size());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox)
      for (int ch = 0; ch < c; ++ch) {
        R best = -std::numeric_limits<R>::infinity();
        std::int32_t bi = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t i =
                (static_cast<std::size_t>(2 * oy + dy) * w + (2 * ox + dx)) * c + ch;
            if (xv[i] > best) {
              best = xv[i];
              bi = static_cast<std::int32_t>(i);
            }
          }
        const std::size_t o = (static_cast<std::size_t>(oy) * wo + ox) * c + ch;
        ov[o] = best;
        (*argmax)[o] = bi;
      }
  if (detail::start_node(tape, {&x}, out)) {
    tape.record([argmax, xg = x.grad_ptr(), og = out.grad_ptr()] {
      for (std::size_t o = 0; o < og->size(); ++o)
        (*xg)[static_cast<std::size_t>((*argmax)[o])] += (*og)[o];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

template <typename R>
TensorT<R> softmax(TapeT<R>& tape, const TensorT<R>& x, const GroupSpec& spec) {
  detail::check_group_spec(x, spec, "softmax");
  TensorT<R> out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  const auto idx = [&spec](std::int64_t o, std::int64_t g, std::int64_t i) {
    return static_cast<std::size_t>((o * spec.group + g) * spec.inner + i);
  };
  for (std::int64_t o = 0; o < spec.outer; ++o)
    for (std::int64_t i = 0; i < spec.inner; ++i) {
      R mx = xv[idx(o, 0, i)];
      for (std::int64_t g = 1; g < spec.group; ++g) mx = std::max(mx, xv[idx(o, g, i)]);
      R denom = R(0);
      for (std::int64_t g = 0; g < spec.group; ++g) {
        const R e = std::exp(xv[idx(o, g, i)] - mx);
        ov[idx(o, g, i)] = e;
        denom += e;
      }
      for (std::int64_t g = 0; g < spec.group; ++g) ov[idx(o, g, i)] /= denom;
    }
  if (detail::start_node(tape, {&x}, out)) {
    tape.record([spec, od = out.data_ptr(), xg = x.grad_ptr(), og = out.grad_ptr()] {
      const auto idx = [&spec](std::int64_t o, std::int64_t g, std::int64_t i) {
        return static_cast<std::size_t>((o * spec.group + g) * spec.inner + i);
      };
      for (std::int64_t o = 0; o < spec.outer; ++o)
        for (std::int64_t i = 0; i < spec.inner; ++i) {
          R dot = R(0);
          for (std::int64_t g = 0; g < spec.group; ++g)
            dot += (*og)[idx(o, g, i)] * (*od)[idx(o, g, i)];
          for (std::int64_t g = 0; g < spec.group; ++g) {
            const std::size_t k = idx(o, g, i);
            (*xg)[k] += ((*og)[k] - dot) * (*od)[k];
          }
        }
    });
  }
  return out;
}

// No-affine layer normalization with biased variance over each group.
template <typename R>
TensorT<R> layer_norm(TapeT<R>& tape, const TensorT<R>& x, const GroupSpec& spec,
                      R eps = R(1e-5)) {
  detail::check_group_spec(x, spec, "layer_norm");
  TensorT<R> out(x.shape());
  auto invstd = std::make_shared<std::vector<R>>(
      static_cast<std::size_t>(spec.outer * spec.inner), R(0));
  const auto& xv = x.values();
  auto& ov = out.values();
  const auto idx = [&spec](std::int64_t o, std::int64_t g, std::int64_t i) {
    return static_cast<std::size_t>((o * spec.group + g) * spec.inner + i);
  };
  const R invn = R(1) / static_cast<R>(spec.group);
  for (std::int64_t o = 0; o < spec.outer; ++o)
    for (std::int64_t i = 0; i < spec.inner; ++i) {
      R mean = R(0);
      for (std::int64_t g = 0; g < spec.group; ++g) mean += xv[idx(o, g, i)];
      mean *= invn;
      R var = R(0);
      for (std::int64_t g = 0; g < spec.group; ++g) {
        const R d = xv[idx(o, g, i)] - mean;
        var += d * d;
      }
      var *= invn;
      const R is = R(1) / std::sqrt(var + eps);
      (*invstd)[static_cast<std::size_t>(o * spec.inner + i)] = is;
      for (std::int64_t g = 0; g < spec.group; ++g)
        ov[idx(o, g, i)] = (xv[idx(o, g, i)] - mean) * is;
    }
  if (detail::start_node(tape, {&x}, out)) {
    tape.record([spec, invstd, od = out.data_ptr(), xg = x.grad_ptr(), og = out.grad_ptr()] {
      const auto idx = [&spec](std::int64_t o, std::int64_t g, std::int64_t i) {
        return static_cast<std::size_t>((o * spec.group + g) * spec.inner + i);
      };
      const R invn = R(1) / static_cast<R>(spec.group);
      for (std::int64_t o = 0; o < spec.outer; ++o)
        for (std::int64_t i = 0; i < spec.inner; ++i) {
          R gmean = R(0), gymean = R(0);
          for (std::int64_t g = 0; g < spec.group; ++g) {
            const std::size_t k = idx(o, g, i);
            gmean += (*og)[k];
            gymean += (*og)[k] * (*od)[k];
          }
          gmean *= invn;
          gymean *= invn;
          const R is = (*invstd)[static_cast<std::size_t>(o * spec.inner + i)];
          for (std::int64_t g = 0; g < spec.group; ++g) {
            const std::size_t k = idx(o, g, i);
            (*xg)[k] += is * ((*og)[k] - gmean - (*od)[k] * gymean);
          }
        }
    });
  }
  return out;
}

// x / max(||x||_2, eps), flattened.
template <typename R>
TensorT<R> l2_normalize(TapeT<R>& tape, const TensorT<R>& x, R eps = R(1e-12)) {
  TensorT<R> out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  R sq = R(0);
  for (std::size_t i = 0; i < xv.size(); ++i) sq += xv[i] * xv[i];
  const R norm = std::sqrt(sq);
  const bool guarded = !(norm > eps);
  const R denom = guarded ? eps : norm;
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] / denom;
  if (detail::start_node(tape, {&x}, out)) {
    tape.record([guarded, denom, od = out.data_ptr(), xg = x.grad_ptr(), og = out.grad_ptr()] {
      if (guarded) {
        for (std::size_t i = 0; i < og->size(); ++i) (*xg)[i] += (*og)[i] / denom;
        return;
      }
      R dot = R(0);
      for (std::size_t i = 0; i < og->size(); ++i) dot += (*og)[i] * (*od)[i];
      for (std::size_t i = 0; i < og->size(); ++i)
        (*xg)[i] += ((*og)[i] - (*od)[i] * dot) / denom;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// broadcasting products and assembly ops
// ---------------------------------------------------------------------------

// Per-position gate: {h, w, 1} times {h, w, c}, applied across channels.
template <typename R>
TensorT<R> mul_broadcast_spatial(TapeT<R>& tape, const TensorT<R>& gate, const TensorT<R>& x) {
  detail::check(gate.ndim() == 3 && x.ndim() == 3, "mul_broadcast_spatial: expects h x w x c");
  detail::check(gate.dim(2) == 1, "mul_broadcast_spatial: gate must have one channel");
  detail::check(gate.dim(0) == x.dim(0) && gate.dim(1) == x.dim(1),
                "mul_broadcast_spatial: spatial dims disagree");
  const int hw = x.dim(0) * x.dim(1), c = x.dim(2);
  TensorT<R> out(x.shape());
  const auto& gv = gate.values();
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int p = 0; p < hw; ++p) {
    const R g = gv[static_cast<std::size_t>(p)];
    for (int ch = 0; ch < c; ++ch)
      ov[static_cast<std::size_t>(p) * c + ch] = g * xv[static_cast<std::size_t>(p) * c + ch];
  }
  if (detail::start_node(tape, {&gate, &x}, out)) {
    tape.record([hw, c, gd = gate.data_ptr(), xd = x.data_ptr(), gg = gate.grad_ptr(),
                 xg = x.grad_ptr(), og = out.grad_ptr()] {
      for (int p = 0; p < hw; ++p) {
        R acc = R(0);
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t i = static_cast<std::size_t>(p) * c + ch;
          if (gg) acc += (*og)[i] * (*xd)[i];
          if (xg) (*xg)[i] += (*gd)[static_cast<std::size_t>(p)] * (*og)[i];
        }
        if (gg) (*gg)[static_cast<std::size_t>(p)] += acc;
      }
    });
  }
  return out;
}

// Outer product of a spatial map {h, w, 1} and a channel vector {1, 1, c}.
template <typename R>
TensorT<R> outer_spatial_channel(TapeT<R>& tape, const TensorT<R>& sp, const TensorT<R>& ch) {
  detail::check(sp.ndim() == 3 && sp.dim(2) == 1, "outer_spatial_channel: spatial map must be h x w x 1");
  detail::check(ch.ndim() == 3 && ch.dim(0) == 1 && ch.dim(1) == 1,
                "outer_spatial_channel: channel vector must be 1 x 1 x c");
  const int h = sp.dim(0), w = sp.dim(1), c = ch.dim(2);
  TensorT<R> out({h, w, c});
  const auto& sv = sp.values();
  const auto& cv = ch.values();
  auto& ov = out.values();
  for (int p = 0; p < h * w; ++p)
    for (int k = 0; k < c; ++k)
      ov[static_cast<std::size_t>(p) * c + k] = sv[static_cast<std::size_t>(p)] * cv[static_cast<std::size_t>(k)];
  if (detail::start_node(tape, {&sp, &ch}, out)) {
    tape.record([h, w, c, sd = sp.data_ptr(), cd = ch.data_ptr(), sg = sp.grad_ptr(),
                 cg = ch.grad_ptr(), og = out.grad_ptr()] {
      for (int p = 0; p < h * w; ++p)
        for (int k = 0; k < c; ++k) {
          const std::size_t i = static_cast<std::size_t>(p) * c + k;
          if (sg) (*sg)[static_cast<std::size_t>(p)] += (*og)[i] * (*cd)[static_cast<std::size_t>(k)];
          if (cg) (*cg)[static_cast<std::size_t>(k)] += (*og)[i] * (*sd)[static_cast<std::size_t>(p)];
        }
    });
  }
  return out;
}

// Cosine similarity of two tensors flattened to vectors. If either norm is
// not above eps the similarity is defined as 0 (and is locally constant).
template <typename R>
TensorT<R> cosine_flat(TapeT<R>& tape, const TensorT<R>& a, const TensorT<R>& b,
                       R eps = R(1e-12)) {
  detail::check(a.numel() == b.numel(), "cosine_flat: element counts disagree");
  const auto& av = a.values();
  const auto& bv = b.values();
  R dot = R(0), na = R(0), nb = R(0);
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na += av[i] * av[i];
    nb += bv[i] * bv[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const bool guarded = !(na > eps) || !(nb > eps);
  TensorT<R> out = TensorT<R>::scalar(guarded ? R(0) : dot / (na * nb));
  if (detail::start_node(tape, {&a, &b}, out)) {
    if (guarded) return out;  // flat region: no gradient flows
    const R cval = out.value();
    tape.record([cval, na, nb, ad = a.data_ptr(), bd = b.data_ptr(), ag = a.grad_ptr(),
                 bg = b.grad_ptr(), og = out.grad_ptr()] {
      const R g = (*og)[0];
      const R inv = R(1) / (na * nb);
      for (std::size_t i = 0; i < ad->size(); ++i) {
        if (ag) (*ag)[i] += g * ((*bd)[i] * inv - cval * (*ad)[i] / (na * na));
        if (bg) (*bg)[i] += g * ((*ad)[i] * inv - cval * (*bd)[i] / (nb * nb));
      }
    });
  }
  return out;
}

// Stacks equally sized tensors (flattened) as the rows of an {n, len} matrix.
template <typename R>
TensorT<R> stack_rows(TapeT<R>& tape, const std::vector<TensorT<R>>& rows) {
  detail::check(!rows.empty(), "stack_rows: no rows");
  const std::int64_t len = rows.front().numel();
  for (const auto& r : rows)
    detail::check(r.numel() == len, "stack_rows: rows differ in length");
  const int n = static_cast<int>(rows.size());
  TensorT<R> out({n, static_cast<int>(len)});
  auto& ov = out.values();
  for (int r = 0; r < n; ++r) {
    const auto& rv = rows[static_cast<std::size_t>(r)].values();
    std::copy(rv.begin(), rv.end(), ov.begin() + static_cast<std::ptrdiff_t>(r * len));
  }
  bool tracked = false;
  for (const auto& r : rows) tracked = tracked || r.tracked();
  if (tape.recording() && tracked) {
    out.track_for_tape();
    std::vector<std::shared_ptr<std::vector<R>>> grads;
    grads.reserve(rows.size());
    for (const auto& r : rows) grads.push_back(r.grad_ptr());
    tape.record([len, grads, og = out.grad_ptr()] {
      for (std::size_t r = 0; r < grads.size(); ++r) {
        if (!grads[r]) continue;
        const R* g = &(*og)[r * static_cast<std::size_t>(len)];
        for (std::int64_t i = 0; i < len; ++i) (*grads[r])[static_cast<std::size_t>(i)] += g[i];
      }
    });
  }
  return out;
}

// Builds a symmetric {n, n} matrix (zero diagonal) from the n(n-1)/2 scalar
// entries above the diagonal, given in row-major (i < j) order.
template <typename R>
TensorT<R> pack_symmetric(TapeT<R>& tape, const std::vector<TensorT<R>>& upper, int n) {
  detail::check(n >= 1, "pack_symmetric: n must be positive");
  detail::check(static_cast<std::int64_t>(upper.size()) ==
                    static_cast<std::int64_t>(n) * (n - 1) / 2,
                "pack_symmetric: wrong number of entries");
  for (const auto& s : upper)
    detail::check(s.numel() == 1, "pack_symmetric: entries must be scalars");
  TensorT<R> out({n, n});
  auto& ov = out.values();
  std::size_t k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j, ++k) {
      const R v = upper[k].value();
      ov[static_cast<std::size_t>(i) * n + j] = v;
      ov[static_cast<std::size_t>(j) * n + i] = v;
    }
  bool tracked = false;
  for (const auto& s : upper) tracked = tracked || s.tracked();
  if (tape.recording() && tracked) {
    out.track_for_tape();
    std::vector<std::shared_ptr<std::vector<R>>> grads;
    grads.reserve(upper.size());
    for (const auto& s : upper) grads.push_back(s.grad_ptr());
    tape.record([n, grads, og = out.grad_ptr()] {
      std::size_t k = 0;
      for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j, ++k) {
          if (!grads[k]) continue;
          (*grads[k])[0] += (*og)[static_cast<std::size_t>(i) * n + j] +
                            (*og)[static_cast<std::size_t>(j) * n + i];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

template <typename R>
struct GradCheckReport {
  struct PerInput {
    std::string name;
    R max_rel_err = R(0);
  };
  std::vector<PerInput> per_input;
  R max_rel_err = R(0);
  bool passed = false;
};

// Central finite differences against tape gradients. `fn` must be a pure
// function (TapeT&, inputs) -> scalar tensor. Failures are reported in the
// returned struct, never thrown. Coordinates where both estimates fall below
// zero_tol count as matching: parameters made inert by a downstream
// normalization (a conv bias feeding layer norm, a softmax shift) have an
// exactly zero derivative, and a central difference there measures nothing
// but cancellation noise.
template <typename R, typename Fn>
GradCheckReport<R> grad_check(Fn&& fn, const std::vector<TensorT<R>>& inputs, R step, R tol,
                              R zero_tol = R(0)) {
  GradCheckReport<R> report;

  std::vector<TensorT<R>> tracked;
  tracked.reserve(inputs.size());
  for (const auto& t : inputs) {
    TensorT<R> c = t.clone_detached();
    c.set_requires_grad(true);
    tracked.push_back(std::move(c));
  }
  TapeT<R> tape;
  TensorT<R> loss = fn(tape, tracked);
  if (loss.numel() != 1) throw std::invalid_argument("grad_check: fn must return a scalar");
  tape.backward(loss);

  std::vector<std::vector<R>> analytic;
  analytic.reserve(tracked.size());
  for (auto& t : tracked) analytic.push_back(t.grad());

  std::vector<TensorT<R>> work;
  work.reserve(inputs.size());
  for (const auto& t : inputs) work.push_back(t.clone_detached());

  const auto eval = [&]() -> R {
    TapeT<R> fwd;
    fwd.set_recording(false);
    return fn(fwd, work).value();
  };

  for (std::size_t ti = 0; ti < work.size(); ++ti) {
    typename GradCheckReport<R>::PerInput entry;
    entry.name = "input" + std::to_string(ti);
    auto& vals = work[ti].values();
    for (std::size_t k = 0; k < vals.size(); ++k) {
      const R saved = vals[k];
      vals[k] = saved + step;
      const R fp = eval();
      vals[k] = saved - step;
      const R fm = eval();
      vals[k] = saved;
      const R numeric = (fp - fm) / (R(2) * step);
      const R a = analytic[ti][k];
      if (std::max(std::abs(a), std::abs(numeric)) <= zero_tol) continue;
      const R denom = std::max({std::abs(a), std::abs(numeric), R(1e-8)});
      entry.max_rel_err = std::max(entry.max_rel_err, std::abs(a - numeric) / denom);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_input.push_back(std::move(entry));
  }
  report.passed = report.max_rel_err <= tol;
  return report;
}

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;
using TapeF = TapeT<float>;
using TapeD = TapeT<double>;

}  // namespace dcn
