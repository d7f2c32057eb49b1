#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prefnet/tensor.hpp"

// Differentiable primitives. Every op validates shapes up front, computes
// the forward value eagerly, and, when a tape is active and some input
// requires grad, records a closure that accumulates into its inputs' grads.
//
// Kink conventions: relu(0) and minimum(a, a) route the gradient to the
// first argument (x and a respectively); abs'(0) = 0; max over an axis sends
// the gradient to the first maximal index.

namespace prefnet::ad {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

// Eigen picks scalar or packet code paths by buffer alignment, which would
// make results depend on where malloc put a tensor. Products therefore run on
// Eigen-owned (always aligned) copies; only exact elementwise steps touch
// tensor memory directly.
inline RowMat load(const double* p, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const RowMat>(p, rows, cols);
}

inline RowMat load(const Tensor& t, Eigen::Index rows, Eigen::Index cols) { return load(t.data().data(), rows, cols); }

inline std::vector<double> to_vector(const RowMat& m) { return {m.data(), m.data() + m.size()}; }

template <class Expr>
void accumulate(double* dst, const Expr& expr) {
  RowMat m = expr;
  for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += m.data()[i];
}

[[noreturn]] inline void shape_error(const char* op, const std::string& what) {
  throw Error(std::string(op) + ": " + what);
}

inline double* grad_sink(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  t.node()->ensure_grad();
  return t.node()->grad.data();
}

template <class Backward>
Tensor record(const char* op, Tensor out, std::initializer_list<Tensor> inputs, Backward bw) {
  Tape* tape = Tape::current();
  if (tape == nullptr) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.set_requires_grad(true);
  Tape::Entry entry;
  entry.op = op;
  for (const auto& in : inputs) entry.inputs.push_back(in.node());
  entry.output = out.node();
  Node* o = out.node().get();
  entry.backward = [bw = std::move(bw), o]() { bw(o->grad); };
  tape->record(std::move(entry));
  return out;
}

// Numpy-style broadcasting of two operands aligned on trailing dimensions.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // per output dim, 0 if broadcast
  std::size_t size_a = 0, size_b = 0;
  enum class Kind { Same, ScalarB, ScalarA, SuffixB, SuffixA, General } kind = Kind::General;
};

inline std::vector<std::size_t> strides_for(const Shape& s, std::size_t rank) {
  std::vector<std::size_t> st(rank, 0);
  std::size_t acc = 1;
  std::size_t offset = rank - s.size();
  for (std::size_t d = s.size(); d-- > 0;) {
    st[offset + d] = s[d] == 1 ? 0 : acc;
    acc *= s[d];
  }
  return st;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

inline Broadcast plan(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  for (std::size_t d = 0; d < rank; ++d) {
    std::size_t da = d + a.size() >= rank ? a[d + a.size() - rank] : 1;
    std::size_t db = d + b.size() >= rank ? b[d + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      shape_error(op, "cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    p.out[d] = std::max(da, db);
  }
  p.size_a = numel(a);
  p.size_b = numel(b);
  p.stride_a = strides_for(a, rank);
  p.stride_b = strides_for(b, rank);
  std::size_t n = numel(p.out);
  if (p.size_a == n && p.size_b == n) {
    p.kind = Broadcast::Kind::Same;
  } else if (p.size_b == 1 && p.size_a == n) {
    p.kind = Broadcast::Kind::ScalarB;
  } else if (p.size_a == 1 && p.size_b == n) {
    p.kind = Broadcast::Kind::ScalarA;
  } else if (p.size_a == n && is_suffix(b, p.out)) {
    p.kind = Broadcast::Kind::SuffixB;
  } else if (p.size_b == n && is_suffix(a, p.out)) {
    p.kind = Broadcast::Kind::SuffixA;
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <class F>
void for_each(const Broadcast& p, F&& f) {
  std::size_t n = numel(p.out);
  switch (p.kind) {
    case Broadcast::Kind::Same:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    case Broadcast::Kind::ScalarB:
      for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
      return;
    case Broadcast::Kind::ScalarA:
      for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
      return;
    case Broadcast::Kind::SuffixB:
      for (std::size_t o = 0; o < n; o += p.size_b)
        for (std::size_t j = 0; j < p.size_b; ++j) f(o + j, o + j, j);
      return;
    case Broadcast::Kind::SuffixA:
      for (std::size_t o = 0; o < n; o += p.size_a)
        for (std::size_t j = 0; j < p.size_a; ++j) f(o + j, j, o + j);
      return;
    case Broadcast::Kind::General:
      break;
  }
  std::size_t rank = p.out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    std::size_t d = rank - 1;
    while (true) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d] || d == 0) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
      --d;
    }
  }
}

// outer x axis x inner decomposition for reductions along one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    shape_error(op, "axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  AxisSplit a;
  for (std::size_t d = 0; d < axis; ++d) a.outer *= s[d];
  a.len = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) a.inner *= s[d];
  return a;
}

inline Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape r = s;
  if (keepdim) {
    r[axis] = 1;
  } else {
    r.erase(r.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return r;
}

template <class Fwd, class Bwd>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  Broadcast p = plan(a.shape(), b.shape(), op);
  std::vector<double> out(numel(p.out));
  const double* x = a.data().data();
  const double* y = b.data().data();
  for_each(p, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(x[i], y[j]); });
  Tensor result(p.out, std::move(out));
  return record(op, result, {a, b}, [a, b, p, bwd](const std::vector<double>& g) {
    double* ga = grad_sink(a);
    double* gb = grad_sink(b);
    const double* x = a.data().data();
    const double* y = b.data().data();
    for_each(p, [&](std::size_t o, std::size_t i, std::size_t j) {
      bwd(g[o], x[i], y[j], ga ? &ga[i] : nullptr, gb ? &gb[j] : nullptr);
    });
  });
}

// Unary op whose derivative is expressed through the input and output.
template <class Fwd, class Dfdx>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Dfdx dfdx) {
  std::vector<double> out(a.size());
  const double* x = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tensor result(a.shape(), std::move(out));
  Node* y = result.node().get();
  return record(op, result, {a}, [a, y, dfdx](const std::vector<double>& g) {
    double* ga = grad_sink(a);
    const double* x = a.data().data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y->data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (broadcasting)

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0 || !std::isfinite(v)) {
      throw Error("div: divisor contains zero or non-finite value (shapes " +
                  to_string(a.shape()) + " / " + to_string(b.shape()) + ")");
    }
  }
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g / y;
        if (gb) *gb -= g * x / (y * y);
      });
}

/// Elementwise minimum; ties select (and differentiate through) `a`.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (x <= y) {
          if (ga) *ga += g;
        } else if (gb) {
          *gb += g;
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

inline Tensor neg(const Tensor& a) {
  return detail::unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x >= 0.0 ? x : 0.0; },
      [](double x, double) { return x >= 0.0 ? 1.0 : 0.0; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(a[i]);
    if (!std::isfinite(out[i])) {
      throw Error("exp: overflow at input " + std::to_string(a[i]) + " (shape " +
                  to_string(a.shape()) + ")");
    }
  }
  Tensor result(a.shape(), std::move(out));
  Node* y = result.node().get();
  return detail::record("exp", result, {a}, [a, y](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y->data[i];
  });
}

/// Natural log of (x + eps). Inputs must be non-negative.
inline Tensor log(const Tensor& a, double eps = 1e-12) {
  for (double v : a.data()) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw Error("log: input outside [0, inf) (value " + std::to_string(v) + ", shape " +
                  to_string(a.shape()) + ")");
    }
  }
  return detail::unary(
      "log", a, [eps](double x) { return std::log(x + eps); },
      [eps](double x, double) { return 1.0 / (x + eps); });
}

/// tanh via exp(-2|x|); vectorized because the auction trunks spend most of
/// their non-GEMM time here.
inline Tensor tanh(const Tensor& a) {
  Eigen::ArrayXd x = detail::ConstArrayMap(a.data().data(), static_cast<Eigen::Index>(a.size()));
  Eigen::ArrayXd e = (-2.0 * x.abs()).exp();
  Eigen::ArrayXd y = x.sign() * (1.0 - e) / (1.0 + e);
  Tensor result(a.shape(), std::vector<double>(y.data(), y.data() + y.size()));
  Node* yn = result.node().get();
  return detail::record("tanh", result, {a}, [a, yn](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    const double* y = yn->data.data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    detail::shape_error("reshape", "cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  Tensor result(std::move(shape), a.values());
  return detail::record("reshape", result, {a}, [a](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Keeps indices [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  auto s = detail::split(a.shape(), axis, "slice");
  if (begin >= end || end > s.len) {
    detail::shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                     ") invalid for axis " + std::to_string(axis) + " of " +
                                     to_string(a.shape()));
  }
  Shape shape = a.shape();
  shape[axis] = end - begin;
  std::size_t width = end - begin;
  std::vector<double> out(s.outer * width * s.inner);
  const double* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < width; ++k)
      std::copy_n(x + (o * s.len + begin + k) * s.inner, s.inner, out.data() + (o * width + k) * s.inner);
  Tensor result(std::move(shape), std::move(out));
  return detail::record("slice", result, {a}, [a, s, begin, width](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < width; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          ga[(o * s.len + begin + k) * s.inner + i] += g[(o * width + k) * s.inner + i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false) {
  auto s = detail::split(a.shape(), axis, "sum");
  std::vector<double> out(s.outer * s.inner, 0.0);
  const double* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.len + k) * s.inner + i];
  Tensor result(detail::reduced_shape(a.shape(), axis, keepdim), std::move(out));
  return detail::record("sum", result, {a}, [a, s](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.len; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.len + k) * s.inner + i] += g[o * s.inner + i];
  });
}

inline Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false) {
  auto s = detail::split(a.shape(), axis, "mean");
  double inv = 1.0 / static_cast<double>(s.len);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const double* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.len + k) * s.inner + i];
  for (double& v : out) v *= inv;
  Tensor result(detail::reduced_shape(a.shape(), axis, keepdim), std::move(out));
  return detail::record("mean", result, {a}, [a, s, inv](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.len; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          ga[(o * s.len + k) * s.inner + i] += g[o * s.inner + i] * inv;
  });
}

inline Tensor sum_all(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return detail::record("sum_all", Tensor::scalar(total), {a}, [a](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[0];
  });
}

inline Tensor mean_all(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  double inv = 1.0 / static_cast<double>(a.size());
  return detail::record("mean_all", Tensor::scalar(total * inv), {a}, [a, inv](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[0] * inv;
  });
}

/// Maximum along `axis`; the gradient goes to the first maximal index.
inline Tensor max(const Tensor& a, std::size_t axis, bool keepdim = false) {
  auto s = detail::split(a.shape(), axis, "max");
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  const double* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      double bv = x[o * s.len * s.inner + i];
      for (std::size_t k = 1; k < s.len; ++k) {
        double v = x[(o * s.len + k) * s.inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[o * s.inner + i] = bv;
      arg[o * s.inner + i] = (o * s.len + best) * s.inner + i;
    }
  Tensor result(detail::reduced_shape(a.shape(), axis, keepdim), std::move(out));
  return detail::record("max", result, {a}, [a, arg = std::move(arg)](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    for (std::size_t r = 0; r < g.size(); ++r) ga[arg[r]] += g[r];
  });
}

inline Tensor softmax(const Tensor& a, std::size_t axis) {
  auto s = detail::split(a.shape(), axis, "softmax");
  std::vector<double> out(a.size());
  const double* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t k) { return (o * s.len + k) * s.inner + i; };
      double m = x[at(0)];
      for (std::size_t k = 1; k < s.len; ++k) m = std::max(m, x[at(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        out[at(k)] = std::exp(x[at(k)] - m);
        z += out[at(k)];
      }
      for (std::size_t k = 0; k < s.len; ++k) out[at(k)] /= z;
    }
  Tensor result(a.shape(), std::move(out));
  Node* yn = result.node().get();
  return detail::record("softmax", result, {a}, [a, s, yn](const std::vector<double>& g) {
    double* ga = detail::grad_sink(a);
    const double* y = yn->data.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t k) { return (o * s.len + k) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) dot += g[at(k)] * y[at(k)];
        for (std::size_t k = 0; k < s.len; ++k) ga[at(k)] += y[at(k)] * (g[at(k)] - dot);
      }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layers

/// [M x K] * [K x N] -> [M x N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    detail::shape_error("matmul", "incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  auto M = static_cast<Eigen::Index>(a.dim(0));
  auto K = static_cast<Eigen::Index>(a.dim(1));
  auto N = static_cast<Eigen::Index>(b.dim(1));
  detail::RowMat C = detail::load(a, M, K) * detail::load(b, K, N);
  Tensor result({a.dim(0), b.dim(1)}, detail::to_vector(C));
  return detail::record("matmul", result, {a, b}, [a, b, M, K, N](const std::vector<double>& g) {
    detail::RowMat G = detail::load(g.data(), M, N);
    if (double* ga = detail::grad_sink(a)) detail::accumulate(ga, G * detail::load(b, K, N).transpose());
    if (double* gb = detail::grad_sink(b)) detail::accumulate(gb, detail::load(a, M, K).transpose() * G);
  });
}

/// [M x K] * [K x N] + bias[N], the bias broadcast over rows.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || bias.rank() != 1 || bias.dim(0) != w.dim(1)) {
    detail::shape_error("affine", "incompatible shapes " + to_string(x.shape()) + " x " + to_string(w.shape()) +
                                      " + " + to_string(bias.shape()));
  }
  auto M = static_cast<Eigen::Index>(x.dim(0));
  auto K = static_cast<Eigen::Index>(x.dim(1));
  auto N = static_cast<Eigen::Index>(w.dim(1));
  detail::RowMat C = detail::load(x, M, K) * detail::load(w, K, N);
  C.rowwise() += detail::load(bias, 1, N).row(0);
  Tensor result({x.dim(0), w.dim(1)}, detail::to_vector(C));
  return detail::record("affine", result, {x, w, bias}, [x, w, bias, M, K, N](const std::vector<double>& g) {
    detail::RowMat G = detail::load(g.data(), M, N);
    if (double* gx = detail::grad_sink(x)) detail::accumulate(gx, G * detail::load(w, K, N).transpose());
    if (double* gw = detail::grad_sink(w)) detail::accumulate(gw, detail::load(x, M, K).transpose() * G);
    if (double* gb = detail::grad_sink(bias)) detail::accumulate(gb, G.colwise().sum());
  });
}

/// Running statistics for batch normalization over features of [B x F].
struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  explicit BatchNormStats(std::size_t features = 0)
      : running_mean(features, 0.0), running_var(features, 1.0) {}
};

/// Batch normalization over the batch axis of a [B x F] input. Train mode
/// normalizes with (biased) batch statistics and folds them into `stats`
/// with the given momentum; eval mode is the affine map defined by `stats`.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                         bool train, double momentum = 0.9, double eps = 1e-5) {
  if (x.rank() != 2 || gamma.size() != x.dim(1) || beta.size() != x.dim(1) ||
      stats.running_mean.size() != x.dim(1)) {
    detail::shape_error("batch_norm", "input " + to_string(x.shape()) + " with gamma " +
                                          to_string(gamma.shape()) + ", beta " + to_string(beta.shape()) +
                                          ", stats width " + std::to_string(stats.running_mean.size()));
  }
  std::size_t B = x.dim(0), F = x.dim(1);
  if (train && B < 2) detail::shape_error("batch_norm", "train mode needs at least 2 rows");
  std::vector<double> mu(F, 0.0), inv_std(F);
  const double* xd = x.data().data();
  if (train) {
    std::vector<double> var(F, 0.0);
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t f = 0; f < F; ++f) mu[f] += xd[r * F + f];
    for (auto& m : mu) m /= static_cast<double>(B);
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t f = 0; f < F; ++f) {
        double d = xd[r * F + f] - mu[f];
        var[f] += d * d;
      }
    for (std::size_t f = 0; f < F; ++f) {
      double biased = var[f] / static_cast<double>(B);
      double unbiased = var[f] / static_cast<double>(B - 1);
      inv_std[f] = 1.0 / std::sqrt(biased + eps);
      stats.running_mean[f] = momentum * stats.running_mean[f] + (1.0 - momentum) * mu[f];
      stats.running_var[f] = momentum * stats.running_var[f] + (1.0 - momentum) * unbiased;
    }
  } else {
    for (std::size_t f = 0; f < F; ++f) {
      mu[f] = stats.running_mean[f];
      inv_std[f] = 1.0 / std::sqrt(stats.running_var[f] + eps);
    }
  }
  std::vector<double> xhat(B * F), out(B * F);
  const double* gm = gamma.data().data();
  const double* bt = beta.data().data();
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t f = 0; f < F; ++f) {
      std::size_t i = r * F + f;
      xhat[i] = (xd[i] - mu[f]) * inv_std[f];
      out[i] = gm[f] * xhat[i] + bt[f];
    }
  Tensor result(x.shape(), std::move(out));
  return detail::record(
      "batch_norm", result, {x, gamma, beta},
      [x, gamma, beta, train, B, F, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const std::vector<double>& g) {
        const double* gm = gamma.data().data();
        if (double* gg = detail::grad_sink(gamma))
          for (std::size_t r = 0; r < B; ++r)
            for (std::size_t f = 0; f < F; ++f) gg[f] += g[r * F + f] * xhat[r * F + f];
        if (double* gb = detail::grad_sink(beta))
          for (std::size_t r = 0; r < B; ++r)
            for (std::size_t f = 0; f < F; ++f) gb[f] += g[r * F + f];
        double* gx = detail::grad_sink(x);
        if (!gx) return;
        if (!train) {
          for (std::size_t r = 0; r < B; ++r)
            for (std::size_t f = 0; f < F; ++f) gx[r * F + f] += g[r * F + f] * gm[f] * inv_std[f];
          return;
        }
        for (std::size_t f = 0; f < F; ++f) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t r = 0; r < B; ++r) {
            double d = g[r * F + f] * gm[f];
            sum_d += d;
            sum_dx += d * xhat[r * F + f];
          }
          double scale = inv_std[f] / static_cast<double>(B);
          for (std::size_t r = 0; r < B; ++r) {
            double d = g[r * F + f] * gm[f];
            gx[r * F + f] +=
                scale * (static_cast<double>(B) * d - sum_d - xhat[r * F + f] * sum_dx);
          }
        }
      });
}

/// Mean binary cross-entropy of probabilities `pred` against 0/1 `target`.
/// The target is treated as a constant.
inline Tensor binary_cross_entropy(const Tensor& pred, const Tensor& target, double eps = 1e-12) {
  if (pred.shape() != target.shape()) {
    detail::shape_error("binary_cross_entropy",
                        "pred " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double p = pred[i], t = target[i];
    if (!(p >= 0.0 && p <= 1.0)) throw Error("binary_cross_entropy: prediction outside [0,1]");
    total -= t * std::log(p + eps) + (1.0 - t) * std::log(1.0 - p + eps);
  }
  double inv = 1.0 / static_cast<double>(pred.size());
  return detail::record("binary_cross_entropy", Tensor::scalar(total * inv), {pred},
                        [pred, target, inv, eps](const std::vector<double>& g) {
                          double* gp = detail::grad_sink(pred);
                          for (std::size_t i = 0; i < pred.size(); ++i) {
                            double p = pred[i], t = target[i];
                            gp[i] += g[0] * inv * (-(t / (p + eps)) + (1.0 - t) / (1.0 - p + eps));
                          }
                        });
}

// ---------------------------------------------------------------------------
// Operator sugar

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
inline Tensor operator*(double c, const Tensor& a) { return mul(Tensor::scalar(c), a); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }

}  // namespace prefnet::ad
