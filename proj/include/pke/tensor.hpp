#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

#include "pke/common.hpp"

namespace pke {

/// Dense row-major f64 tensor. Plain value type: copies are deep, every
/// public operation leaves all elements finite or throws ValueError.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel_of(shape_) != data_.size())
      throw ShapeError("tensor: element count does not match shape");
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros_like(const Tensor& t) { return zeros(t.shape()); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  /// Row/column counts; 1-D tensors count as a single row.
  std::size_t rows() const {
    if (shape_.size() == 2) return shape_[0];
    if (shape_.size() == 1) return 1;
    throw ShapeError("rows: tensor is not 1-D or 2-D");
  }
  std::size_t cols() const {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    throw ShapeError("cols: tensor is not 1-D or 2-D");
  }

  double& at(std::size_t i) { return data_[i]; }
  double at(std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  double item() const {
    if (!is_scalar()) throw ContractError("item: tensor is not scalar");
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

  std::string shape_str() const {
    std::ostringstream ss;
    ss << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i)
      ss << (i ? "x" : "") << shape_[i];
    ss << ']';
    return ss.str();
  }

 private:
  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

namespace detail {
inline void ensure_finite(const Tensor& t, const char* op) {
  for (double v : t.data())
    if (!std::isfinite(v))
      throw ValueError(std::string(op) + ": produced a non-finite element");
}
inline void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions disagree " + a.shape_str() +
                     " vs " + b.shape_str());
  Tensor out = Tensor::zeros({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  detail::ensure_finite(out, "matmul");
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_2d(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

namespace detail {
// Only two broadcast forms exist: equal shapes, or scalar against tensor.
template <class F>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, F f, const char* op) {
  if (a.same_shape(b)) {
    Tensor out = Tensor::zeros_like(a);
    for (std::size_t i = 0; i < a.numel(); ++i)
      out.at(i) = f(a.at(i), b.at(i));
    ensure_finite(out, op);
    return out;
  }
  if (b.is_scalar()) {
    Tensor out = Tensor::zeros_like(a);
    const double s = b.at(0);
    for (std::size_t i = 0; i < a.numel(); ++i) out.at(i) = f(a.at(i), s);
    ensure_finite(out, op);
    return out;
  }
  if (a.is_scalar()) {
    Tensor out = Tensor::zeros_like(b);
    const double s = a.at(0);
    for (std::size_t i = 0; i < b.numel(); ++i) out.at(i) = f(s, b.at(i));
    ensure_finite(out, op);
    return out;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() +
                   " vs " + b.shape_str());
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(a, b, [](double x, double y) { return x + y; }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(a, b, [](double x, double y) { return x - y; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(a, b, [](double x, double y) { return x * y; }, "mul");
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * c;
  detail::ensure_finite(out, "scale");
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
  return out;
}

namespace detail {
// tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu_scalar(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_scalar(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double sech2 = 1.0 - t * t;
  return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}
}  // namespace detail

inline Tensor gelu(const Tensor& a) {
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.at(i) = detail::gelu_scalar(a.at(i));
  detail::ensure_finite(out, "gelu");
  return out;
}

/// Row-wise softmax with max-subtraction; rows sum to 1 within 1e-9 even for
/// inputs of magnitude 1e4.
inline Tensor softmax_rows(const Tensor& a) {
  detail::require_2d(a, "softmax_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(a.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
  }
  detail::ensure_finite(out, "softmax_rows");
  return out;
}

inline Tensor log_softmax_rows(const Tensor& a) {
  detail::require_2d(a, "log_softmax_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(a.at(i, j) - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) - lse;
  }
  detail::ensure_finite(out, "log_softmax_rows");
  return out;
}

/// Per-row normalization: zero mean, unit variance (population), then affine
/// gain/bias over the last dimension. eps is added to the variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n)
    throw ShapeError("layer_norm: gain/bias must match last dimension");
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x.at(i * n + j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x.at(i * n + j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j)
      out.at(i * n + j) = (x.at(i * n + j) - mean) * inv * gain.at(j) + bias.at(j);
  }
  detail::ensure_finite(out, "layer_norm");
  return out;
}

/// sqrt of the sum of squared entries.
inline double frobenius_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

/// Gather rows of a matrix by index; used for embedding lookup.
inline Tensor gather_rows(const Tensor& m, std::span<const int> rows) {
  detail::require_2d(m, "gather_rows");
  const std::size_t n = m.shape()[1];
  Tensor out = Tensor::zeros({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || static_cast<std::size_t>(r) >= m.shape()[0])
      throw ShapeError("gather_rows: row index out of range");
    for (std::size_t j = 0; j < n; ++j)
      out.at(i, j) = m.at(static_cast<std::size_t>(r), j);
  }
  return out;
}

inline Tensor slice_cols(const Tensor& m, std::size_t c0, std::size_t c1) {
  detail::require_2d(m, "slice_cols");
  if (c0 >= c1 || c1 > m.shape()[1])
    throw ShapeError("slice_cols: bad column range");
  Tensor out = Tensor::zeros({m.shape()[0], c1 - c0});
  for (std::size_t i = 0; i < m.shape()[0]; ++i)
    for (std::size_t j = c0; j < c1; ++j) out.at(i, j - c0) = m.at(i, j);
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.shape()[0] != m) throw ShapeError("concat_cols: row counts differ");
    total += p.shape()[1];
  }
  Tensor out = Tensor::zeros({m, total});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.shape()[1]; ++j)
        out.at(i, off + j) = p.at(i, j);
    off += p.shape()[1];
  }
  return out;
}

namespace detail {
// Finite stand-in for -inf; exp(kMasked - max) underflows to exactly 0.
constexpr double kMasked = -1e30;
}

/// Sets entries above the diagonal of a square score matrix to a large
/// negative value so softmax assigns them probability exactly 0.
inline Tensor causal_mask(const Tensor& scores) {
  detail::require_2d(scores, "causal_mask");
  if (scores.shape()[0] != scores.shape()[1])
    throw ShapeError("causal_mask: matrix must be square");
  Tensor out = scores;
  const std::size_t n = out.shape()[0];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out.at(i, j) = detail::kMasked;
  return out;
}

/// out[i] = m[i, cols[i]], as an m x 1 column.
inline Tensor pick_per_row(const Tensor& m, std::span<const int> cols) {
  detail::require_2d(m, "pick_per_row");
  if (cols.size() != m.shape()[0])
    throw ShapeError("pick_per_row: one column index per row required");
  Tensor out = Tensor::zeros({m.shape()[0], 1});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    const int c = cols[i];
    if (c < 0 || static_cast<std::size_t>(c) >= m.shape()[1])
      throw ShapeError("pick_per_row: column index out of range");
    out.at(i, 0) = m.at(i, static_cast<std::size_t>(c));
  }
  return out;
}

inline Tensor sum_all(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::ensure_finite(out, "sum_all");
  return out;
}

}  // namespace pke
