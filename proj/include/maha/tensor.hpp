#pragma once

// Dense row-major matrices and the handful of kernels the attention stack is
// built from. Every differentiable kernel has a matching *_backward that
// returns the vector-Jacobian product for a given upstream gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "maha/errors.hpp"

namespace maha {

inline std::string shape_str(std::size_t rows, std::size_t cols) {
  std::ostringstream os;
  os << "(" << rows << "x" << cols << ")";
  return os.str();
}

/// A (rows x cols) real matrix stored row-major. Rows are tokens, columns
/// are features when the matrix holds a sequence.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " + shape_str(rows, cols));
    }
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0 || data_.size() != rows * cols) {
      throw ShapeError("matrix data of length " + std::to_string(data_.size()) +
                       " does not fill " + shape_str(rows, cols));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  /// Single-feature sequence.
  static Matrix column(std::initializer_list<double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::string shape() const { return shape_str(rows_, cols_); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }
  /// this += s * o
  Matrix& add_scaled(const Matrix& o, double s) {
    require_same_shape(o, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (!same_shape(o)) {
      throw ShapeError(std::string("operator ") + op + ": " + shape() + " vs " + o.shape());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

using SeqMatrix = Matrix;

inline Matrix zeros_like(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

inline void ensure_finite(const Matrix& m, const std::string& stage) {
  if (!m.all_finite()) throw EvaluationError("non-finite value produced in " + stage);
}

inline double frobenius_dot(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("frobenius_dot: " + a.shape() + " vs " + b.shape());
  double s = 0.0;
  const auto x = a.values();
  const auto y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double squared_norm(const Matrix& a) { return frobenius_dot(a, a); }

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("hadamard: " + a.shape() + " vs " + b.shape());
  Matrix out = a;
  auto o = out.values();
  const auto y = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= y[i];
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape() + " by " + b.shape());
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < crow.size(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: cannot multiply " + a.shape() + " by transpose of " + b.shape());
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < arow.size(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

/// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: cannot multiply transpose of " + a.shape() + " by " + b.shape());
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto arow = a.row(k);
    const auto brow = b.row(k);
    for (std::size_t i = 0; i < arow.size(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto crow = c.row(i);
      for (std::size_t j = 0; j < brow.size(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

struct MatmulGrad {
  Matrix da;
  Matrix db;
};

inline MatmulGrad matmul_backward(const Matrix& a, const Matrix& b, const Matrix& dc) {
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

/// Row-wise softmax with the row maximum subtracted first.
inline Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto in = m.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (double& v : o) v /= z;
  }
  return out;
}

/// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
inline Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
  Matrix dx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const auto yr = y.row(i);
    const auto gr = dy.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
    auto out = dx.row(i);
    for (std::size_t j = 0; j < yr.size(); ++j) out[j] = yr[j] * (gr[j] - dot);
  }
  return dx;
}

inline double sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline Matrix sigmoid(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v = sigmoid(v);
  return out;
}

/// y = sigmoid(x); returns dL/dx.
inline Matrix sigmoid_backward(const Matrix& y, const Matrix& dy) {
  Matrix dx = dy;
  auto d = dx.values();
  const auto s = y.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= s[i] * (1.0 - s[i]);
  return dx;
}

inline Matrix relu(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

/// x is the pre-activation.
inline Matrix relu_backward(const Matrix& x, const Matrix& dy) {
  Matrix dx = dy;
  auto d = dx.values();
  const auto in = x.values();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!(in[i] > 0.0)) d[i] = 0.0;
  return dx;
}

/// Adds a per-column bias to every row.
inline Matrix add_row_bias(Matrix m, std::span<const double> bias) {
  if (bias.size() != m.cols()) throw ShapeError("bias length does not match " + m.shape());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return m;
}

inline std::vector<double> column_sums(const Matrix& m) {
  std::vector<double> s(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) s[j] += r[j];
  }
  return s;
}

/// Convolution weights indexed (tap, input channel, output channel).
struct ConvKernel {
  std::size_t taps = 0;
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weights;

  ConvKernel() = default;
  ConvKernel(std::size_t k, std::size_t d_in, std::size_t d_out, double fill = 0.0)
      : taps(k), in(d_in), out(d_out), weights(k * d_in * d_out, fill) {
    if (k == 0 || d_in == 0 || d_out == 0) throw ShapeError("conv kernel dimensions must be positive");
  }

  double& at(std::size_t t, std::size_t i, std::size_t o) { return weights[(t * in + i) * out + o]; }
  double at(std::size_t t, std::size_t i, std::size_t o) const { return weights[(t * in + i) * out + o]; }

  /// Identity channel map on the centre tap, zeros elsewhere.
  static ConvKernel center_tap(std::size_t k, std::size_t d) {
    ConvKernel kernel(k, d, d);
    for (std::size_t c = 0; c < d; ++c) kernel.at(k / 2, c, c) = 1.0;
    return kernel;
  }

  bool same_shape(const ConvKernel& o) const noexcept {
    return taps == o.taps && in == o.in && out == o.out;
  }
};

inline std::size_t conv1d_output_length(std::size_t rows, std::size_t stride) {
  return stride == 1 ? rows : rows / stride;
}

namespace detail {

inline void check_conv_args(const Matrix& x, const ConvKernel& kernel, std::size_t stride,
                            std::size_t dilation) {
  if (kernel.taps % 2 == 0) {
    throw ConfigError("conv1d kernel size must be odd, got " + std::to_string(kernel.taps));
  }
  if (stride == 0 || dilation == 0) throw ConfigError("conv1d stride and dilation must be positive");
  if (x.cols() != kernel.in) {
    throw ShapeError("conv1d: input " + x.shape() + " has " + std::to_string(x.cols()) +
                     " channels, kernel expects " + std::to_string(kernel.in));
  }
  if (conv1d_output_length(x.rows(), stride) == 0) {
    throw ShapeError("conv1d: input " + x.shape() + " too short for stride " + std::to_string(stride));
  }
}

// Input row read by output row j through tap t, or -1 when it falls in padding.
inline std::ptrdiff_t conv_source(std::size_t j, std::size_t t, std::size_t half,
                                  std::size_t stride, std::size_t dilation, std::size_t rows) {
  const auto pos = static_cast<std::ptrdiff_t>(j * stride) +
                   (static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(half)) *
                       static_cast<std::ptrdiff_t>(dilation);
  return (pos < 0 || pos >= static_cast<std::ptrdiff_t>(rows)) ? -1 : pos;
}

}  // namespace detail

/// 1-D convolution over the token axis. Output row j is centred on input row
/// j*stride; taps falling outside the sequence read zeros. With stride > 1
/// only left padding is ever touched (the output length is rows/stride), with
/// stride 1 padding is symmetric and the length is preserved.
inline Matrix conv1d(const Matrix& x, const ConvKernel& kernel, std::size_t stride,
                     std::size_t dilation) {
  detail::check_conv_args(x, kernel, stride, dilation);
  const std::size_t half = (kernel.taps - 1) / 2;
  const std::size_t n_out = conv1d_output_length(x.rows(), stride);
  Matrix y(n_out, kernel.out);
  for (std::size_t j = 0; j < n_out; ++j) {
    auto yr = y.row(j);
    for (std::size_t t = 0; t < kernel.taps; ++t) {
      const auto src = detail::conv_source(j, t, half, stride, dilation, x.rows());
      if (src < 0) continue;
      const auto xr = x.row(static_cast<std::size_t>(src));
      for (std::size_t i = 0; i < kernel.in; ++i) {
        const double xv = xr[i];
        if (xv == 0.0) continue;
        const double* w = &kernel.weights[(t * kernel.in + i) * kernel.out];
        for (std::size_t o = 0; o < kernel.out; ++o) yr[o] += xv * w[o];
      }
    }
  }
  return y;
}

struct ConvGrad {
  Matrix dx;
  ConvKernel dkernel;
};

inline ConvGrad conv1d_backward(const Matrix& x, const ConvKernel& kernel, std::size_t stride,
                                std::size_t dilation, const Matrix& dy) {
  detail::check_conv_args(x, kernel, stride, dilation);
  const std::size_t half = (kernel.taps - 1) / 2;
  const std::size_t n_out = conv1d_output_length(x.rows(), stride);
  if (dy.rows() != n_out || dy.cols() != kernel.out) {
    throw ShapeError("conv1d_backward: upstream gradient " + dy.shape() + " expected " +
                     shape_str(n_out, kernel.out));
  }
  ConvGrad g{zeros_like(x), ConvKernel(kernel.taps, kernel.in, kernel.out)};
  for (std::size_t j = 0; j < n_out; ++j) {
    const auto gr = dy.row(j);
    for (std::size_t t = 0; t < kernel.taps; ++t) {
      const auto src = detail::conv_source(j, t, half, stride, dilation, x.rows());
      if (src < 0) continue;
      const auto xr = x.row(static_cast<std::size_t>(src));
      auto dxr = g.dx.row(static_cast<std::size_t>(src));
      for (std::size_t i = 0; i < kernel.in; ++i) {
        const double* w = &kernel.weights[(t * kernel.in + i) * kernel.out];
        double* dw = &g.dkernel.weights[(t * kernel.in + i) * kernel.out];
        double acc = 0.0;
        for (std::size_t o = 0; o < kernel.out; ++o) {
          acc += gr[o] * w[o];
          dw[o] += xr[i] * gr[o];
        }
        dxr[i] += acc;
      }
    }
  }
  return g;
}

/// Half-open input window [begin, end) pooled into output row i.
inline std::pair<std::size_t, std::size_t> pool_window(std::size_t i, std::size_t rows,
                                                       std::size_t n_out) {
  const std::size_t begin = (i * rows) / n_out;
  const std::size_t end = ((i + 1) * rows + n_out - 1) / n_out;
  return {begin, end};
}

/// Column-wise max over windows [floor(i*rows/n_out), ceil((i+1)*rows/n_out)).
inline Matrix adaptive_max_pool(const Matrix& x, std::size_t n_out) {
  if (n_out == 0 || n_out > x.rows()) {
    throw ShapeError("adaptive_max_pool: cannot pool " + x.shape() + " to " + std::to_string(n_out) +
                     " rows");
  }
  Matrix y(n_out, x.cols());
  for (std::size_t i = 0; i < n_out; ++i) {
    const auto [begin, end] = pool_window(i, x.rows(), n_out);
    auto yr = y.row(i);
    const auto first = x.row(begin);
    std::copy(first.begin(), first.end(), yr.begin());
    for (std::size_t r = begin + 1; r < end; ++r) {
      const auto xr = x.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) yr[c] = std::max(yr[c], xr[c]);
    }
  }
  return y;
}

/// Routes each output gradient to the first row attaining the window max.
inline Matrix adaptive_max_pool_backward(const Matrix& x, std::size_t n_out, const Matrix& dy) {
  if (dy.rows() != n_out || dy.cols() != x.cols()) {
    throw ShapeError("adaptive_max_pool_backward: gradient " + dy.shape() + " expected " +
                     shape_str(n_out, x.cols()));
  }
  Matrix dx = zeros_like(x);
  for (std::size_t i = 0; i < n_out; ++i) {
    const auto [begin, end] = pool_window(i, x.rows(), n_out);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      std::size_t arg = begin;
      for (std::size_t r = begin + 1; r < end; ++r)
        if (x(r, c) > x(arg, c)) arg = r;
      dx(arg, c) += dy(i, c);
    }
  }
  return dx;
}

/// Seeded generator shared by all initialisers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Entries drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Matrix init_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.uniform(-bound, bound);
  return m;
}

inline ConvKernel init_kernel(std::size_t k, std::size_t d_in, std::size_t d_out, Rng& rng) {
  ConvKernel kernel(k, d_in, d_out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(k * d_in));
  for (double& v : kernel.weights) v = rng.uniform(-bound, bound);
  return kernel;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.uniform(lo, hi);
  return m;
}

}  // namespace maha
