#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rarelens/errors.hpp"

namespace rarelens {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major tensor of 64-bit reals. Rank 0 is a scalar, rank 1 a
// vector, rank 2 a matrix; higher ranks are storage only (scene grids).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0), requires_grad_(requires_grad) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
    check_shape();
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}); }
  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix view: a vector is one row, a scalar is 1x1; rank > 2 folds
  // leading dimensions into rows.
  std::size_t rows() const noexcept {
    if (shape_.size() < 2) return 1;
    return data_.size() / shape_.back();
  }
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool v) noexcept { requires_grad_ = v; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }

  double item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_, requires_grad_); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (auto d : shape_)
      if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

namespace kernel {

// Scalar-order reference for edge tiles: c[i,j] += sum_p a[i,p] b[p,j],
// accumulated over p in increasing order.
inline void gemm_nn_edge(const double* a, const double* b, double* c, std::size_t i0, std::size_t i1,
                         std::size_t j0, std::size_t j1, std::size_t k, std::size_t n) {
  for (std::size_t i = i0; i < i1; ++i)
    for (std::size_t j = j0; j < j1; ++j) {
      double acc = c[i * n + j];
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
}

using v4d = double __attribute__((vector_size(32)));

[[gnu::always_inline]] inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
[[gnu::always_inline]] inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof v); }

// c[m,n] += a[m,k] * b[k,n]. Register tiles of 4x8 outputs; each c[i,j]
// accumulates over p in increasing order, so results do not depend on the
// tiling.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  const std::size_t mi = m - m % 4, nj = n - n % 8;
  for (std::size_t i = 0; i < mi; i += 4) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    double* c0 = c + i * n;
    for (std::size_t j = 0; j < nj; j += 8) {
      v4d r00 = load4(c0 + j), r01 = load4(c0 + j + 4);
      v4d r10 = load4(c0 + n + j), r11 = load4(c0 + n + j + 4);
      v4d r20 = load4(c0 + 2 * n + j), r21 = load4(c0 + 2 * n + j + 4);
      v4d r30 = load4(c0 + 3 * n + j), r31 = load4(c0 + 3 * n + j + 4);
      for (std::size_t p = 0; p < k; ++p) {
        const v4d b0 = load4(b + p * n + j), b1 = load4(b + p * n + j + 4);
        const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
        r00 += x0 * b0, r01 += x0 * b1;
        r10 += x1 * b0, r11 += x1 * b1;
        r20 += x2 * b0, r21 += x2 * b1;
        r30 += x3 * b0, r31 += x3 * b1;
      }
      store4(c0 + j, r00), store4(c0 + j + 4, r01);
      store4(c0 + n + j, r10), store4(c0 + n + j + 4, r11);
      store4(c0 + 2 * n + j, r20), store4(c0 + 2 * n + j + 4, r21);
      store4(c0 + 3 * n + j, r30), store4(c0 + 3 * n + j + 4, r31);
    }
    gemm_nn_edge(a, b, c, i, i + 4, nj, n, k, n);
  }
  gemm_nn_edge(a, b, c, mi, m, 0, n, k, n);
}

// c[m,n] += a[m,k] * b[n,k]^T, via a transposed copy of b.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// c[k,n] += a[m,k]^T * b[m,n], via a transposed copy of a.
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  std::vector<double> at(k * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  gemm_nn(at.data(), b, c, k, m, n);
}

}  // namespace kernel

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("dot of lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Cosine similarity clamped to [-1, 1].
inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw DegenerateVectorError("cosine of a zero-norm vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline double cosine(const Tensor& a, const Tensor& b) { return cosine(a.data(), b.data()); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c(Shape{a.rows(), b.cols()});
  kernel::gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.cols());
  return c;
}

// a * b^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    throw DimensionError("matmul_nt " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor c(Shape{a.rows(), b.rows()});
  kernel::gemm_nt(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.rows());
  return c;
}

inline Tensor transpose(const Tensor& a) {
  Tensor t(Shape{a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// Row-wise softmax with max subtraction. With `causal`, entry (i, j) is
// masked out when j > i + offset.
inline void softmax_row_inplace(std::span<double> row, std::size_t valid) {
  double mx = row[0];
  for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, row[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < valid; ++j) {
    row[j] = std::exp(row[j] - mx);
    s += row[j];
  }
  for (std::size_t j = 0; j < valid; ++j) row[j] /= s;
  for (std::size_t j = valid; j < row.size(); ++j) row[j] = 0.0;
}

inline Tensor softmax_rows(const Tensor& x, bool causal = false, std::size_t offset = 0) {
  Tensor y = x.rank() == 2 ? x : x.reshaped(Shape{x.rows(), x.cols()});
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const std::size_t valid = causal ? std::min(y.cols(), i + offset + 1) : y.cols();
    softmax_row_inplace(y.row(i), valid);
  }
  y.set_requires_grad(false);
  return y;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("sub " + shape_str(a.shape()) + " - " + shape_str(b.shape()));
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

// Round every entry to the nearest binary32 value. Artifacts are stored as
// f32, so trained parameters are snapped before use to make in-memory and
// reloaded state identical.
inline Tensor round_to_f32(const Tensor& a) {
  Tensor c = a;
  for (auto& v : c.data()) v = static_cast<double>(static_cast<float>(v));
  return c;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace rarelens
