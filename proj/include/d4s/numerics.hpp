#pragma once

// Dense row-major double-precision matrices and the handful of kernels the
// editing algebra needs. Every loop runs in a fixed order so results are
// reproducible bit-for-bit within a build.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "d4s/errors.hpp"

namespace d4s {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length does not match rows*cols");
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix column(std::span<const double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
  }

  static Matrix row(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row_span(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row_span(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

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
  Matrix& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }

  bool operator==(const Matrix& o) const = default;

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (!same_shape(o)) {
      std::ostringstream msg;
      msg << "shape mismatch in " << op << ": " << rows_ << "x" << cols_ << " vs "
          << o.rows_ << "x" << o.cols_;
      throw ShapeError(msg.str());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace detail

// Symmetric matrix expected to be positive definite. Only the upper triangle
// is read on construction and mirrored, so symmetry holds exactly.
class SymmetricPD {
 public:
  SymmetricPD() = default;
  explicit SymmetricPD(std::size_t dim) : m_(dim, dim) {}
  explicit SymmetricPD(const Matrix& m) : m_(m) {
    if (m.rows() != m.cols()) throw ShapeError("SymmetricPD requires a square matrix");
    for (std::size_t i = 0; i < dim(); ++i)
      for (std::size_t j = i + 1; j < dim(); ++j) m_(j, i) = m_(i, j);
  }

  static SymmetricPD identity(std::size_t n) { return SymmetricPD(Matrix::identity(n)); }

  std::size_t dim() const noexcept { return m_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return m_(i, j); }
  const Matrix& matrix() const noexcept { return m_; }

  // Adds a symmetric matrix, keeping exact symmetry.
  SymmetricPD plus(const Matrix& other) const {
    if (other.rows() != dim() || other.cols() != dim()) {
      throw ShapeError("SymmetricPD::plus shape mismatch");
    }
    Matrix sum(dim(), dim());
    for (std::size_t i = 0; i < dim(); ++i)
      for (std::size_t j = i; j < dim(); ++j) sum(i, j) = m_(i, j) + other(i, j);
    return SymmetricPD(sum);
  }

  bool operator==(const SymmetricPD& o) const = default;

 private:
  Matrix m_;
};

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// C = A B. Each C(i,j) accumulates A(i,k) B(k,j) for k = 0..n-1 in order.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + detail::shape_str(a) + " x " + detail::shape_str(b));
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.data().data() + i * m;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a(i, k);
      const double* bk = b.data().data() + k * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

// C = A B^T. Same per-entry summation order as matmul(A, transpose(B)).
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: " + detail::shape_str(a) + " x " + detail::shape_str(b) + "^T");
  }
  return matmul(a, transpose(b));
}

// C += A^T B, accumulating over rows of A and B in order.
inline void add_matmul_at(Matrix& c, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols()) {
    throw ShapeError("add_matmul_at: " + detail::shape_str(a) + "^T x " + detail::shape_str(b));
  }
  const std::size_t m = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* br = b.data().data() + r * m;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = a(r, i);
      if (ari == 0.0) continue;
      double* ci = c.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += ari * br[j];
    }
  }
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw ShapeError("matvec: length mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

// acc += scale * u v^T, in place.
inline Matrix& rank1_update(Matrix& acc, std::span<const double> u, std::span<const double> v,
                            double scale = 1.0) {
  if (acc.rows() != u.size() || acc.cols() != v.size()) {
    throw ShapeError("rank1_update: accumulator " + detail::shape_str(acc) + " vs u[" +
                     std::to_string(u.size()) + "], v[" + std::to_string(v.size()) + "]");
  }
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double su = scale * u[i];
    double* row = acc.data().data() + i * acc.cols();
    for (std::size_t j = 0; j < v.size(); ++j) row[j] += su * v[j];
  }
  return acc;
}

inline double l1_norm(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data()) s += std::abs(x);
  return s;
}

inline double max_abs(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data()) s = std::max(s, std::abs(x));
  return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s = std::max(s, std::abs(a.data()[i] - b.data()[i]));
  return s;
}

// Lower-triangular Cholesky factor L with A = L L^T.
inline Matrix cholesky(const SymmetricPD& a, double jitter = 0.0) {
  const std::size_t n = a.dim();
  Matrix l(n, n);
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i) + jitter));
  const double floor = 1e-14 * max_diag;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j) + jitter;
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > floor)) {
      std::ostringstream msg;
      msg << "matrix is not positive definite: leading minor " << (j + 1) << " of " << n
          << " has pivot " << d;
      throw SingularityError(msg.str(), j + 1);
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

// Solves X A = RHS for X. A is symmetric, so each row x of X satisfies
// A x^T = rhs^T, handled with one forward and one backward substitution.
// jitter adds jitter*I to A and is off unless the caller asks for it.
inline Matrix solve_spd(const SymmetricPD& a, const Matrix& rhs, double jitter = 0.0) {
  if (a.dim() != rhs.cols()) {
    throw ShapeError("solve_spd: A is " + std::to_string(a.dim()) + "x" +
                     std::to_string(a.dim()) + " but RHS is " + detail::shape_str(rhs));
  }
  const Matrix l = cholesky(a, jitter);
  const std::size_t n = a.dim();
  Matrix x(rhs.rows(), n);
  Vector y(n);
  for (std::size_t r = 0; r < rhs.rows(); ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = rhs(r, i);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
      y[i] = s / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(r, k);
      x(r, ii) = s / l(ii, ii);
    }
  }
  return x;
}

inline SymmetricPD inverse_spd(const SymmetricPD& a) {
  return SymmetricPD(solve_spd(a, Matrix::identity(a.dim())));
}

enum class Extreme { max, min };

// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
inline Vector symmetric_eigenvalues(const SymmetricPD& a, std::size_t max_sweeps = 100) {
  const std::size_t n = a.dim();
  if (n == 0) throw ShapeError("eigenvalues of an empty matrix");
  Matrix m = a.matrix();
  double scale = 0.0;
  for (double x : m.data()) scale += x * x;
  scale = std::sqrt(scale);
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * m(i, j) * m(i, j);
    return std::sqrt(s);
  };
  double off = off_norm();
  std::size_t sweep = 0;
  while (off > 1e-15 * scale && off > 0.0) {
    if (sweep++ >= max_sweeps) {
      throw ConvergenceError("Jacobi eigenvalue iteration did not converge; off-diagonal norm " +
                                 std::to_string(off),
                             off);
    }
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m(p, q);
        if (apq == 0.0) continue;
        const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double mkp = m(k, p);
          const double mkq = m(k, q);
          m(k, p) = c * mkp - s * mkq;
          m(k, q) = s * mkp + c * mkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double mpk = m(p, k);
          const double mqk = m(q, k);
          m(p, k) = c * mpk - s * mqk;
          m(q, k) = s * mpk + c * mqk;
        }
        m(p, q) = 0.0;
        m(q, p) = 0.0;
      }
    }
    off = off_norm();
  }
  Vector eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = m(i, i);
  std::sort(eig.begin(), eig.end());
  return eig;
}

inline double extreme_eigenvalue(const SymmetricPD& a, Extreme which,
                                 std::size_t max_sweeps = 100) {
  const Vector eig = symmetric_eigenvalues(a, max_sweeps);
  return which == Extreme::max ? eig.back() : eig.front();
}

}  // namespace d4s
