#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <string>
#include <vector>

#include "msplora/error.hpp"
#include "msplora/rng.hpp"

namespace msplora {

inline std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

/// Dense row-major matrix of doubles: the storage type for every weight,
/// activation and gradient in the library.
class Matrix {
 public:
  Matrix() = default;  // 0x0 placeholder, used e.g. for unallocated gradients

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " +
                       shape_string(rows, cols));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix gaussian(std::size_t rows, std::size_t cols, Rng& rng,
                         double stddev) {
    Matrix m(rows, cols);
    for (double& x : m.data_) x = stddev * rng.gaussian();
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) {
        throw ShapeError("from_rows: ragged rows (" + std::to_string(row.size()) +
                         " vs " + std::to_string(c) + " columns)");
      }
      std::size_t j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double& at(std::size_t i, std::size_t j) {
    if (i >= rows_ || j >= cols_) {
      throw ShapeError("index (" + std::to_string(i) + "," + std::to_string(j) +
                       ") out of range for " + shape());
    }
    return data_[i * cols_ + j];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void fill(double v) {
    for (double& x : data_) x = v;
  }

  Matrix& operator+=(const Matrix& o) {
    if (rows_ != o.rows_ || cols_ != o.cols_) {
      throw ShapeError("add: shape mismatch " + shape() + " vs " + o.shape());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double x : data_) s += x * x;
    return std::sqrt(s);
  }

  double squared_frobenius_norm() const {
    double s = 0.0;
    for (double x : data_) s += x * x;
    return s;
  }

  double max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::abs(x));
    return m;
  }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape() const { return shape_string(rows_, cols_); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// True when a and b have identical shape and identical bit patterns
// (distinguishes -0.0 from 0.0; used by determinism tests).
inline bool bit_identical(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  if (a.size() == 0) return true;
  return std::memcmp(a.data().data(), b.data().data(),
                     a.size() * sizeof(double)) == 0;
}

/// Matrix product a * b.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ: lhs is " + a.shape() +
                     ", rhs is " + b.shape());
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = &c.data()[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      const double* bp = &b.data()[p * m];
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

/// a * b^T without forming the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: width mismatch: lhs is " + a.shape() +
                     ", rhs is " + b.shape());
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = &a.data()[i * a.cols()];
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* bj = &b.data()[j * b.cols()];
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += ai[p] * bj[p];
      c(i, j) = s;
    }
  }
  return c;
}

/// a^T * b without forming the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: height mismatch: lhs is " + a.shape() +
                     ", rhs is " + b.shape());
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t p = 0; p < a.rows(); ++p) {
    const double* ap = &a.data()[p * a.cols()];
    const double* bp = &b.data()[p * b.cols()];
    for (std::size_t i = 0; i < a.cols(); ++i) {
      double* ci = &c.data()[i * b.cols()];
      const double aip = ap[i];
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  Matrix c = a;
  c += b;
  return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("sub: shape mismatch " + a.shape() + " vs " + b.shape());
  }
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  c *= s;
  return c;
}

// dst += s * src
inline void axpy(Matrix& dst, double s, const Matrix& src) {
  if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
    throw ShapeError("axpy: shape mismatch " + dst.shape() + " vs " + src.shape());
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += s * src.data()[i];
}

}  // namespace msplora
