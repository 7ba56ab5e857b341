#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <algorithm>
#include <vector>

#include "starflow/error.hpp"
#include "starflow/scalar.hpp"

namespace starflow {

// Dense row-major matrix. Small on purpose: the library only needs assembly,
// products, Householder QR and Cholesky.
template <class T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0.0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  const std::vector<T>& data() const { return data_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <class T>
Matrix<double> values_of(const Matrix<T>& m) {
  Matrix<double> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = value_of(m(i, j));
  return out;
}

// A^T A.
template <class T>
Matrix<T> gram(const Matrix<T>& a) {
  const std::size_t n = a.cols();
  Matrix<T> g(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      T s(0.0);
      for (std::size_t k = 0; k < a.rows(); ++k) s += a(k, i) * a(k, j);
      g(i, j) = s;
      g(j, i) = s;
    }
  }
  return g;
}

// Lower Cholesky factor of a symmetric positive definite matrix.
template <class T>
Matrix<T> cholesky(const Matrix<T>& a) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw InvalidArgument("cholesky: matrix is not square");
  Matrix<T> l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    T diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(value_of(diag) > 0.0)) {
      throw SingularError("cholesky: matrix is not positive definite");
    }
    const T ljj = sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      T s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

// Solves (L L^T) x = b given the lower factor.
inline std::vector<double> cholesky_solve(const Matrix<double>& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  std::vector<double> x(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) x[i] -= l(i, k) * x[k];
    x[i] /= l(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) x[i] -= l(k, i) * x[k];
    x[i] /= l(i, i);
  }
  return x;
}

// R factor (n x n, upper) of the Householder QR of a tall m x n matrix, so
// that R^T R = A^T A without forming the Gram matrix. Diagonal signs follow
// the reflector convention and are not normalized.
template <class T>
Matrix<T> householder_r(Matrix<T> a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (m < n) throw InvalidArgument("householder_r: matrix must have rows >= cols");
  Matrix<T> r(n, n);
  std::vector<T> v(m);
  for (std::size_t k = 0; k < n; ++k) {
    double mx = 0.0;
    for (std::size_t i = k; i < m; ++i) mx = std::max(mx, std::fabs(value_of(a(i, k))));
    if (mx == 0.0) throw SingularError("householder_r: rank-deficient column " + std::to_string(k));
    T nrm2(0.0);
    for (std::size_t i = k; i < m; ++i) {
      const T z = a(i, k) / mx;
      nrm2 += z * z;
    }
    const T nrm = mx * sqrt(nrm2);
    const T alpha = value_of(a(k, k)) > 0.0 ? -nrm : nrm;
    for (std::size_t i = k; i < m; ++i) v[i] = a(i, k);
    v[k] -= alpha;
    T vn(0.0);
    for (std::size_t i = k; i < m; ++i) vn += v[i] * v[i];
    r(k, k) = alpha;
    for (std::size_t j = k + 1; j < n; ++j) {
      T dot(0.0);
      for (std::size_t i = k; i < m; ++i) dot += v[i] * a(i, j);
      const T f = 2.0 * dot / vn;
      for (std::size_t i = k; i < m; ++i) a(i, j) -= f * v[i];
      r(k, j) = a(k, j);
    }
  }
  return r;
}

// Solves (R^T R) x = b for an upper triangular R.
inline std::vector<double> normal_solve(const Matrix<double>& r, std::span<const double> b) {
  const std::size_t n = r.rows();
  std::vector<double> x(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) x[i] -= r(k, i) * x[k];
    x[i] /= r(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) x[i] -= r(i, k) * x[k];
    x[i] /= r(i, i);
  }
  return x;
}

template <class T>
std::vector<T> matvec(const Matrix<T>& a, std::span<const T> x) {
  std::vector<T> y(a.rows(), T(0.0));
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T s(0.0);
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<double>& b) {
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: shape mismatch");
  Matrix<T> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      T s(0.0);
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace starflow
