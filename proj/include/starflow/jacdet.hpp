#pragma once

// Volume change of the injective map  theta -> x = T_sc(theta, r(theta)).
//
// The exact O(d^2) route factorizes the Gram determinant as
//
//   sqrt(det(J^T J)) = |det J_sc| * || J_sc^{-T} y ||_2,   y = [-grad r, 1],
//
// where J_sc^T is upper triangular except for its dense last row, so the
// solve is a single elimination sweep followed by back substitution. The
// O(d^3) oracle factorizes J^T J through a dense QR of J.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <span>
#include <vector>

#include "starflow/error.hpp"
#include "starflow/linalg.hpp"
#include "starflow/manifolds.hpp"
#include "starflow/scalar.hpp"
#include "starflow/spherical.hpp"

namespace starflow {

template <class T>
struct JacDetResult {
  T log_abs{0.0};
  int sign = 1;
  T log_det_T_theta{0.0};
  T log_det_sc{0.0};
  T log_norm_solve{0.0};
};

// y = [-grad r(theta), 1].
template <class T>
struct NullVector {
  std::vector<T> y;

  static NullVector from_gradient(std::span<const T> grad) {
    NullVector n;
    n.y.reserve(grad.size() + 1);
    for (const auto& g : grad) n.y.push_back(-g);
    n.y.push_back(T(1.0));
    return n;
  }
};

// Counts multiply-add style operations of the structured solve.
struct FlopCounter {
  std::uint64_t flops = 0;
};

// Solves Jt w = y for the almost-triangular J_sc^T. The dense last row is
// eliminated column by column against the upper-triangular top block; at each
// column the larger of the two candidate pivots (row i or the running last
// row) is kept in row i. That exchange never touches columns < i, so the
// triangular shape and the O(d^2) cost are preserved. It also covers the
// vanishing diagonal at a_{d-1} = pi, where the block is a scaled rotation.
// Takes the matrix by value: callers that no longer need it move it in.
template <class T>
std::vector<T> solve_almost_triangular(Matrix<T> m, std::span<const T> y, FlopCounter* counter = nullptr) {
  const std::size_t d = m.rows();
  if (d < 2 || m.cols() != d || y.size() != d) {
    throw InvalidArgument("solve_almost_triangular: expected a square d x d system, d >= 2");
  }
  std::uint64_t flops = 0;
  std::vector<T> rhs(y.begin(), y.end());
  const std::size_t last = d - 1;
  for (std::size_t i = 0; i < last; ++i) {
    if (std::fabs(value_of(m(last, i))) > std::fabs(value_of(m(i, i)))) {
      for (std::size_t j = i; j < d; ++j) std::swap(m(i, j), m(last, j));
      std::swap(rhs[i], rhs[last]);
    }
    if (value_of(m(i, i)) == 0.0) {
      throw SingularError("solve_almost_triangular: singular system (zero pivot in column " +
                          std::to_string(i) + ")");
    }
    if constexpr (std::is_same_v<T, double>) {
      if (m(last, i) == 0.0) continue;
    }
    const T f = m(last, i) / m(i, i);
    for (std::size_t j = i + 1; j < d; ++j) m(last, j) -= f * m(i, j);
    m(last, i) = T(0.0);
    rhs[last] -= f * rhs[i];
    flops += 2 * (d - i);
  }
  if (value_of(m(last, last)) == 0.0) {
    throw SingularError("solve_almost_triangular: singular system (zero final pivot)");
  }
  std::vector<T> w(d);
  for (std::size_t i = d; i-- > 0;) {
    T acc = rhs[i];
    for (std::size_t j = i + 1; j < d; ++j) acc -= m(i, j) * w[j];
    w[i] = acc / m(i, i);
    flops += 2 * (d - i);
  }
  if (counter != nullptr) counter->flops += flops;
  return w;
}

// log ||w||_2 with the largest magnitude factored out.
template <class T>
T log_norm2(std::span<const T> w) {
  double m = 0.0;
  for (const auto& v : w) m = std::max(m, std::fabs(value_of(v)));
  if (m == 0.0) throw SingularError("log_norm2: zero vector");
  T s(0.0);
  for (const auto& v : w) {
    const T z = v / m;
    s += z * z;
  }
  return std::log(m) + 0.5 * log(s);
}

template <class T>
void require_interior(const AngleVector<T>& theta) {
  const std::size_t n = theta.theta.size();
  if (n == 0) throw InvalidArgument("angle vector must have at least one angle (d >= 2)");
  for (std::size_t k = 0; k < n; ++k) {
    const double v = value_of(theta.theta[k]);
    const double hi = angle_upper(theta.domain, k, n);
    if (!(v > 0.0 && v < hi)) {
      throw InvalidArgument("angle " + std::to_string(k) + " is not interior");
    }
  }
}

// Exact log-volume of the full map: log det J_{T_theta} + log|det J_sc| + log||J_sc^{-T} y||.
template <class T>
JacDetResult<T> fast_log_det(const AngleVector<T>& theta, const RadiusField& field,
                             const T& log_det_T_theta, FlopCounter* counter = nullptr) {
  require_interior(theta);
  const std::span<const T> th(theta.theta);
  SphericalPoint<T> p{theta, field.radius<T>(th)};
  const auto grad = field.gradient<T>(th);
  const auto null = NullVector<T>::from_gradient(grad);
  const std::vector<T> w = solve_almost_triangular<T>(jacobian_sc_transpose(p), null.y, counter);
  const auto sc = log_abs_det_sc(p);
  if (sc.singular) throw SingularError("fast_log_det: spherical Jacobian is singular");

  JacDetResult<T> out;
  out.log_det_T_theta = log_det_T_theta;
  out.log_det_sc = sc.log_abs;
  out.log_norm_solve = log_norm2<T>(w);
  out.sign = sc.sign;
  out.log_abs = out.log_det_T_theta + out.log_det_sc + out.log_norm_solve;
  return out;
}

template <class T>
JacDetResult<T> fast_log_det(const AngleVector<T>& theta, const RadiusField& field) {
  return fast_log_det<T>(theta, field, T(0.0));
}

// Rectangular Jacobian (d x (d-1)) of theta -> T_sc(theta, r(theta)):
// column i = dx/da_i + (dr/da_i) dx/dr.
template <class T>
Matrix<T> embedding_jacobian(const AngleVector<T>& theta, const RadiusField& field) {
  const std::span<const T> th(theta.theta);
  SphericalPoint<T> p{theta, field.radius<T>(th)};
  const auto grad = field.gradient<T>(th);
  const Matrix<T> jt = jacobian_sc_transpose(p);
  const std::size_t d = theta.dim();
  Matrix<T> j(d, d - 1);
  for (std::size_t i = 0; i + 1 < d; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      // jt(i, k) is structurally zero for k < i.
      j(k, i) = k < i ? grad[i] * jt(d - 1, k) : jt(i, k) + grad[i] * jt(d - 1, k);
    }
  return j;
}

// Same Jacobian by central finite differences of the embedding (double only).
inline Matrix<double> embedding_jacobian_fd(const AngleVector<double>& theta,
                                            const RadiusField& field, double h = 1e-6) {
  const std::size_t d = theta.dim();
  Matrix<double> j(d, d - 1);
  auto embed = [&](const AngleVector<double>& a) {
    return to_cartesian(SphericalPoint<double>{a, field.radius<double>(a.theta)}).x;
  };
  for (std::size_t i = 0; i + 1 < d; ++i) {
    AngleVector<double> plus = theta, minus = theta;
    plus.theta[i] += h;
    minus.theta[i] -= h;
    const auto xp = embed(plus);
    const auto xm = embed(minus);
    for (std::size_t k = 0; k < d; ++k) j(k, i) = (xp[k] - xm[k]) / (2.0 * h);
  }
  return j;
}

enum class OracleJacobian { analytic, finite_difference };

// How det(J^T J) is factorized: Householder QR of J (R^T R = J^T J, default)
// or Cholesky of the explicitly formed Gram matrix. The Gram route squares
// the condition number and loses digits when columns are nearly parallel.
enum class OracleFactorization { householder_qr, gram_cholesky };

// Brute-force 1/2 log det(J^T J), optionally for the map composed with a
// preceding bijection whose (d-1)x(d-1) Jacobian is `pre`. O(d^3).
template <class T>
T oracle_log_det(const AngleVector<T>& theta, const RadiusField& field,
                 const Matrix<double>* pre = nullptr,
                 OracleJacobian mode = OracleJacobian::analytic,
                 OracleFactorization factorization = OracleFactorization::householder_qr) {
  require_interior(theta);
  Matrix<T> j;
  if (mode == OracleJacobian::finite_difference) {
    if constexpr (std::is_same_v<T, double>) {
      j = embedding_jacobian_fd(theta, field);
    } else {
      throw InvalidArgument("oracle_log_det: finite-difference mode is double only");
    }
  } else {
    j = embedding_jacobian(theta, field);
  }
  if (pre != nullptr) j = matmul(j, *pre);
  T acc(0.0);
  if (factorization == OracleFactorization::gram_cholesky) {
    const Matrix<T> l = cholesky(gram(j));
    for (std::size_t i = 0; i < l.rows(); ++i) acc += log(l(i, i));
  } else {
    const Matrix<T> r = householder_r(std::move(j));
    for (std::size_t i = 0; i < r.rows(); ++i) acc += log(abs(r(i, i)));
  }
  return acc;
}

// Tape surrogate whose gradient with respect to theta is the Hutchinson
// estimate of grad 1/2 log det(J^T J):  mean_v 1/2 v^T G^{-1} dG v.
// Probes are standard Gaussian; with `orthogonal` they are Gram-Schmidt
// orthogonalized and rescaled to norm sqrt(d-1).
template <class Rng>
ad::Var hutchinson_surrogate(const AngleVector<ad::Var>& theta, const RadiusField& field,
                             std::size_t n_samples, Rng& rng, bool orthogonal = false) {
  const std::size_t m = theta.theta.size();
  if (n_samples < 1 || n_samples > m) {
    throw InvalidArgument("hutchinson: number of probes must be in [1, d-1]");
  }
  const Matrix<ad::Var> j = embedding_jacobian(theta, field);
  const Matrix<double> rf = householder_r(values_of(j));

  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> probes(n_samples, std::vector<double>(m));
  for (auto& v : probes)
    for (auto& e : v) e = normal(rng);
  if (orthogonal) {
    for (std::size_t a = 0; a < n_samples; ++a) {
      for (std::size_t b = 0; b < a; ++b) {
        double dot = 0.0;
        for (std::size_t k = 0; k < m; ++k) dot += probes[a][k] * probes[b][k];
        for (std::size_t k = 0; k < m; ++k) probes[a][k] -= dot * probes[b][k];
      }
      double nn = 0.0;
      for (double e : probes[a]) nn += e * e;
      const double inv = 1.0 / std::sqrt(nn);
      for (auto& e : probes[a]) e *= inv;
    }
    const double scale = std::sqrt(static_cast<double>(m));
    for (auto& v : probes)
      for (auto& e : v) e *= scale;
  }

  ad::Var total(0.0);
  const std::size_t d = m + 1;
  for (const auto& v : probes) {
    const std::vector<double> u = normal_solve(rf, v);
    ad::Var dot(0.0);
    for (std::size_t k = 0; k < d; ++k) {
      ad::Var ju(0.0), jvk(0.0);
      for (std::size_t i = 0; i < m; ++i) {
        ju += j(k, i) * u[i];
        jvk += j(k, i) * v[i];
      }
      dot += ju * jvk;
    }
    total += dot;
  }
  return total * (0.5 / static_cast<double>(n_samples));
}

template <class Rng>
std::vector<double> hutchinson_grad_estimate(const AngleVector<double>& theta,
                                             const RadiusField& field, std::size_t n_samples,
                                             Rng& rng, bool orthogonal = false) {
  require_interior(theta);
  ad::Tape tape;
  AngleVector<ad::Var> th;
  th.domain = theta.domain;
  for (double v : theta.theta) th.theta.push_back(tape.variable(v));
  const ad::Var s = hutchinson_surrogate(th, field, n_samples, rng, orthogonal);
  const auto g = tape.backward(s);
  std::vector<double> out(th.theta.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = g[th.theta[k]];
  return out;
}

// Reference: tape gradient of the oracle with respect to theta.
inline std::vector<double> oracle_log_det_gradient(const AngleVector<double>& theta,
                                                   const RadiusField& field) {
  ad::Tape tape;
  AngleVector<ad::Var> th;
  th.domain = theta.domain;
  for (double v : theta.theta) th.theta.push_back(tape.variable(v));
  const ad::Var y = oracle_log_det(th, field);
  const auto g = tape.backward(y);
  std::vector<double> out(th.theta.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = g[th.theta[k]];
  return out;
}

}  // namespace starflow
