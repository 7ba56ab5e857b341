#pragma once

// Generalized d-spherical coordinates.
//
//   x_1 = r cos a_1
//   x_k = r sin a_1 ... sin a_{k-1} cos a_k      (k < d)
//   x_d = r sin a_1 ... sin a_{d-1}
//
// with a_k in [0, pi] for k < d-1 and a_{d-1} in [0, 2 pi]. In code the angles
// are 0-based: theta[0..d-2].

#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "starflow/error.hpp"
#include "starflow/linalg.hpp"
#include "starflow/scalar.hpp"

namespace starflow {

// Critical angles are offset by this much so that sin(a_k) stays away from 0.
inline constexpr double kAngleEpsilon = 1e-6;

enum class AngleDomain {
  full,              // [0,pi]^{d-2} x [0,2pi]
  positive_orthant,  // [0,pi/2]^{d-1}
};

// Upper end of the interval for angle k out of n angles.
inline double angle_upper(AngleDomain domain, std::size_t k, std::size_t n) {
  if (domain == AngleDomain::positive_orthant) return 0.5 * kPi;
  return k + 1 == n ? kTwoPi : kPi;
}

template <class T>
struct AngleVector {
  std::vector<T> theta;
  AngleDomain domain = AngleDomain::full;

  std::size_t dim() const { return theta.size() + 1; }
};

template <class T>
struct SphericalPoint {
  AngleVector<T> angles;
  T radius{1.0};

  std::size_t dim() const { return angles.dim(); }
};

template <class T>
struct CartesianPoint {
  std::vector<T> x;

  std::size_t dim() const { return x.size(); }
};

// A log-magnitude that may be flagged singular (a factor is exactly zero).
template <class T>
struct LogValue {
  T value{0.0};
  bool singular = false;
};

template <class T>
struct SignedLogDet {
  T log_abs{0.0};
  int sign = 1;
  bool singular = false;
};

inline void validate_angles(const AngleVector<double>& a, double tol = 1e-12) {
  const std::size_t n = a.theta.size();
  if (n == 0) throw InvalidArgument("angle vector must have at least one angle (d >= 2)");
  for (std::size_t k = 0; k < n; ++k) {
    const double hi = angle_upper(a.domain, k, n);
    const double v = a.theta[k];
    if (!std::isfinite(v) || v < -tol || v > hi + tol) {
      throw InvalidArgument("angle " + std::to_string(k) + " = " + std::to_string(v) +
                            " outside [0, " + std::to_string(hi) + "]");
    }
  }
}

// Clamps every angle into [eps, upper - eps]. Clamped Var entries become constants.
template <class T>
AngleVector<T> clamp_angles(const AngleVector<T>& a, double eps = kAngleEpsilon) {
  AngleVector<T> out = a;
  const std::size_t n = a.theta.size();
  for (std::size_t k = 0; k < n; ++k) {
    const double hi = angle_upper(a.domain, k, n) - eps;
    const double v = value_of(a.theta[k]);
    if (v < eps) out.theta[k] = T(eps);
    else if (v > hi) out.theta[k] = T(hi);
  }
  return out;
}

// Unit-sphere image u(theta); x = r u.
template <class T>
std::vector<T> unit_cartesian(std::span<const T> theta) {
  const std::size_t d = theta.size() + 1;
  std::vector<T> u(d);
  T prefix(1.0);
  for (std::size_t k = 0; k + 1 < d; ++k) {
    u[k] = prefix * cos(theta[k]);
    prefix = prefix * sin(theta[k]);
  }
  u[d - 1] = prefix;
  return u;
}

template <class T>
CartesianPoint<T> to_cartesian(const SphericalPoint<T>& p) {
  std::vector<T> u = unit_cartesian<T>(p.angles.theta);
  for (auto& v : u) v = p.radius * v;
  return {std::move(u)};
}

// Inverse of to_cartesian. When the trailing coordinates after position k are
// all zero the remaining angles are set to 0.
inline SphericalPoint<double> to_spherical(const CartesianPoint<double>& c,
                                           AngleDomain domain = AngleDomain::full) {
  const std::size_t d = c.x.size();
  if (d < 2) throw InvalidArgument("to_spherical: dimension must be >= 2");
  // tail[k] = ||x_k..x_{d-1}||
  std::vector<double> tail(d + 1, 0.0);
  for (std::size_t k = d; k-- > 0;) tail[k] = std::hypot(c.x[k], tail[k + 1]);
  const double r = tail[0];
  if (!(r > 0.0)) throw InvalidArgument("to_spherical: x = 0 has no spherical coordinates");
  SphericalPoint<double> p;
  p.radius = r;
  p.angles.domain = domain;
  p.angles.theta.assign(d - 1, 0.0);
  for (std::size_t k = 0; k + 2 < d; ++k) {
    if (tail[k + 1] == 0.0) {
      // Singular set: angles past this point are conventionally zero, except
      // that a_k itself still encodes the sign of x_k.
      p.angles.theta[k] = c.x[k] >= 0.0 ? 0.0 : kPi;
      return p;
    }
    p.angles.theta[k] = std::atan2(tail[k + 1], c.x[k]);
  }
  double last = std::atan2(c.x[d - 1], c.x[d - 2]);
  if (last < 0.0) last += kTwoPi;
  p.angles.theta[d - 2] = last;
  return p;
}

// log|det J_{s->c}| = (d-1) log r + sum_{k=1}^{d-2} (d-k-1) log sin a_k,
// sign (-1)^{d-1}.
template <class T>
SignedLogDet<T> log_abs_det_sc(const SphericalPoint<T>& p) {
  const std::size_t d = p.dim();
  SignedLogDet<T> out;
  out.sign = (d - 1) % 2 == 0 ? 1 : -1;
  if (!(value_of(p.radius) > 0.0)) throw InvalidArgument("log_abs_det_sc: radius must be > 0");
  T acc = static_cast<double>(d - 1) * log(p.radius);
  for (std::size_t k = 0; k + 2 < d; ++k) {
    const T s = sin(p.angles.theta[k]);
    const double sv = value_of(s);
    if (sv == 0.0) {
      out.singular = true;
      out.log_abs = T(-std::numeric_limits<double>::infinity());
      return out;
    }
    acc += static_cast<double>(d - k - 2) * log(abs(s));
  }
  out.log_abs = acc;
  return out;
}

// J_{s->c}^T: row k < d-1 is dx/da_k, row d-1 is dx/dr. Row k has zeros in
// columns < k; the last row is dense.
template <class T>
Matrix<T> jacobian_sc_transpose(const SphericalPoint<T>& p) {
  const std::size_t d = p.dim();
  const auto& th = p.angles.theta;
  std::vector<T> s(d - 1), c(d - 1);
  for (std::size_t k = 0; k + 1 < d; ++k) {
    s[k] = sin(th[k]);
    c[k] = cos(th[k]);
  }
  Matrix<T> jt(d, d);
  // q = r * prod_{m<k} s_m, carried along the rows.
  T q = p.radius;
  T unit_prefix(1.0);
  for (std::size_t k = 0; k + 1 < d; ++k) {
    jt(k, k) = -(q * s[k]);
    T run = q * c[k];
    for (std::size_t j = k + 1; j + 1 < d; ++j) {
      jt(k, j) = run * c[j];
      run = run * s[j];
    }
    jt(k, d - 1) = run;
    jt(d - 1, k) = unit_prefix * c[k];
    unit_prefix = unit_prefix * s[k];
    q = q * s[k];
  }
  jt(d - 1, d - 1) = unit_prefix;
  return jt;
}

// log(surface area of the unit (d-1)-sphere) = log(2 pi^{d/2} / Gamma(d/2)).
inline double log_unit_sphere_area(std::size_t d) {
  const double h = 0.5 * static_cast<double>(d);
  return std::log(2.0) + h * std::log(kPi) - std::lgamma(h);
}

// Density of the angles of a uniform point on S^{d-1} (or on its positive
// orthant): prod_k sin^{d-k-1} a_k / Z.
template <class T>
LogValue<T> angle_log_density_uniform_sphere(const AngleVector<T>& a) {
  const std::size_t d = a.dim();
  LogValue<T> out;
  double norm = -log_unit_sphere_area(d);
  if (a.domain == AngleDomain::positive_orthant) norm += static_cast<double>(d) * std::log(2.0);
  T acc(norm);
  for (std::size_t k = 0; k + 2 < d; ++k) {
    const T s = sin(a.theta[k]);
    if (value_of(s) == 0.0) {
      out.singular = true;
      out.value = T(-std::numeric_limits<double>::infinity());
      return out;
    }
    acc += static_cast<double>(d - k - 2) * log(abs(s));
  }
  out.value = acc;
  return out;
}

// Uniform points on S^{d-1} via normalized Gaussians. The orthant variant
// folds every coordinate to be non-negative.
template <class Rng>
std::vector<AngleVector<double>> sample_uniform_angles(std::size_t d, std::size_t n, Rng& rng,
                                                       AngleDomain domain = AngleDomain::full) {
  if (d < 2) throw InvalidArgument("sample_uniform_angles: d must be >= 2");
  if (n < 1) throw InvalidArgument("sample_uniform_angles: n must be >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<AngleVector<double>> out;
  out.reserve(n);
  CartesianPoint<double> g{std::vector<double>(d)};
  while (out.size() < n) {
    for (auto& v : g.x) {
      v = normal(rng);
      if (domain == AngleDomain::positive_orthant) v = std::fabs(v);
    }
    double nn = 0.0;
    for (double v : g.x) nn += v * v;
    if (nn == 0.0) continue;
    out.push_back(to_spherical(g, domain).angles);
  }
  return out;
}

}  // namespace starflow
