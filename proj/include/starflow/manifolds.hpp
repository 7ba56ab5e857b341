#pragma once

// Star-like manifolds given by a radius function over the spherical angles.
// Each field provides r(theta) and its gradient; the gradient is written in
// closed form (O(d)) and is itself differentiable on a tape.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "starflow/ad.hpp"
#include "starflow/error.hpp"
#include "starflow/scalar.hpp"
#include "starflow/spherical.hpp"

namespace starflow {

struct SphereShape {
  double c = 1.0;
};

// { x : ||x||_p = t }, p > 0 (pseudo-norm for p < 1).
struct LpBallShape {
  double p = 2.0;
  double t = 1.0;
};

// { x : x_i >= 0, sum x_i = 1 }.
struct SimplexShape {};

// r = 1 + a sin(m a_1) sin(m a_2)  (only the first factor for d = 2).
struct DeformedShape {
  double amplitude = 0.2;
  double frequency = 3.0;
};

namespace detail {

template <class T>
std::vector<T> sines(std::span<const T> th) {
  std::vector<T> s(th.size());
  for (std::size_t k = 0; k < th.size(); ++k) s[k] = sin(th[k]);
  return s;
}

template <class T>
std::vector<T> cosines(std::span<const T> th) {
  std::vector<T> c(th.size());
  for (std::size_t k = 0; k < th.size(); ++k) c[k] = cos(th[k]);
  return c;
}

}  // namespace detail

template <class T>
T radius_sphere(std::span<const T> /*theta*/, double c) {
  if (!(c > 0.0)) throw InvalidArgument("radius_sphere: c must be > 0");
  return T(c);
}

// r = t / ||u(theta)||_p, evaluated as t / (m * (sum (|u_j|/m)^p)^{1/p}) with
// m = max |u_j| so that no power of a small base is formed.
template <class T>
T radius_lp(std::span<const T> theta, double p, double t) {
  if (!(p > 0.0)) throw InvalidArgument("radius_lp: p must be > 0");
  if (!(t > 0.0)) throw InvalidArgument("radius_lp: t must be > 0");
  std::vector<T> u = unit_cartesian<T>(theta);
  std::size_t arg = 0;
  for (std::size_t j = 1; j < u.size(); ++j)
    if (std::fabs(value_of(u[j])) > std::fabs(value_of(u[arg]))) arg = j;
  const T m = abs(u[arg]);
  T sum(0.0);
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (j == arg) {
      sum += 1.0;
      continue;
    }
    if (value_of(u[j]) == 0.0) continue;
    sum += pow_c(abs(u[j]) / m, p);
  }
  return t / (m * pow_c(sum, 1.0 / p));
}

template <class T>
T radius_simplex(std::span<const T> theta) {
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double v = value_of(theta[k]);
    if (v < -1e-12 || v > 0.5 * kPi + 1e-12) {
      throw InvalidArgument("radius_simplex: angle " + std::to_string(k) +
                            " outside the positive orthant [0, pi/2]");
    }
  }
  // D = c_0 + s_0 (c_1 + s_1 (... (c_{n-1} + s_{n-1}))) = sum_j u_j
  const std::size_t n = theta.size();
  T acc(1.0);
  for (std::size_t k = n; k-- > 0;) acc = cos(theta[k]) + sin(theta[k]) * acc;
  return T(1.0) / acc;
}

template <class T>
T radius_deformed(std::span<const T> theta, double amplitude, double frequency) {
  if (!(std::fabs(amplitude) < 1.0)) {
    throw InvalidArgument("radius_deformed: |amplitude| must be < 1");
  }
  T f = sin(frequency * theta[0]);
  if (theta.size() >= 2) f = f * sin(frequency * theta[1]);
  return T(1.0) + amplitude * f;
}

class RadiusField {
 public:
  using Kind = std::variant<SphereShape, LpBallShape, SimplexShape, DeformedShape>;

  RadiusField() : kind_(SphereShape{}) {}
  explicit RadiusField(Kind kind) : kind_(kind) { validate(); }

  static RadiusField sphere(double c = 1.0) { return RadiusField(SphereShape{c}); }
  static RadiusField lp_ball(double p, double t = 1.0) { return RadiusField(LpBallShape{p, t}); }
  static RadiusField simplex() { return RadiusField(SimplexShape{}); }
  static RadiusField deformed(double amplitude = 0.2, double frequency = 3.0) {
    return RadiusField(DeformedShape{amplitude, frequency});
  }

  const Kind& kind() const { return kind_; }

  std::string name() const {
    return std::visit(
        [](const auto& k) -> std::string {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, SphereShape>) return "sphere";
          else if constexpr (std::is_same_v<K, LpBallShape>) return "lp_ball";
          else if constexpr (std::is_same_v<K, SimplexShape>) return "simplex";
          else return "deformed";
        },
        kind_);
  }

  AngleDomain domain() const {
    return std::holds_alternative<SimplexShape>(kind_) ? AngleDomain::positive_orthant
                                                      : AngleDomain::full;
  }

  template <class T>
  T radius(std::span<const T> theta) const {
    return std::visit(
        [&](const auto& k) -> T {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, SphereShape>) return radius_sphere<T>(theta, k.c);
          else if constexpr (std::is_same_v<K, LpBallShape>) return radius_lp<T>(theta, k.p, k.t);
          else if constexpr (std::is_same_v<K, SimplexShape>) return radius_simplex<T>(theta);
          else return radius_deformed<T>(theta, k.amplitude, k.frequency);
        },
        kind_);
  }

  // Closed-form gradient of r with respect to theta.
  template <class T>
  std::vector<T> gradient(std::span<const T> theta) const;

  // Residual of the defining constraint at a Cartesian point; 0 on the manifold.
  double constraint_residual(std::span<const double> x) const;

 private:
  void validate() const {
    std::visit(
        [](const auto& k) {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, SphereShape>) {
            if (!(k.c > 0.0)) throw InvalidArgument("sphere: c must be > 0");
          } else if constexpr (std::is_same_v<K, LpBallShape>) {
            if (!(k.p > 0.0)) throw InvalidArgument("lp_ball: p must be > 0");
            if (!(k.t > 0.0)) throw InvalidArgument("lp_ball: t must be > 0");
          } else if constexpr (std::is_same_v<K, DeformedShape>) {
            if (!(std::fabs(k.amplitude) < 1.0))
              throw InvalidArgument("deformed: |amplitude| must be < 1");
          }
        },
        kind_);
  }

  Kind kind_;
};

namespace detail {

// Simplex: D(theta) = sum_j u_j, r = 1/D and
//   dD/da_i = Q_i (-s_i + c_i V_{i+1}),  Q_i = prod_{k<i} s_k,
// with V_n = 1, V_i = c_i + s_i V_{i+1}.
template <class T>
std::vector<T> simplex_gradient(std::span<const T> theta) {
  const std::size_t n = theta.size();
  const auto s = sines(theta);
  const auto c = cosines(theta);
  std::vector<T> v(n + 1);
  v[n] = T(1.0);
  for (std::size_t k = n; k-- > 0;) v[k] = c[k] + s[k] * v[k + 1];
  const T r = T(1.0) / v[0];
  const T neg_r2 = -(r * r);
  std::vector<T> g(n);
  T q(1.0);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = neg_r2 * (q * (c[i] * v[i + 1] - s[i]));
    q = q * s[i];
  }
  return g;
}

// lp: S = sum_j |u_j|^p = W_0 with W_n = 1, W_i = |c_i|^p + |s_i|^p W_{i+1};
//   dS/da_i = p Q_i (|s_i|^p/s_i c_i W_{i+1} - |c_i|^p/c_i s_i),  Q_i = prod_{k<i} |s_k|^p,
//   dr/da_i = -(r / (p S)) dS/da_i.
template <class T>
std::vector<T> lp_gradient(std::span<const T> theta, double p, double t) {
  const std::size_t n = theta.size();
  const auto s = sines(theta);
  const auto c = cosines(theta);
  std::vector<T> cp(n), sp(n);
  for (std::size_t k = 0; k < n; ++k) {
    cp[k] = value_of(c[k]) == 0.0 ? T(0.0) : pow_c(abs(c[k]), p);
    sp[k] = value_of(s[k]) == 0.0 ? T(0.0) : pow_c(abs(s[k]), p);
  }
  std::vector<T> w(n + 1);
  w[n] = T(1.0);
  for (std::size_t k = n; k-- > 0;) w[k] = cp[k] + sp[k] * w[k + 1];
  const T r = radius_lp<T>(theta, p, t);
  const T scale = -(r / w[0]);
  std::vector<T> g(n);
  T q(1.0);
  for (std::size_t i = 0; i < n; ++i) {
    T term(0.0);
    if (value_of(s[i]) != 0.0) term += sp[i] / s[i] * c[i] * w[i + 1];
    if (value_of(c[i]) != 0.0) term -= cp[i] / c[i] * s[i];
    g[i] = scale * (q * term);
    q = q * sp[i];
  }
  return g;
}

template <class T>
std::vector<T> deformed_gradient(std::span<const T> theta, double a, double m) {
  std::vector<T> g(theta.size(), T(0.0));
  if (theta.size() == 1) {
    g[0] = a * m * cos(m * theta[0]);
    return g;
  }
  const T s0 = sin(m * theta[0]);
  const T s1 = sin(m * theta[1]);
  g[0] = (a * m) * (cos(m * theta[0]) * s1);
  g[1] = (a * m) * (s0 * cos(m * theta[1]));
  return g;
}

}  // namespace detail

template <class T>
std::vector<T> RadiusField::gradient(std::span<const T> theta) const {
  return std::visit(
      [&](const auto& k) -> std::vector<T> {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, SphereShape>) return std::vector<T>(theta.size(), T(0.0));
        else if constexpr (std::is_same_v<K, LpBallShape>) return detail::lp_gradient<T>(theta, k.p, k.t);
        else if constexpr (std::is_same_v<K, SimplexShape>) return detail::simplex_gradient<T>(theta);
        else return detail::deformed_gradient<T>(theta, k.amplitude, k.frequency);
      },
      kind_);
}

inline double lp_norm(std::span<const double> x, double p) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::fabs(v));
  if (m == 0.0) return 0.0;
  double s = 0.0;
  for (double v : x) s += std::pow(std::fabs(v) / m, p);
  return m * std::pow(s, 1.0 / p);
}

inline double RadiusField::constraint_residual(std::span<const double> x) const {
  return std::visit(
      [&](const auto& k) -> double {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, SphereShape>) {
          return std::fabs(lp_norm(x, 2.0) - k.c);
        } else if constexpr (std::is_same_v<K, LpBallShape>) {
          return std::fabs(lp_norm(x, k.p) - k.t);
        } else if constexpr (std::is_same_v<K, SimplexShape>) {
          double sum = 0.0;
          double neg = 0.0;
          for (double v : x) {
            sum += v;
            neg = std::max(neg, -v);
          }
          return std::max(std::fabs(sum - 1.0), neg);
        } else {
          const auto sp = to_spherical(CartesianPoint<double>{{x.begin(), x.end()}});
          const double r = radius_deformed<double>(sp.angles.theta, k.amplitude, k.frequency);
          return std::fabs(sp.radius - r);
        }
      },
      kind_);
}

// Public free-function form of the gradient.
template <class T>
std::vector<T> grad_radius(const RadiusField& field, std::span<const T> theta) {
  return field.gradient<T>(theta);
}

// Reference gradient obtained by reverse-mode differentiation of radius().
inline std::vector<double> grad_radius_by_tape(const RadiusField& field,
                                               std::span<const double> theta) {
  ad::Tape tape;
  std::vector<ad::Var> th;
  th.reserve(theta.size());
  for (double v : theta) th.push_back(tape.variable(v));
  const ad::Var r = field.radius<ad::Var>(th);
  const auto g = tape.backward(r);
  std::vector<double> out(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) out[k] = g[th[k]];
  return out;
}

}  // namespace starflow
