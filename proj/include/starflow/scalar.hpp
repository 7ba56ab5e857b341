#pragma once

#include <cmath>
#include <concepts>
#include <type_traits>

#include "starflow/ad.hpp"

namespace starflow {

using ad::Var;

template <class T>
concept Scalar = std::same_as<T, double> || std::same_as<T, ad::Var>;

inline double value_of(double x) { return x; }
inline double value_of(const ad::Var& x) { return x.value(); }

// Bring both overload sets into scope for generic code.
using std::abs;
using std::atan2;
using std::cos;
using std::exp;
using std::log;
using std::sin;
using std::sqrt;
using ad::abs;
using ad::atan2;
using ad::cos;
using ad::exp;
using ad::log;
using ad::sin;
using ad::sqrt;

inline double pow_c(double x, double p) { return std::pow(x, p); }
inline ad::Var pow_c(const ad::Var& x, double p) { return ad::pow(x, p); }

inline double max_s(double a, double b) { return a >= b ? a : b; }
inline ad::Var max_s(const ad::Var& a, const ad::Var& b) { return ad::max(a, b); }
inline double min_s(double a, double b) { return a <= b ? a : b; }
inline ad::Var min_s(const ad::Var& a, const ad::Var& b) { return ad::min(a, b); }

// log(1 + exp(x)) without overflow.
template <Scalar T>
T softplus(const T& x) {
  const double v = value_of(x);
  if (v > 0.0) return x + log(T(1.0) + exp(-x));
  return log(T(1.0) + exp(x));
}

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

}  // namespace starflow
