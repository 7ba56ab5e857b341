#pragma once

// Scalar reverse-mode automatic differentiation.
//
// A Tape records every operation on Var values as a node holding the
// operation kind, up to two parent indices and the local partial derivatives
// with respect to those parents. Nodes are appended in evaluation order, so
// parents always precede children and a single reverse sweep accumulates the
// adjoints. A Var without a tape is a constant and contributes no gradient.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "starflow/error.hpp"

namespace starflow::ad {

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  neg,
  sin,
  cos,
  tan,
  exp,
  log,
  pow_const,
  abs,
  sqrt,
  atan2,
  min,
  max,
  linear,  // fused sum of products; parents live in the term arrays
};

inline const char* op_name(Op op);

class Tape;

class Var {
 public:
  Var() = default;
  // Implicit on purpose: literals and plain doubles act as constants.
  Var(double value) : value_(value) {}  // NOLINT(google-explicit-constructor)

  double value() const { return value_; }
  std::int32_t index() const { return index_; }
  Tape* tape() const { return tape_; }
  bool is_constant() const { return tape_ == nullptr; }

 private:
  friend class Tape;
  Var(double value, std::int32_t index, Tape* tape)
      : value_(value), index_(index), tape_(tape) {}

  double value_ = 0.0;
  std::int32_t index_ = -1;
  Tape* tape_ = nullptr;
};

// Adjoints of every node for one output. Constants read as zero.
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<double> adjoints, std::vector<std::int32_t> leaves)
      : adjoints_(std::move(adjoints)), leaves_(std::move(leaves)) {}

  double operator[](const Var& v) const {
    if (v.is_constant()) return 0.0;
    return adjoints_[static_cast<std::size_t>(v.index())];
  }
  // Gradient with respect to the i-th leaf created on the tape.
  double leaf(std::size_t i) const {
    return adjoints_[static_cast<std::size_t>(leaves_.at(i))];
  }
  std::size_t leaf_count() const { return leaves_.size(); }
  std::vector<double> leaves() const {
    std::vector<double> out(leaves_.size());
    for (std::size_t i = 0; i < leaves_.size(); ++i) out[i] = leaf(i);
    return out;
  }

 private:
  std::vector<double> adjoints_;
  std::vector<std::int32_t> leaves_;
  std::vector<std::int32_t> term_a_;
  std::vector<std::int32_t> term_b_;
  std::vector<double> term_av_;
  std::vector<double> term_bv_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(double value) {
    leaves_.push_back(static_cast<std::int32_t>(ops_.size()));
    return push(Op::leaf, value, -1, 0.0, -1, 0.0, 0.0);
  }

  std::size_t size() const { return ops_.size(); }
  std::size_t leaf_count() const { return leaves_.size(); }
  double value(std::size_t node) const { return values_.at(node); }

  // Drops all nodes but keeps the allocation. Vars created before are invalid.
  void clear() {
    ops_.clear();
    lhs_.clear();
    rhs_.clear();
    values_.clear();
    dlhs_.clear();
    drhs_.clear();
    aux_.clear();
    leaves_.clear();
    term_a_.clear();
    term_b_.clear();
    term_av_.clear();
    term_bv_.clear();
  }

  void reserve(std::size_t n) {
    ops_.reserve(n);
    lhs_.reserve(n);
    rhs_.reserve(n);
    values_.reserve(n);
    dlhs_.reserve(n);
    drhs_.reserve(n);
    aux_.reserve(n);
  }

  Gradients backward(const Var& output) const {
    std::vector<double> adj(ops_.size(), 0.0);
    if (!output.is_constant()) {
      if (output.tape() != this) {
        throw InvalidArgument("backward: output does not belong to this tape");
      }
      adj[static_cast<std::size_t>(output.index())] = 1.0;
      for (std::int32_t i = output.index(); i >= 0; --i) {
        const double a = adj[static_cast<std::size_t>(i)];
        if (a == 0.0) continue;
        if (ops_[static_cast<std::size_t>(i)] == Op::linear) {
          const auto start = static_cast<std::size_t>(lhs_[static_cast<std::size_t>(i)]);
          const auto stop = start + static_cast<std::size_t>(rhs_[static_cast<std::size_t>(i)]);
          for (std::size_t k = start; k < stop; ++k) {
            if (term_a_[k] >= 0) adj[static_cast<std::size_t>(term_a_[k])] += term_bv_[k] * a;
            if (term_b_[k] >= 0) adj[static_cast<std::size_t>(term_b_[k])] += term_av_[k] * a;
          }
          continue;
        }
        const auto l = lhs_[static_cast<std::size_t>(i)];
        const auto r = rhs_[static_cast<std::size_t>(i)];
        if (l >= 0) adj[static_cast<std::size_t>(l)] += dlhs_[static_cast<std::size_t>(i)] * a;
        if (r >= 0) adj[static_cast<std::size_t>(r)] += drhs_[static_cast<std::size_t>(i)] * a;
      }
    }
    return Gradients(std::move(adj), leaves_);
  }

  // Appends sum_k a_k * b_k (accumulated left to right from 0). Operands may be
  // constants; an all-constant combination should not reach the tape.
  Var push_linear(std::span<const Var> a, std::span<const Var> b, double value) {
    const auto start = static_cast<std::int32_t>(term_a_.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      term_a_.push_back(a[k].index_);
      term_b_.push_back(b[k].index_);
      term_av_.push_back(a[k].value_);
      term_bv_.push_back(b[k].value_);
    }
    return push(Op::linear, value, start, 0.0, static_cast<std::int32_t>(a.size()), 0.0, 0.0);
  }

  // Recomputes every non-leaf value from its parents and returns the number of
  // nodes whose recomputed value differs bitwise from the stored one.
  std::size_t replay_mismatches() const;

  // Raw node append; prefer the free functions below.
  Var push(Op op, double value, std::int32_t lhs, double dlhs, std::int32_t rhs,
           double drhs, double aux) {
    ops_.push_back(op);
    lhs_.push_back(lhs);
    rhs_.push_back(rhs);
    values_.push_back(value);
    dlhs_.push_back(dlhs);
    drhs_.push_back(drhs);
    aux_.push_back(aux);
    return Var(value, static_cast<std::int32_t>(ops_.size() - 1), this);
  }

 private:
  std::vector<Op> ops_;
  std::vector<std::int32_t> lhs_;
  std::vector<std::int32_t> rhs_;
  std::vector<double> values_;
  std::vector<double> dlhs_;
  std::vector<double> drhs_;
  std::vector<double> aux_;
  std::vector<std::int32_t> leaves_;
  std::vector<std::int32_t> term_a_;
  std::vector<std::int32_t> term_b_;
  std::vector<double> term_av_;
  std::vector<double> term_bv_;
};

namespace detail {

inline Tape* common_tape(const Var& a, const Var& b) {
  if (a.tape() != nullptr && b.tape() != nullptr && a.tape() != b.tape()) {
    throw InvalidArgument("ad: operands belong to different tapes");
  }
  return a.tape() != nullptr ? a.tape() : b.tape();
}

inline Var unary(Op op, const Var& a, double value, double da, double aux = 0.0) {
  if (a.is_constant()) return Var(value);
  return a.tape()->push(op, value, a.index(), da, -1, 0.0, aux);
}

inline Var binary(Op op, const Var& a, const Var& b, double value, double da, double db) {
  Tape* t = common_tape(a, b);
  if (t == nullptr) return Var(value);
  if (a.is_constant()) return t->push(op, value, -1, 0.0, b.index(), db, a.value());
  if (b.is_constant()) return t->push(op, value, a.index(), da, -1, 0.0, b.value());
  return t->push(op, value, a.index(), da, b.index(), db, 0.0);
}

[[noreturn]] inline void domain_failure(const char* op, double v) {
  std::ostringstream os;
  os.precision(17);
  os << op << ": argument out of domain (" << v << ")";
  throw DomainError(os.str());
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::binary(Op::add, a, b, a.value() + b.value(), 1.0, 1.0);
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::binary(Op::sub, a, b, a.value() - b.value(), 1.0, -1.0);
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary(Op::mul, a, b, a.value() * b.value(), b.value(), a.value());
}
inline Var operator/(const Var& a, const Var& b) {
  if (b.value() == 0.0) detail::domain_failure("div", b.value());
  const double q = a.value() / b.value();
  return detail::binary(Op::div, a, b, q, 1.0 / b.value(), -q / b.value());
}
inline Var operator-(const Var& a) { return detail::unary(Op::neg, a, -a.value(), -1.0); }
inline Var operator+(const Var& a) { return a; }

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

inline Var sin(const Var& a) {
  return detail::unary(Op::sin, a, std::sin(a.value()), std::cos(a.value()));
}
inline Var cos(const Var& a) {
  return detail::unary(Op::cos, a, std::cos(a.value()), -std::sin(a.value()));
}
inline Var tan(const Var& a) {
  const double t = std::tan(a.value());
  return detail::unary(Op::tan, a, t, 1.0 + t * t);
}
inline Var exp(const Var& a) {
  const double e = std::exp(a.value());
  return detail::unary(Op::exp, a, e, e);
}
inline Var log(const Var& a) {
  if (!(a.value() > 0.0)) detail::domain_failure("log", a.value());
  return detail::unary(Op::log, a, std::log(a.value()), 1.0 / a.value());
}
inline Var sqrt(const Var& a) {
  if (!(a.value() > 0.0)) detail::domain_failure("sqrt", a.value());
  const double s = std::sqrt(a.value());
  return detail::unary(Op::sqrt, a, s, 0.5 / s);
}
// x^p for a constant exponent p.
inline Var pow(const Var& a, double p) {
  const double x = a.value();
  if (x < 0.0 && p != std::floor(p)) detail::domain_failure("pow_const", x);
  if (x == 0.0 && p < 1.0 && p != 0.0) detail::domain_failure("pow_const", x);
  const double v = std::pow(x, p);
  const double dv = p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0);
  return detail::unary(Op::pow_const, a, v, dv, p);
}
// Subgradient 0 at the kink.
inline Var abs(const Var& a) {
  const double x = a.value();
  return detail::unary(Op::abs, a, std::fabs(x), x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
}
inline Var atan2(const Var& y, const Var& x) {
  const double n = y.value() * y.value() + x.value() * x.value();
  if (n == 0.0) detail::domain_failure("atan2", 0.0);
  return detail::binary(Op::atan2, y, x, std::atan2(y.value(), x.value()), x.value() / n,
                        -y.value() / n);
}
// Ties select the left operand.
inline Var min(const Var& a, const Var& b) {
  const bool left = a.value() <= b.value();
  return detail::binary(Op::min, a, b, left ? a.value() : b.value(), left ? 1.0 : 0.0,
                        left ? 0.0 : 1.0);
}
inline Var max(const Var& a, const Var& b) {
  const bool left = a.value() >= b.value();
  return detail::binary(Op::max, a, b, left ? a.value() : b.value(), left ? 1.0 : 0.0,
                        left ? 0.0 : 1.0);
}

// sum_k a_k * b_k as a single node.
inline Var dot(std::span<const Var> a, std::span<const Var> b) {
  if (a.size() != b.size()) throw InvalidArgument("dot: operand lengths differ");
  Tape* t = nullptr;
  double v = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    t = t ? t : detail::common_tape(a[k], b[k]);
    if (t && ((a[k].tape() && a[k].tape() != t) || (b[k].tape() && b[k].tape() != t))) {
      throw InvalidArgument("ad: operands belong to different tapes");
    }
    v += a[k].value() * b[k].value();
  }
  if (t == nullptr) return Var(v);
  return t->push_linear(a, b, v);
}

inline bool operator<(const Var& a, const Var& b) { return a.value() < b.value(); }
inline bool operator>(const Var& a, const Var& b) { return a.value() > b.value(); }
inline bool operator<=(const Var& a, const Var& b) { return a.value() <= b.value(); }
inline bool operator>=(const Var& a, const Var& b) { return a.value() >= b.value(); }

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::sin: return "sin";
    case Op::cos: return "cos";
    case Op::tan: return "tan";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::pow_const: return "pow_const";
    case Op::abs: return "abs";
    case Op::sqrt: return "sqrt";
    case Op::atan2: return "atan2";
    case Op::min: return "min";
    case Op::max: return "max";
    case Op::linear: return "linear";
  }
  return "?";
}

inline std::size_t Tape::replay_mismatches() const {
  std::size_t bad = 0;
  auto operand = [&](std::int32_t idx, std::size_t node) {
    return idx >= 0 ? values_[static_cast<std::size_t>(idx)] : aux_[node];
  };
  for (std::size_t i = 0; i < ops_.size(); ++i) {
    if (ops_[i] == Op::linear) {
      double v = 0.0;
      const auto start = static_cast<std::size_t>(lhs_[i]);
      for (std::size_t k = start; k < start + static_cast<std::size_t>(rhs_[i]); ++k) {
        const double x = term_a_[k] >= 0 ? values_[static_cast<std::size_t>(term_a_[k])] : term_av_[k];
        const double y = term_b_[k] >= 0 ? values_[static_cast<std::size_t>(term_b_[k])] : term_bv_[k];
        v += x * y;
      }
      if (std::memcmp(&v, &values_[i], sizeof(double)) != 0) ++bad;
      continue;
    }
    const double a = operand(lhs_[i], i);
    const double b = ops_[i] == Op::pow_const ? aux_[i] : operand(rhs_[i], i);
    double v = 0.0;
    switch (ops_[i]) {
      case Op::leaf: continue;
      case Op::add: v = a + b; break;
      case Op::sub: v = a - b; break;
      case Op::mul: v = a * b; break;
      case Op::div: v = a / b; break;
      case Op::neg: v = -a; break;
      case Op::sin: v = std::sin(a); break;
      case Op::cos: v = std::cos(a); break;
      case Op::tan: v = std::tan(a); break;
      case Op::exp: v = std::exp(a); break;
      case Op::log: v = std::log(a); break;
      case Op::pow_const: v = std::pow(a, b); break;
      case Op::abs: v = std::fabs(a); break;
      case Op::sqrt: v = std::sqrt(a); break;
      case Op::atan2: v = std::atan2(a, b); break;
      case Op::min: v = a <= b ? a : b; break;
      case Op::max: v = a >= b ? a : b; break;
      case Op::linear: break;
    }
    if (std::memcmp(&v, &values_[i], sizeof(double)) != 0) ++bad;
  }
  return bad;
}

// Max over coordinates of |analytic - central difference| / (|central difference| + 1e-12).
inline double grad_check(const std::function<Var(std::span<const Var>)>& f,
                         std::span<const double> point, double h) {
  Tape tape;
  std::vector<Var> xs;
  xs.reserve(point.size());
  for (double p : point) xs.push_back(tape.variable(p));
  const Var y = f(xs);
  if (!std::isfinite(y.value())) throw DomainError("grad_check: non-finite function value");
  const Gradients g = tape.backward(y);

  double worst = 0.0;
  std::vector<Var> probe(point.begin(), point.end());
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = Var(point[i] + h);
    const double fp = f(probe).value();
    probe[i] = Var(point[i] - h);
    const double fm = f(probe).value();
    probe[i] = Var(point[i]);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw DomainError("grad_check: non-finite value in finite-difference stencil");
    }
    const double fd = (fp - fm) / (2.0 * h);
    const double an = g[xs[i]];
    if (!std::isfinite(an)) throw DomainError("grad_check: non-finite analytic gradient");
    worst = std::max(worst, std::fabs(an - fd) / (std::fabs(fd) + 1e-12));
  }
  return worst;
}

}  // namespace starflow::ad
