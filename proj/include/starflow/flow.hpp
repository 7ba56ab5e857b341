#pragma once

// Injective flow on a star-like manifold:
//
//   z (uniform-sphere angles) --T_theta--> theta --T_r--> (theta, r(theta)) --T_sc--> x
//
// T_theta is a stack of rational-quadratic spline blocks acting on each
// angle. Angles on [0, pi] (or [0, pi/2] on the orthant) use monotone
// splines pinned at both ends; the last angle on [0, 2 pi] uses a circular
// spline (periodic derivative plus a rotation). A block may condition the
// spline of each angle on preceding angles of its input (autoregressive), so
// its Jacobian stays triangular and the log-det is a sum over angles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "starflow/ad.hpp"
#include "starflow/error.hpp"
#include "starflow/jacdet.hpp"
#include "starflow/manifolds.hpp"
#include "starflow/scalar.hpp"
#include "starflow/spherical.hpp"

namespace starflow {

enum class SplineBoundary { monotone, circular };

inline const char* boundary_name(SplineBoundary b) {
  return b == SplineBoundary::monotone ? "monotone_bounded" : "circular";
}

struct FlowConfig {
  std::size_t layers = 5;
  std::size_t blocks = 3;          // spline blocks per layer
  std::size_t bins = 8;
  std::size_t coupled_blocks = 1;  // leading blocks of each layer with a conditioner
  std::size_t frequencies = 2;     // Fourier frequencies per conditioning input
  std::size_t window = 2;          // how many preceding angles a spline sees
  double min_bin = 1e-3;
  double min_derivative = 1e-3;

  void validate() const {
    if (layers < 1) throw InvalidArgument("flow: layers must be >= 1");
    if (blocks < 1) throw InvalidArgument("flow: blocks must be >= 1");
    if (bins < 1) throw InvalidArgument("flow: bins must be >= 1");
    if (coupled_blocks > blocks) throw InvalidArgument("flow: coupled_blocks must be <= blocks");
    if (!(min_bin > 0.0) || min_bin * static_cast<double>(bins) >= 1.0) {
      throw InvalidArgument("flow: min_bin must be in (0, 1/bins)");
    }
    if (!(min_derivative > 0.0)) throw InvalidArgument("flow: min_derivative must be > 0");
  }

  // Raw parameters of one spline: K widths, K heights, K+1 derivatives
  // (monotone) or K derivatives plus one rotation (circular).
  std::size_t spline_params() const { return 3 * bins + 1; }
};

// ---------------------------------------------------------------------------
// Rational-quadratic spline

template <class T>
struct SplineKnots {
  std::vector<T> x;  // K+1 input knots, x[0] = 0, x[K] = length
  std::vector<T> y;  // K+1 output knots
  std::vector<T> d;  // K+1 knot derivatives (circular: d[K] = d[0])
  T shift{0.0};      // circular rotation in [0, 2 pi)
  double length = kPi;
  SplineBoundary boundary = SplineBoundary::monotone;
};

template <class T>
struct SplineResult {
  T value{0.0};
  T log_deriv{0.0};
};

namespace detail {

template <class T>
std::vector<T> bin_edges(std::span<const T> raw, double length, double min_bin) {
  const std::size_t k = raw.size();
  double mx = value_of(raw[0]);
  for (const auto& r : raw) mx = std::max(mx, value_of(r));
  std::vector<T> e(k);
  T total(0.0);
  for (std::size_t i = 0; i < k; ++i) {
    e[i] = exp(raw[i] - mx);
    total += e[i];
  }
  const double scale = 1.0 - min_bin * static_cast<double>(k);
  std::vector<T> edges(k + 1);
  edges[0] = T(0.0);
  T acc(0.0);
  for (std::size_t i = 0; i + 1 < k; ++i) {
    acc += length * (min_bin + scale * (e[i] / total));
    edges[i + 1] = acc;
  }
  edges[k] = T(length);
  return edges;
}

inline std::size_t find_bin(const std::vector<double>& edges, double v) {
  const std::size_t k = edges.size() - 1;
  auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, v);
  const auto idx = static_cast<std::size_t>(it - edges.begin()) - 1;
  return std::min(idx, k - 1);
}

template <class T>
std::vector<double> values(const std::vector<T>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = value_of(v[i]);
  return out;
}

inline double wrap_2pi(double v) {
  if (v >= kTwoPi) v -= kTwoPi;
  if (v < 0.0) v += kTwoPi;
  return v;
}

}  // namespace detail

// Raw value for which min_derivative + softplus(raw) = 1.
inline double identity_derivative_raw(double min_derivative) {
  return std::log(std::expm1(1.0 - min_derivative));
}

template <class T>
SplineKnots<T> make_knots(std::span<const T> raw, std::size_t bins, double length,
                          SplineBoundary boundary, double min_bin, double min_derivative) {
  if (raw.size() != 3 * bins + 1) throw InvalidArgument("make_knots: expected 3K+1 raw parameters");
  SplineKnots<T> k;
  k.length = length;
  k.boundary = boundary;
  k.x = detail::bin_edges<T>(raw.subspan(0, bins), length, min_bin);
  k.y = detail::bin_edges<T>(raw.subspan(bins, bins), length, min_bin);
  k.d.resize(bins + 1);
  const std::size_t nd = boundary == SplineBoundary::monotone ? bins + 1 : bins;
  for (std::size_t i = 0; i < nd; ++i) k.d[i] = min_derivative + softplus(raw[2 * bins + i]);
  if (boundary == SplineBoundary::circular) {
    k.d[bins] = k.d[0];
    const T& s = raw[3 * bins];
    k.shift = s - kTwoPi * std::floor(value_of(s) / kTwoPi);
  }
  return k;
}

// Monotone piece on [0, length]; no rotation.
template <class T>
SplineResult<T> rq_forward(const SplineKnots<T>& k, const T& u) {
  const std::vector<double> xs = detail::values(k.x);
  const std::size_t b = detail::find_bin(xs, value_of(u));
  const T w = k.x[b + 1] - k.x[b];
  const T h = k.y[b + 1] - k.y[b];
  const T s = h / w;
  const T xi = (u - k.x[b]) / w;
  const T om = 1.0 - xi;
  const T xo = xi * om;
  const T den = s + (k.d[b + 1] + k.d[b] - 2.0 * s) * xo;
  SplineResult<T> out;
  out.value = k.y[b] + h * (s * xi * xi + k.d[b] * xo) / den;
  const T num = k.d[b + 1] * xi * xi + 2.0 * s * xo + k.d[b] * om * om;
  out.log_deriv = log(s * s * num / (den * den));
  return out;
}

inline double rq_inverse(const SplineKnots<double>& k, double v) {
  const std::size_t b = detail::find_bin(k.y, v);
  const double w = k.x[b + 1] - k.x[b];
  const double h = k.y[b + 1] - k.y[b];
  const double s = h / w;
  const double dy = v - k.y[b];
  const double sum = k.d[b + 1] + k.d[b] - 2.0 * s;
  const double a = h * (s - k.d[b]) + dy * sum;
  const double bb = h * k.d[b] - dy * sum;
  const double c = -s * dy;
  const double disc = std::max(0.0, bb * bb - 4.0 * a * c);
  const double xi = (2.0 * c) / (-bb - std::sqrt(disc));
  return k.x[b] + std::clamp(xi, 0.0, 1.0) * w;
}

inline void check_spline_input(double u, double length, double tol = kAngleEpsilon) {
  if (!(u >= -tol && u <= length + tol)) {
    throw InvalidArgument("spline: input " + std::to_string(u) + " outside [0, " +
                          std::to_string(length) + "]");
  }
}

template <class T>
SplineResult<T> spline_forward(const SplineKnots<T>& k, const T& u) {
  check_spline_input(value_of(u), k.length);
  T uu = u;
  if (value_of(u) < 0.0) uu = T(0.0);
  if (value_of(u) > k.length) uu = T(k.length);
  SplineResult<T> r = rq_forward(k, uu);
  if (k.boundary == SplineBoundary::circular) {
    T v = r.value + k.shift;
    const double vv = value_of(v);
    if (vv >= kTwoPi) v = v - kTwoPi;
    else if (vv < 0.0) v = v + kTwoPi;
    r.value = v;
  }
  return r;
}

inline double spline_inverse(const SplineKnots<double>& k, double v) {
  check_spline_input(v, k.length);
  v = std::clamp(v, 0.0, k.length);
  if (k.boundary == SplineBoundary::circular) v = detail::wrap_2pi(v - k.shift);
  return rq_inverse(k, v);
}

// ---------------------------------------------------------------------------
// Flow model

template <class T>
struct AngleTransform {
  AngleVector<T> theta;
  T log_det{0.0};
};

template <class T>
struct FlowPoint {
  AngleVector<double> z;
  AngleVector<T> theta;  // clamped to the open angle domain
  CartesianPoint<T> x;
  T log_base{0.0};
  T log_det_T_theta{0.0};
  JacDetResult<T> jacobian;
  T log_q{0.0};
};

class FlowModel;

// Parameter offsets of one spline inside the flat parameter vector.
struct FlowSlot {
  std::size_t base = 0;             // 3K+1 raw spline parameters
  std::size_t weights = 0;          // P x F conditioner matrix, row-major
  std::vector<std::size_t> inputs;  // conditioning angles
  bool coupled = false;
};

// A model's structure bound to one parameter vector (double or taped). Knots
// of unconditioned splines are built once here and shared by all points.
template <class T>
class FlowEvaluator {
 public:
  FlowEvaluator(const FlowModel& model, std::span<const T> params);

  AngleTransform<T> transform(const AngleVector<T>& z) const;
  AngleTransform<T> transform_layer(std::size_t layer, const AngleVector<T>& z) const;
  FlowPoint<T> evaluate(const AngleVector<double>& z) const;

  // Inverse of transform_layer / transform (double only).
  AngleVector<double> inverse_layer(std::size_t layer, const AngleVector<double>& theta) const;
  AngleVector<double> inverse(const AngleVector<double>& theta) const;

 private:
  using Slot = FlowSlot;

  SplineKnots<T> knots_for(const Slot& slot, std::size_t dim, const std::vector<T>& in) const;
  void block_forward(std::size_t layer, std::size_t block, std::vector<T>& a, T& log_det) const;
  void block_inverse(std::size_t layer, std::size_t block, std::vector<double>& a) const;

  const FlowModel* model_;
  std::span<const T> params_;
  std::vector<std::vector<std::vector<SplineKnots<T>>>> fixed_;  // uncoupled knots
};

class FlowModel {
 public:
  FlowModel(std::size_t dim, RadiusField field, FlowConfig config = {})
      : dim_(dim), field_(std::move(field)), config_(config) {
    if (dim_ < 2) throw InvalidArgument("flow: dimension must be >= 2");
    config_.validate();
    build_layout();
    reset_identity();
  }

  std::size_t dim() const { return dim_; }
  std::size_t num_angles() const { return dim_ - 1; }
  const RadiusField& field() const { return field_; }
  const FlowConfig& config() const { return config_; }
  AngleDomain domain() const { return field_.domain(); }

  SplineBoundary boundary(std::size_t angle) const {
    if (domain() == AngleDomain::full && angle + 1 == num_angles()) return SplineBoundary::circular;
    return SplineBoundary::monotone;
  }
  double interval(std::size_t angle) const { return angle_upper(domain(), angle, num_angles()); }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t num_params() const { return params_.size(); }

  void set_params(std::vector<double> p) {
    if (p.size() != params_.size()) {
      throw InvalidArgument("flow: expected " + std::to_string(params_.size()) + " parameters, got " +
                            std::to_string(p.size()));
    }
    params_ = std::move(p);
  }

  // Equal bins, unit derivatives, zero rotation and zero conditioner weights.
  void reset_identity() {
    params_.assign(num_params_, 0.0);
    const std::size_t k = config_.bins;
    const double draw = identity_derivative_raw(config_.min_derivative);
    for (const auto& layer : layout_)
      for (const auto& block : layer)
        for (std::size_t i = 0; i < block.size(); ++i) {
          const std::size_t nd = boundary(i) == SplineBoundary::monotone ? k + 1 : k;
          for (std::size_t j = 0; j < nd; ++j) params_[block[i].base + 2 * k + j] = draw;
        }
  }

  // Conditioning order of a layer: natural on even layers, reversed on odd ones.
  std::vector<std::size_t> order(std::size_t layer) const {
    std::vector<std::size_t> o(num_angles());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = layer % 2 == 0 ? i : o.size() - 1 - i;
    return o;
  }

  // Number of conditioner features contributed by one input angle.
  std::size_t features_per_input(std::size_t angle) const {
    return 2 * config_.frequencies + (boundary(angle) == SplineBoundary::monotone ? 1 : 0);
  }

  template <class T>
  FlowEvaluator<T> bind(std::span<const T> params) const {
    if (params.size() != num_params_) throw InvalidArgument("flow: parameter vector has the wrong size");
    return FlowEvaluator<T>(*this, params);
  }
  FlowEvaluator<double> evaluator() const { return bind<double>(params_); }

  // [layer][block][angle]
  const std::vector<std::vector<std::vector<FlowSlot>>>& layout() const { return layout_; }

 private:
  void build_layout() {
    const std::size_t n = num_angles();
    const std::size_t p = config_.spline_params();
    std::size_t off = 0;
    layout_.assign(config_.layers, {});
    for (std::size_t l = 0; l < config_.layers; ++l) {
      layout_[l].assign(config_.blocks, std::vector<FlowSlot>(n));
      const auto ord = order(l);
      for (std::size_t b = 0; b < config_.blocks; ++b) {
        const bool coupled = b < config_.coupled_blocks;
        for (std::size_t pos = 0; pos < n; ++pos) {
          auto& s = layout_[l][b][ord[pos]];
          s.base = off;
          off += p;
          if (!coupled) continue;
          const std::size_t first = pos > config_.window ? pos - config_.window : 0;
          for (std::size_t q = first; q < pos; ++q) s.inputs.push_back(ord[q]);
          if (s.inputs.empty()) continue;
          s.coupled = true;
          s.weights = off;
          std::size_t nf = 0;
          for (std::size_t in : s.inputs) nf += features_per_input(in);
          off += p * nf;
        }
      }
    }
    num_params_ = off;
  }

  std::size_t dim_;
  RadiusField field_;
  FlowConfig config_;
  std::vector<std::vector<std::vector<FlowSlot>>> layout_;
  std::size_t num_params_ = 0;
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// FlowEvaluator

template <class T>
FlowEvaluator<T>::FlowEvaluator(const FlowModel& model, std::span<const T> params)
    : model_(&model), params_(params) {
  const auto& cfg = model.config();
  const std::size_t n = model.num_angles();
  fixed_.resize(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    fixed_[l].resize(cfg.blocks);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      fixed_[l][b].resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const Slot& s = model.layout()[l][b][i];
        if (!s.coupled) {
          fixed_[l][b][i] = make_knots<T>(params_.subspan(s.base, cfg.spline_params()), cfg.bins,
                                          model.interval(i), model.boundary(i), cfg.min_bin,
                                          cfg.min_derivative);
        }
      }
    }
  }
}

template <class T>
SplineKnots<T> FlowEvaluator<T>::knots_for(const Slot& slot, std::size_t dim,
                                           const std::vector<T>& in) const {
  const auto& cfg = model_->config();
  const std::size_t p = cfg.spline_params();
  std::vector<T> feats;
  for (std::size_t j : slot.inputs) {
    const T& a = in[j];
    for (std::size_t f = 1; f <= cfg.frequencies; ++f) {
      const T fa = static_cast<double>(f) * a;
      feats.push_back(cos(fa));
      feats.push_back(sin(fa));
    }
    if (model_->boundary(j) == SplineBoundary::monotone) {
      feats.push_back(a * (1.0 / model_->interval(j)) - 0.5);
    }
  }
  const std::size_t nf = feats.size();
  std::vector<T> raw(p);
  if constexpr (std::is_same_v<T, double>) {
    for (std::size_t r = 0; r < p; ++r) {
      T acc = params_[slot.base + r];
      const std::size_t row = slot.weights + r * nf;
      for (std::size_t f = 0; f < nf; ++f) acc += params_[row + f] * feats[f];
      raw[r] = acc;
    }
  } else {
    // One fused node per raw parameter instead of 2 nf binary ones; the
    // accumulation order matches the double branch bit for bit.
    std::vector<T> coef(nf + 1), rhs(nf + 1);
    rhs[0] = T(1.0);
    std::copy(feats.begin(), feats.end(), rhs.begin() + 1);
    for (std::size_t r = 0; r < p; ++r) {
      coef[0] = params_[slot.base + r];
      const std::size_t row = slot.weights + r * nf;
      std::copy(params_.begin() + static_cast<std::ptrdiff_t>(row),
                params_.begin() + static_cast<std::ptrdiff_t>(row + nf), coef.begin() + 1);
      raw[r] = ad::dot(std::span<const T>(coef), std::span<const T>(rhs));
    }
  }
  return make_knots<T>(std::span<const T>(raw), cfg.bins, model_->interval(dim), model_->boundary(dim),
                       cfg.min_bin, cfg.min_derivative);
}

template <class T>
void FlowEvaluator<T>::block_forward(std::size_t layer, std::size_t block, std::vector<T>& a,
                                     T& log_det) const {
  const std::vector<T> in = a;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const Slot& s = model_->layout()[layer][block][i];
    SplineResult<T> r;
    if (s.coupled) {
      r = spline_forward(knots_for(s, i, in), in[i]);
    } else {
      r = spline_forward(fixed_[layer][block][i], in[i]);
    }
    a[i] = r.value;
    log_det += r.log_deriv;
  }
}

template <class T>
void FlowEvaluator<T>::block_inverse(std::size_t layer, std::size_t block, std::vector<double>& a) const {
  if constexpr (!std::is_same_v<T, double>) {
    throw InvalidArgument("flow: inverse is available for double parameters only");
  } else {
    // Conditioning inputs precede their dependents in the layer order.
    for (std::size_t i : model_->order(layer)) {
      const Slot& s = model_->layout()[layer][block][i];
      if (s.coupled) {
        a[i] = spline_inverse(knots_for(s, i, a), a[i]);
      } else {
        a[i] = spline_inverse(fixed_[layer][block][i], a[i]);
      }
    }
  }
}

template <class T>
AngleTransform<T> FlowEvaluator<T>::transform_layer(std::size_t layer, const AngleVector<T>& z) const {
  if (z.theta.size() != model_->num_angles()) throw InvalidArgument("flow: angle vector has the wrong size");
  AngleTransform<T> out;
  out.theta = z;
  for (std::size_t b = 0; b < model_->config().blocks; ++b) block_forward(layer, b, out.theta.theta, out.log_det);
  return out;
}

template <class T>
AngleTransform<T> FlowEvaluator<T>::transform(const AngleVector<T>& z) const {
  if (z.theta.size() != model_->num_angles()) throw InvalidArgument("flow: angle vector has the wrong size");
  AngleTransform<T> out;
  out.theta = z;
  for (std::size_t l = 0; l < model_->config().layers; ++l)
    for (std::size_t b = 0; b < model_->config().blocks; ++b) block_forward(l, b, out.theta.theta, out.log_det);
  return out;
}

template <class T>
AngleVector<double> FlowEvaluator<T>::inverse_layer(std::size_t layer, const AngleVector<double>& theta) const {
  AngleVector<double> z = theta;
  for (std::size_t b = model_->config().blocks; b-- > 0;) block_inverse(layer, b, z.theta);
  return z;
}

template <class T>
AngleVector<double> FlowEvaluator<T>::inverse(const AngleVector<double>& theta) const {
  if (theta.theta.size() != model_->num_angles()) throw InvalidArgument("flow: angle vector has the wrong size");
  AngleVector<double> z = theta;
  for (std::size_t l = model_->config().layers; l-- > 0;) z = inverse_layer(l, z);
  return z;
}

template <class T>
FlowPoint<T> FlowEvaluator<T>::evaluate(const AngleVector<double>& z) const {
  FlowPoint<T> p;
  p.z = z;
  AngleVector<T> zt;
  zt.domain = z.domain;
  zt.theta.assign(z.theta.begin(), z.theta.end());
  AngleTransform<T> t = transform(zt);
  p.theta = clamp_angles(t.theta);
  p.log_det_T_theta = t.log_det;
  p.log_base = T(angle_log_density_uniform_sphere(clamp_angles(z)).value);
  const std::span<const T> th(p.theta.theta);
  p.x = to_cartesian(SphericalPoint<T>{p.theta, model_->field().template radius<T>(th)});
  p.jacobian = fast_log_det<T>(p.theta, model_->field(), p.log_det_T_theta);
  p.log_q = p.log_base - p.jacobian.log_abs;
  return p;
}

// ---------------------------------------------------------------------------
// Double-precision conveniences

inline AngleTransform<double> transform_angles(const FlowModel& model, const AngleVector<double>& z) {
  return model.evaluator().transform(z);
}

struct FlowDraw {
  std::vector<double> x;
  AngleVector<double> theta;
  double log_q = 0.0;
};

template <class Rng>
std::vector<FlowDraw> sample_and_logprob(const FlowModel& model, std::size_t n, Rng& rng) {
  if (n < 1) throw InvalidArgument("sample_and_logprob: n must be >= 1");
  const auto ev = model.evaluator();
  std::vector<FlowDraw> out;
  out.reserve(n);
  for (const auto& z : sample_uniform_angles(model.dim(), n, rng, model.domain())) {
    FlowPoint<double> p = ev.evaluate(z);
    out.push_back({std::move(p.x.x), std::move(p.theta), p.log_q});
  }
  return out;
}

// Log-density of the model at a point on its manifold.
inline double logprob_at(const FlowModel& model, std::span<const double> x, double tol = 1e-6) {
  if (x.size() != model.dim()) throw InvalidArgument("logprob_at: point has the wrong dimension");
  const double residual = model.field().constraint_residual(x);
  if (!(residual <= tol)) {
    throw InvalidArgument("logprob_at: point is off the manifold (residual " + std::to_string(residual) + ")");
  }
  const auto sp = to_spherical(CartesianPoint<double>{{x.begin(), x.end()}}, model.domain());
  const auto ev = model.evaluator();
  AngleVector<double> z = ev.inverse(clamp_angles(sp.angles, 0.0));
  for (std::size_t k = 0; k < z.theta.size(); ++k) {
    z.theta[k] = std::clamp(z.theta[k], 0.0, model.interval(k));
  }
  return ev.evaluate(z).log_q;
}

inline double logprob_at(const FlowModel& model, const std::vector<double>& x, double tol = 1e-6) {
  return logprob_at(model, std::span<const double>(x), tol);
}

}  // namespace starflow
