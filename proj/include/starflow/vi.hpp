#pragma once

// Reverse-KL variational inference for flows on star-like manifolds, plus the
// metrics used to judge the fitted densities.
//
//   loss = mean_b [ log q(x_b) - log p(x_b) ],  x_b = T(z_b),  z_b ~ base
//
// Gradients are pathwise: z is drawn once and everything downstream is taped.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "starflow/ad.hpp"
#include "starflow/error.hpp"
#include "starflow/flow.hpp"
#include "starflow/jacdet.hpp"
#include "starflow/targets.hpp"

namespace starflow {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

inline void adam_step(std::vector<double>& params, std::span<const double> grads, AdamState& state,
                      const AdamConfig& cfg = {}) {
  if (grads.size() != params.size()) throw InvalidArgument("adam: gradient and parameter sizes differ");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw InvalidArgument("adam: state does not match parameters");
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mh = state.m[i] / c1;
    const double vh = state.v[i] / c2;
    params[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.eps);
  }
}

// How the log-volume term enters the gradient.
enum class VolumeGradient {
  exact,       // tape through the O(d^2) determinant
  hutchinson,  // stochastic trace estimate; the loss value stays exact
};

struct LossOptions {
  VolumeGradient volume = VolumeGradient::exact;
  std::size_t probes = 1;    // Hutchinson probes per sample
  std::size_t chunk = 64;    // samples per tape; bounds memory
};

struct LossResult {
  double loss = 0.0;
  std::vector<double> grad;
};

namespace detail {

inline std::string format_point(std::span<const double> x) {
  std::ostringstream s;
  s.precision(17);
  s << '(';
  for (std::size_t i = 0; i < x.size(); ++i) s << (i ? ", " : "") << x[i];
  s << ')';
  return s.str();
}

// log q - log p for one base draw on an existing tape.
template <class Rng>
ad::Var kl_term(const FlowModel& model, const FlowEvaluator<ad::Var>& ev, const TargetDensity& target,
                const AngleVector<double>& z, const LossOptions& opt, Rng& rng) {
  const FlowPoint<ad::Var> p = ev.evaluate(z);
  ad::Var log_q = p.log_q;
  if (opt.volume == VolumeGradient::hutchinson) {
    // Same value, gradient of the embedding volume from the trace estimator.
    const ad::Var s = hutchinson_surrogate(p.theta, model.field(), opt.probes, rng);
    const double exact = p.jacobian.log_det_sc.value() + p.jacobian.log_norm_solve.value();
    log_q = p.log_base - p.log_det_T_theta - (s - s.value() + exact);
  }
  const ad::Var log_p = target.log_density(std::span<const ad::Var>(p.x.x));
  if (!std::isfinite(log_p.value()) || !std::isfinite(log_q.value())) {
    std::vector<double> x;
    for (const auto& v : p.x.x) x.push_back(v.value());
    throw NumericalError("non-finite log-density at x = " + format_point(x) + " (log q = " +
                         std::to_string(log_q.value()) + ", log p = " + std::to_string(log_p.value()) + ")");
  }
  return log_q - log_p;
}

}  // namespace detail

// Loss and parameter gradient for the given base draws.
template <class Rng>
LossResult reverse_kl_at(const FlowModel& model, std::span<const double> params, const TargetDensity& target,
                         const std::vector<AngleVector<double>>& zs, Rng& rng, const LossOptions& opt = {}) {
  if (zs.empty()) throw InvalidArgument("reverse_kl: empty batch");
  if (target.dim() != model.dim()) throw InvalidArgument("reverse_kl: target and model dimensions differ");
  if (params.size() != model.num_params()) throw InvalidArgument("reverse_kl: parameter vector has the wrong size");
  const std::size_t chunk = std::max<std::size_t>(1, opt.chunk);
  const double inv_b = 1.0 / static_cast<double>(zs.size());
  LossResult out;
  out.grad.assign(params.size(), 0.0);
  ad::Tape tape;
  std::vector<ad::Var> pv;
  for (std::size_t start = 0; start < zs.size(); start += chunk) {
    tape.clear();
    pv.clear();
    for (double v : params) pv.push_back(tape.variable(v));
    const auto ev = model.bind<ad::Var>(pv);
    ad::Var sum(0.0);
    const std::size_t stop = std::min(zs.size(), start + chunk);
    for (std::size_t b = start; b < stop; ++b) sum += detail::kl_term(model, ev, target, zs[b], opt, rng);
    out.loss += sum.value() * inv_b;
    const auto g = tape.backward(sum);
    for (std::size_t i = 0; i < params.size(); ++i) out.grad[i] += g.leaf(i) * inv_b;
  }
  return out;
}

// Draws a batch from the base distribution, then evaluates reverse_kl_at.
template <class Rng>
LossResult reverse_kl_loss(const FlowModel& model, const TargetDensity& target, std::size_t batch_size, Rng& rng,
                           const LossOptions& opt = {}) {
  if (batch_size < 1) throw InvalidArgument("reverse_kl: batch_size must be >= 1");
  const auto zs = sample_uniform_angles(model.dim(), batch_size, rng, model.domain());
  return reverse_kl_at(model, model.params(), target, zs, rng, opt);
}

// Loss value only, in plain doubles (for finite differences).
inline double reverse_kl_value(const FlowModel& model, std::span<const double> params, const TargetDensity& target,
                               const std::vector<AngleVector<double>>& zs) {
  const auto ev = model.bind<double>(params);
  double sum = 0.0;
  for (const auto& z : zs) {
    const auto p = ev.evaluate(z);
    sum += p.log_q - target.log_density(std::span<const double>(p.x.x));
  }
  return sum / static_cast<double>(zs.size());
}

// cosine anneals the learning rate to zero over the run.
enum class LrSchedule { constant, cosine };

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch_size = 256;
  AdamConfig adam;
  LrSchedule schedule = LrSchedule::constant;
  std::uint64_t seed = 0;
  LossOptions loss;

  void validate() const {
    if (steps < 1) throw InvalidArgument("train: steps must be >= 1");
    if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
    if (!(adam.learning_rate > 0.0)) throw InvalidArgument("train: learning_rate must be > 0");
  }
};

struct TrainReport {
  std::vector<double> losses;
  std::vector<double> wallclock;  // seconds since start, per step
  double seconds = 0.0;
};

// Called after each step with (step, loss, elapsed seconds).
using TrainObserver = std::function<void(std::size_t, double, double)>;

inline TrainReport train(FlowModel& model, const TargetDensity& target, const TrainConfig& cfg,
                         const TrainObserver& observer = {}) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  AdamState state;
  TrainReport report;
  report.losses.reserve(cfg.steps);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const LossResult r = reverse_kl_loss(model, target, cfg.batch_size, rng, cfg.loss);
    bool finite = std::isfinite(r.loss);
    for (double g : r.grad) finite = finite && std::isfinite(g);
    if (!finite) throw NumericalError("train: non-finite loss or gradient at step " + std::to_string(step));
    AdamConfig adam = cfg.adam;
    if (cfg.schedule == LrSchedule::cosine) {
      adam.learning_rate *= 0.5 * (1.0 + std::cos(kPi * static_cast<double>(step) / static_cast<double>(cfg.steps)));
    }
    adam_step(model.params(), r.grad, state, adam);
    const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.losses.push_back(r.loss);
    report.wallclock.push_back(el);
    if (observer) observer(step, r.loss, el);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

inline void write_training_log(const TrainReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.precision(17);
  out << "step,loss,wallclock_s\n";
  for (std::size_t i = 0; i < report.losses.size(); ++i) {
    out << i << ',' << report.losses[i] << ',' << report.wallclock[i] << '\n';
  }
}

// Median of the last tenth of the trace minus that of the first tenth.
inline double loss_improvement(const std::vector<double>& losses) {
  if (losses.size() < 10) throw InvalidArgument("loss_improvement: need at least 10 steps");
  const std::size_t k = losses.size() / 10;
  auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    return v[v.size() / 2];
  };
  return median({losses.end() - static_cast<std::ptrdiff_t>(k), losses.end()}) -
         median({losses.begin(), losses.begin() + static_cast<std::ptrdiff_t>(k)});
}

// ---------------------------------------------------------------------------
// Metrics

using LogDensityFn = std::function<double(std::span<const double>)>;

// Mean squared log-density error over model samples.
template <class Rng>
double mse_log_density(const FlowModel& model, const LogDensityFn& truth, std::size_t n, Rng& rng) {
  if (n < 1) throw InvalidArgument("mse_log_density: n must be >= 1");
  double acc = 0.0;
  for (const auto& s : sample_and_logprob(model, n, rng)) {
    const double e = s.log_q - truth(s.x);
    acc += e * e;
  }
  return acc / static_cast<double>(n);
}

// Same, but with log q recomputed by an independent route (for the Hutchinson
// comparison): the oracle volume instead of the fast determinant.
template <class Rng>
double mse_log_density_oracle(const FlowModel& model, const LogDensityFn& truth, std::size_t n, Rng& rng) {
  if (n < 1) throw InvalidArgument("mse_log_density: n must be >= 1");
  const auto ev = model.evaluator();
  double acc = 0.0;
  for (const auto& z : sample_uniform_angles(model.dim(), n, rng, model.domain())) {
    const auto p = ev.evaluate(z);
    const double log_q = p.log_base - p.log_det_T_theta - oracle_log_det(p.theta, model.field());
    const double e = log_q - truth(p.x.x);
    acc += e * e;
  }
  return acc / static_cast<double>(n);
}

using Samples = std::vector<std::vector<double>>;

namespace detail {

inline double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline double mean_within(const Samples& a) {
  if (a.size() < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) s += distance(a[i], a[j]);
  return 2.0 * s / (static_cast<double>(a.size()) * static_cast<double>(a.size() - 1));
}

}  // namespace detail

// 2 E|a - b| - E|a - a'| - E|b - b'|, within-set terms as U-statistics.
inline double energy_distance(const Samples& a, const Samples& b) {
  if (a.empty() || b.empty()) throw InvalidArgument("energy_distance: both sample sets must be nonempty");
  const std::size_t d = a[0].size();
  for (const auto& v : a)
    if (v.size() != d) throw InvalidArgument("energy_distance: inconsistent dimensions");
  for (const auto& v : b)
    if (v.size() != d) throw InvalidArgument("energy_distance: inconsistent dimensions");
  double cross = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) cross += detail::distance(x, y);
  cross /= static_cast<double>(a.size()) * static_cast<double>(b.size());
  return 2.0 * cross - detail::mean_within(a) - detail::mean_within(b);
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Linear-interpolated empirical quantile of sorted data.
inline double sorted_quantile(const std::vector<double>& s, double q) {
  if (s.empty()) throw InvalidArgument("quantile: empty sample");
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= s.size()) return s.back();
  const double f = pos - static_cast<double>(i);
  return s[i] + f * (s[i + 1] - s[i]);
}

inline std::vector<Interval> credibility_intervals(const Samples& samples, double level) {
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("credibility_intervals: level must be in (0, 1)");
  if (samples.empty()) throw InvalidArgument("credibility_intervals: no samples");
  const std::size_t d = samples[0].size();
  std::vector<Interval> out(d);
  std::vector<double> col(samples.size());
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t i = 0; i < samples.size(); ++i) col[i] = samples[i].at(k);
    std::sort(col.begin(), col.end());
    out[k] = {sorted_quantile(col, 0.5 * (1.0 - level)), sorted_quantile(col, 0.5 * (1.0 + level))};
  }
  return out;
}

// Mean absolute endpoint error between two interval lists.
inline double interval_error(const std::vector<Interval>& a, const std::vector<Interval>& b) {
  if (a.size() != b.size() || a.empty()) throw InvalidArgument("interval_error: lists differ in length");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::fabs(a[k].lo - b[k].lo) + std::fabs(a[k].hi - b[k].hi);
  return s / (2.0 * static_cast<double>(a.size()));
}

template <class Rng>
Samples draw_samples(const FlowModel& model, std::size_t n, Rng& rng) {
  Samples out;
  out.reserve(n);
  for (auto& s : sample_and_logprob(model, n, rng)) out.push_back(std::move(s.x));
  return out;
}

}  // namespace starflow
