#pragma once

// Experiment drivers shared by the command-line tool and the acceptance run.
// Each driver reads a flat Config, writes its artifacts into ctx.out and
// returns a metrics object. Anything that depends on the clock lives under the
// "timing" key (and in the wallclock_s column of training logs) so the rest is
// reproducible from the seed alone.

#include <boost/version.hpp>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "starflow/bench.hpp"
#include "starflow/checkpoint.hpp"
#include "starflow/config.hpp"
#include "starflow/diagnostics.hpp"
#include "starflow/mcmc.hpp"
#include "starflow/targets.hpp"
#include "starflow/vi.hpp"

namespace starflow {

inline constexpr const char* kVersion = "0.1.0";

struct RunContext {
  std::filesystem::path out;
  std::uint64_t seed = 0;
};

// Independent stream per purpose, so adding draws in one place never shifts another.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

enum Purpose : std::uint64_t { kTrainStream = 1, kEvalStream, kConstraintStream, kDataStream, kMcmcStream, kAuxStream };

// ---------------------------------------------------------------------------
// Config readers

inline RadiusField field_from_config(const Config& c, const std::string& fallback = "sphere") {
  const std::string kind = c.get<std::string>("manifold", fallback);
  if (kind == "sphere") return RadiusField::sphere(c.get<double>("radius", 1.0));
  if (kind == "lp" || kind == "lp_ball") return RadiusField::lp_ball(c.require<double>("p"), c.get<double>("t", 1.0));
  if (kind == "simplex") return RadiusField::simplex();
  if (kind == "deformed") {
    return RadiusField::deformed(c.get<double>("amplitude", 0.2), c.get<double>("deform_frequency", 3.0));
  }
  throw ConfigError(c.where("manifold") + ": key 'manifold': unknown kind '" + kind +
                    "' (expected sphere, lp, simplex or deformed)");
}

inline FlowConfig flow_from_config(const Config& c, FlowConfig f = {}) {
  f.layers = c.get<std::size_t>("layers", f.layers);
  f.blocks = c.get<std::size_t>("blocks", f.blocks);
  f.bins = c.get<std::size_t>("bins", f.bins);
  f.coupled_blocks = c.get<std::size_t>("coupled_blocks", f.coupled_blocks);
  f.frequencies = c.get<std::size_t>("fourier_frequencies", f.frequencies);
  f.window = c.get<std::size_t>("window", f.window);
  f.min_bin = c.get<double>("min_bin", f.min_bin);
  f.min_derivative = c.get<double>("min_derivative", f.min_derivative);
  f.validate();
  return f;
}

inline TrainConfig train_from_config(const Config& c, std::uint64_t seed, TrainConfig t = {}) {
  t.steps = c.get<std::size_t>("steps", t.steps);
  t.batch_size = c.get<std::size_t>("batch_size", t.batch_size);
  t.adam.learning_rate = c.get<double>("learning_rate", t.adam.learning_rate);
  t.loss.chunk = c.get<std::size_t>("chunk", t.loss.chunk);
  const std::string sched = c.get<std::string>("lr_schedule", t.schedule == LrSchedule::cosine ? "cosine" : "constant");
  if (sched == "constant") {
    t.schedule = LrSchedule::constant;
  } else if (sched == "cosine") {
    t.schedule = LrSchedule::cosine;
  } else {
    throw ConfigError(c.where("lr_schedule") + ": key 'lr_schedule': expected constant or cosine");
  }
  const std::string vol = c.get<std::string>("volume_gradient", "exact");
  if (vol == "exact") {
    t.loss.volume = VolumeGradient::exact;
  } else if (vol == "hutchinson") {
    t.loss.volume = VolumeGradient::hutchinson;
  } else {
    throw ConfigError(c.where("volume_gradient") + ": key 'volume_gradient': expected exact or hutchinson");
  }
  t.loss.probes = c.get<std::size_t>("probes", t.loss.probes);
  t.seed = stream(seed, kTrainStream)();
  t.validate();
  return t;
}

inline Config::Json intervals_json(const std::vector<Interval>& v) {
  Config::Json a = Config::Json::array();
  for (const auto& i : v) a.push_back({i.lo, i.hi});
  return a;
}

inline Config::Json constraint_json(const ConstraintReport& r, double tol) {
  return {{"samples", r.samples}, {"violations", r.violations}, {"max_residual", r.max_residual}, {"tolerance", tol}};
}

inline std::vector<double> column_mean(const Samples& s) {
  std::vector<double> m(s.at(0).size(), 0.0);
  for (const auto& x : s)
    for (std::size_t i = 0; i < x.size(); ++i) m[i] += x[i] / static_cast<double>(s.size());
  return m;
}

// Mean of the last tenth of a loss trace.
inline double final_loss(const std::vector<double>& losses) {
  const std::size_t k = std::max<std::size_t>(1, losses.size() / 10);
  return std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(k), losses.end(), 0.0) / static_cast<double>(k);
}

inline Config::Json train_summary(const TrainReport& r) {
  Config::Json j{{"steps", r.losses.size()}, {"final_loss", final_loss(r.losses)}};
  if (r.losses.size() >= 10) j["loss_improvement"] = loss_improvement(r.losses);
  return j;
}

// "lp_ball(p=0.5,t=1)" style label built from the checkpoint encoding.
inline std::string checkpoint_field_label(const RadiusField& f) {
  const Config::Json j = field_to_json(f);
  std::string out = f.name(), args;
  for (const auto& [k, v] : j.items()) {
    if (k == "kind") continue;
    std::ostringstream s;
    s << k << '=' << v.dump();
    args += (args.empty() ? "" : ",") + s.str();
  }
  return args.empty() ? out : out + "(" + args + ")";
}

namespace detail {

inline std::string path_in(const RunContext& ctx, const std::string& name) { return (ctx.out / name).string(); }

inline std::vector<double> unit_vector(std::vector<double> v, const Config& c, const std::string& key) {
  double s = 0.0;
  for (double x : v) s += x * x;
  if (!(s > 0.0)) throw ConfigError(c.where(key) + ": key '" + key + "': vector must be nonzero");
  for (double& x : v) x /= std::sqrt(s);
  return v;
}

inline std::vector<double> counts_or_alpha(const Config& c, const std::string& key, std::size_t d, double fallback) {
  if (!c.has(key)) {
    (void)c.get<double>(key, fallback);
    return std::vector<double>(d, fallback);
  }
  if (c.json().at(key).is_number()) return std::vector<double>(d, c.get<double>(key, fallback));
  auto v = c.get<std::vector<double>>(key, {});
  if (v.size() != d) {
    throw ConfigError(c.where(key) + ": key '" + key + "': expected " + std::to_string(d) + " entries, got " +
                      std::to_string(v.size()));
  }
  return v;
}

template <class F>
double seconds_of(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// jacdet-verify: fast determinant against the dense oracle

inline Config::Json run_jacdet_verify(const Config& c, const RunContext& ctx) {
  const std::size_t d_min = c.get<std::size_t>("d_min", 2), d_max = c.get<std::size_t>("d_max", 50);
  const std::size_t points = c.get<std::size_t>("points", 100);
  if (d_min < 2 || d_max < d_min) throw ConfigError(c.where("d_min") + ": need 2 <= d_min <= d_max");
  std::vector<std::pair<std::string, RadiusField>> fields;
  if (c.get<std::string>("manifold", "all") == "all") {
    fields = {{"sphere", RadiusField::sphere()},     {"lp_p0.5", RadiusField::lp_ball(0.5)},
              {"lp_p1", RadiusField::lp_ball(1.0)},  {"lp_p2", RadiusField::lp_ball(2.0)},
              {"simplex", RadiusField::simplex()},   {"deformed", RadiusField::deformed()}};
  } else {
    const RadiusField f = field_from_config(c);
    fields = {{checkpoint_field_label(f), f}};
  }
  c.reject_unused();
  auto rng = stream(ctx.seed, kAuxStream);
  std::ofstream csv(detail::path_in(ctx, "verify.csv"));
  if (!csv) throw IoError("cannot write verify.csv in '" + ctx.out.string() + "'");
  csv.precision(17);
  csv << "manifold,d,points,max_rel_error\n";
  Config::Json per = Config::Json::object();
  double worst = 0.0;
  for (const auto& [label, f] : fields) {
    double fw = 0.0;
    for (std::size_t d = d_min; d <= d_max; ++d) {
      double dw = 0.0;
      for (std::size_t k = 0; k < points; ++k) {
        const auto th = random_interior_angles(d, f.domain(), rng);
        const double fast = fast_log_det<double>(th, f).log_abs;
        const double oracle = oracle_log_det<double>(th, f);
        dw = std::max(dw, std::fabs(fast - oracle) / std::max(1.0, std::fabs(oracle)));
      }
      csv << label << ',' << d << ',' << points << ',' << dw << '\n';
      fw = std::max(fw, dw);
    }
    per[label] = fw;
    worst = std::max(worst, fw);
  }
  return {{"max_rel_error", worst}, {"per_manifold", per}, {"d_min", d_min}, {"d_max", d_max}, {"points", points}};
}

// ---------------------------------------------------------------------------
// jacdet-bench: runtime scaling

inline Config::Json run_jacdet_bench(const Config& c, const RunContext& ctx) {
  const auto field = field_from_config(c);
  const auto dims = c.get<std::vector<std::size_t>>("dims", {16, 32, 64, 128, 256, 512});
  const std::size_t reps = c.get<std::size_t>("reps", 20);
  const double min_rep = c.get<double>("min_rep_seconds", 2e-4);
  c.reject_unused();
  auto rng = stream(ctx.seed, kAuxStream);
  const BenchResult r = time_jacdet(dims, reps, field, rng, min_rep);
  write_bench_csv(r, detail::path_in(ctx, "bench.csv"));
  Config::Json timing = Config::Json::object();
  for (const std::string m : {"fast", "oracle"}) {
    const auto fit = fit_loglog_exponent(r.rows, m);
    const auto med = median_seconds(r.rows, m);
    Config::Json medians = Config::Json::object();
    bool monotone = true;
    double prev = 0.0;
    for (const auto& [d, s] : med) {
      medians[std::to_string(d)] = s;
      monotone = monotone && s > prev;
      prev = s;
    }
    timing[m] = {{"slope", fit.slope}, {"intercept", fit.intercept}, {"stderr_slope", fit.stderr_slope},
                 {"median_seconds", medians}, {"monotone", monotone}};
  }
  const auto fast = median_seconds(r.rows, "fast"), oracle = median_seconds(r.rows, "oracle");
  Config::Json speedup = Config::Json::object();
  for (const auto& [d, s] : fast) speedup[std::to_string(d)] = oracle.at(d) / s;
  timing["speedup"] = speedup;
  return {{"manifold", field.name()}, {"dims", dims}, {"reps", reps}, {"max_rel_error", r.max_rel_error},
          {"timing", timing}};
}

// ---------------------------------------------------------------------------
// train-3d: density reconstruction on two-dimensional manifolds in R^3

inline Config::Json run_train_3d(const Config& c, const RunContext& ctx) {
  const std::string kind = c.get<std::string>("target", "vmf");
  const auto field = field_from_config(c, kind == "sinusoidal" ? "deformed" : "sphere");
  const bool unit_sphere = field.name() == "sphere" && field.radius<double>(std::vector<double>{1.0, 1.0}) == 1.0;

  std::unique_ptr<TargetDensity> target;
  LogDensityFn truth;
  std::vector<std::vector<double>> modes;
  if (kind == "vmf") {
    auto mu = detail::unit_vector(c.get<std::vector<double>>("mu", {1.0, 1.0, 1.0}), c, "mu");
    auto v = std::make_unique<VonMisesFisher>(mu, c.get<double>("kappa", 5.0));
    if (unit_sphere) {
      const VonMisesFisher* p = v.get();
      truth = [p](std::span<const double> x) { return p->log_density(x) + p->log_normalizer(); };
    }
    modes.push_back(mu);
    target = std::move(v);
  } else if (kind == "mixture") {
    auto m = std::make_unique<VmfMixture>(
        spiral_mixture(c.get<std::size_t>("components", 50), c.get<double>("mixture_kappa", 50.0)));
    if (unit_sphere) {
      const VmfMixture* p = m.get();
      truth = [p](std::span<const double> x) { return p->log_density_normalized(x); };
    }
    for (const auto& comp : m->components()) modes.push_back(comp.mu);
    target = std::move(m);
  } else if (kind == "sinusoidal") {
    target = std::make_unique<Sinusoidal>(c.get<double>("sin_frequency", 4.0));
  } else if (kind == "uniform") {
    target = std::make_unique<UniformTarget>(3, 0.0);
  } else {
    throw ConfigError(c.where("target") + ": key 'target': unknown target '" + kind +
                      "' (expected vmf, mixture, sinusoidal or uniform)");
  }
  FlowModel model(3, field, flow_from_config(c));
  const TrainConfig tc = train_from_config(c, ctx.seed, [] {
    TrainConfig t;
    t.steps = 2000;
    return t;
  }());
  const std::size_t eval_n = c.get<std::size_t>("eval_samples", 10000);
  const std::size_t constraint_n = c.get<std::size_t>("constraint_samples", 100000);
  const std::size_t grid_res = c.get<std::size_t>("grid_resolution", kind == "mixture" ? 200 : 100);
  const std::size_t norm_res = c.get<std::size_t>("normalizer_resolution", 400);
  const double tol = c.get<double>("constraint_tolerance", 1e-8);
  c.reject_unused();

  Config::Json metrics{{"target", kind}, {"manifold", field.name()}};
  if (!truth) {
    // Unknown normalizer: integrate the target on a fine grid.
    const TargetDensity* p = target.get();
    const double log_z = log_integral_3d([p](std::span<const double> x) { return p->log_density(x); }, field,
                                         model.domain(), norm_res);
    truth = [p, log_z](std::span<const double> x) { return p->log_density(x) - log_z; };
    metrics["target_log_normalizer_quadrature"] = log_z;
  }

  const TrainReport rep = train(model, *target, tc);
  write_training_log(rep, detail::path_in(ctx, "training_log.csv"));
  save_checkpoint(model, detail::path_in(ctx, "checkpoint.json"));
  metrics["train"] = train_summary(rep);

  auto eval_rng = stream(ctx.seed, kEvalStream);
  metrics["mse_log_density"] = mse_log_density(model, truth, eval_n, eval_rng);
  metrics["eval_samples"] = eval_n;
  auto con_rng = stream(ctx.seed, kConstraintStream);
  metrics["constraint"] = constraint_json(check_constraint(model, constraint_n, tol, con_rng), tol);
  metrics["normalization"] = integrate_model_3d(model, 100);

  const auto grid = emit_density_grid(model, grid_res, detail::path_in(ctx, "density_grid.csv"));
  const auto best = std::max_element(grid.begin(), grid.end(),
                                     [](const auto& a, const auto& b) { return a.log_q < b.log_q; });
  metrics["grid"] = {{"resolution", grid_res}, {"argmax_theta", {best->theta1, best->theta2}}, {"max_log_q", best->log_q}};
  if (kind == "mixture") {
    const double level = std::log(2.0 / (4.0 * kPi));
    const ModeRecall r = mode_recall(grid, modes, level, c.get<double>("mode_radius", 0.15));
    metrics["mode_recall"] = {{"recovered", r.recovered}, {"modes", r.modes}, {"set_size", r.set_size},
                              {"precision", r.precision}, {"log_level", level}};
  }
  metrics["timing"] = {{"train_seconds", rep.seconds}};
  return metrics;
}

// ---------------------------------------------------------------------------
// density-grid: evaluate a saved d = 3 model on an angle grid

inline Config::Json run_density_grid(const Config& c, const RunContext& ctx) {
  const std::string path = c.require<std::string>("checkpoint");
  const std::size_t res = c.get<std::size_t>("resolution", 100);
  c.reject_unused();
  const FlowModel model = load_checkpoint(path);
  const auto rows = emit_density_grid(model, res, detail::path_in(ctx, "density_grid.csv"));
  const auto best = std::max_element(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.log_q < b.log_q; });
  return {{"rows", rows.size()}, {"resolution", res}, {"argmax_theta", {best->theta1, best->theta2}},
          {"max_log_q", best->log_q}};
}

// ---------------------------------------------------------------------------
// objective-bayes: regression posterior restricted to ||beta||_p = k

inline Config::Json run_objective_bayes(const Config& c, const RunContext& ctx) {
  const std::size_t d = c.get<std::size_t>("d", 5);
  const std::size_t dof = c.get<std::size_t>("wishart_dof", 7);
  const double noise_sd = c.get<double>("noise_sd", 4.0);
  const double sigma = c.get<double>("sigma", 1.0);
  const double p = c.get<double>("p", 1.0);
  const auto norms = c.get<std::vector<double>>("norms", {0.5, 1.0, 2.0, 4.0});
  const std::size_t n_post = c.get<std::size_t>("posterior_samples", 2000);
  const std::size_t constraint_n = c.get<std::size_t>("constraint_samples", 100000);
  const double tol = c.get<double>("constraint_tolerance", 1e-8);
  const FlowConfig fc = flow_from_config(c);
  TrainConfig defaults;
  defaults.steps = 1000;
  defaults.batch_size = 128;
  const TrainConfig tc = train_from_config(c, ctx.seed, defaults);
  c.reject_unused();
  if (d < 2 || dof < d) throw ConfigError(c.source() + ": need d >= 2 and wishart_dof >= d");

  // X ~ Wishart_d(dof, I), beta* ~ N(0, I), y = X beta* + N(0, noise_sd^2).
  auto data_rng = stream(ctx.seed, kDataStream);
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix<double> x(d, d);
  for (std::size_t k = 0; k < dof; ++k) {
    std::vector<double> g(d);
    for (auto& v : g) v = n01(data_rng);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) x(i, j) += g[i] * g[j];
  }
  std::vector<double> beta(d), y(d);
  for (auto& v : beta) v = n01(data_rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) y[i] += x(i, j) * beta[j];
    y[i] += noise_sd * n01(data_rng);
  }
  const GaussianRegression target(x, y, sigma);

  std::ofstream path_csv(detail::path_in(ctx, "posterior_path.csv"));
  if (!path_csv) throw IoError("cannot write posterior_path.csv");
  path_csv.precision(17);
  path_csv << "norm,coef,mean,lo,hi\n";
  Config::Json path = Config::Json::array();
  Config::Json timing = Config::Json::array();
  for (std::size_t k = 0; k < norms.size(); ++k) {
    FlowModel model(d, RadiusField::lp_ball(p, norms[k]), fc);
    TrainConfig t = tc;
    t.seed = tc.seed + k;
    const TrainReport rep = train(model, target, t);
    write_training_log(rep, detail::path_in(ctx, "training_log_norm" + std::to_string(k) + ".csv"));
    auto rng = stream(ctx.seed + k, kEvalStream);
    const Samples s = draw_samples(model, n_post, rng);
    const auto mean = column_mean(s);
    const auto ci = credibility_intervals(s, 0.95);
    for (std::size_t i = 0; i < d; ++i)
      path_csv << norms[k] << ',' << i << ',' << mean[i] << ',' << ci[i].lo << ',' << ci[i].hi << '\n';
    auto con_rng = stream(ctx.seed + k, kConstraintStream);
    path.push_back({{"norm", norms[k]},
                    {"posterior_mean", mean},
                    {"intervals", intervals_json(ci)},
                    {"train", train_summary(rep)},
                    {"constraint", constraint_json(check_constraint(model, constraint_n, tol, con_rng), tol)}});
    timing.push_back(rep.seconds);
  }
  return {{"d", d},
          {"p", p},
          {"beta_true", beta},
          {"y", y},
          {"x", x.data()},
          {"path", path},
          {"timing", {{"train_seconds", timing}}}};
}

// ---------------------------------------------------------------------------
// mixing-mcmc-compare: conjugate Dirichlet-multinomial, flow vs Metropolis-Hastings

inline Config::Json run_mixing_mcmc_compare(const Config& c, const RunContext& ctx) {
  const auto counts = c.get<std::vector<double>>(
      "counts", {30, 15, 8, 4, 2, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  const std::size_t d = counts.size();
  if (d < 2) throw ConfigError(c.where("counts") + ": key 'counts': need at least two categories");
  const auto alpha = detail::counts_or_alpha(c, "alpha", d, 1.0);
  const double level = c.get<double>("level", 0.95);
  const std::size_t flow_n = c.get<std::size_t>("flow_samples", 20000);
  const std::size_t energy_n = c.get<std::size_t>("energy_samples", 1000);
  const std::size_t constraint_n = c.get<std::size_t>("constraint_samples", 100000);
  const double tol = c.get<double>("constraint_tolerance", 1e-8);
  MHConfig mc;
  mc.chains = c.get<std::size_t>("mh_chains", 100);
  mc.thin = c.get<std::size_t>("mh_thin", 10);
  mc.concentration_scale = c.get<double>("mh_concentration_scale", 0.0);
  const std::size_t mh_len = c.get<std::size_t>("mh_samples_per_chain", 0);  // 0: match the flow's wall-clock
  const FlowConfig fc = flow_from_config(c);
  TrainConfig defaults;
  defaults.steps = 600;
  defaults.batch_size = 128;
  defaults.adam.learning_rate = 3e-3;
  const TrainConfig tc = train_from_config(c, ctx.seed, defaults);
  const bool write_chain = c.get<bool>("write_chain", false);
  c.reject_unused();

  const DirichletMultinomial target(counts, alpha);
  const auto post = dirichlet_posterior_analytic(alpha, counts);
  const auto truth = post.intervals(level);

  FlowModel model(d, RadiusField::simplex(), fc);
  TrainReport rep;
  Samples flow_s;
  auto rng = stream(ctx.seed, kEvalStream);
  const double flow_seconds = detail::seconds_of([&] {
    rep = train(model, target, tc);
    flow_s = draw_samples(model, flow_n, rng);
  });
  write_training_log(rep, detail::path_in(ctx, "training_log.csv"));
  save_checkpoint(model, detail::path_in(ctx, "checkpoint.json"));
  const auto flow_ci = credibility_intervals(flow_s, level);

  if (mh_len > 0) {
    mc.samples_per_chain = mh_len;
  } else {
    mc.samples_per_chain = std::numeric_limits<std::size_t>::max() / 2;
    mc.time_budget_s = flow_seconds;
  }
  auto mh_rng = stream(ctx.seed, kMcmcStream);
  const ChainOutput chain = mh_simplex(target, mc, mh_rng);
  if (chain.samples.empty()) throw NumericalError("mh: no samples survived burn-in; raise the budget");
  if (write_chain) write_chain_csv(chain, detail::path_in(ctx, "chain.csv"));
  const auto mh_ci = credibility_intervals(chain.samples, level);

  std::ofstream csv(detail::path_in(ctx, "intervals.csv"));
  if (!csv) throw IoError("cannot write intervals.csv");
  csv.precision(17);
  csv << "coord,truth_lo,truth_hi,flow_lo,flow_hi,mh_lo,mh_hi\n";
  for (std::size_t i = 0; i < d; ++i) {
    csv << i << ',' << truth[i].lo << ',' << truth[i].hi << ',' << flow_ci[i].lo << ',' << flow_ci[i].hi << ','
        << mh_ci[i].lo << ',' << mh_ci[i].hi << '\n';
  }

  // Energy distance to exact posterior draws, on evenly spaced subsamples.
  auto subsample = [energy_n](const Samples& s) {
    Samples out;
    const std::size_t n = std::min(energy_n, s.size());
    for (std::size_t k = 0; k < n; ++k) out.push_back(s[k * s.size() / n]);
    return out;
  };
  auto exact_rng = stream(ctx.seed, kAuxStream);
  const Samples exact = post.sample(energy_n, exact_rng);
  auto con_rng = stream(ctx.seed, kConstraintStream);

  Config::Json metrics{
      {"d", d},
      {"level", level},
      {"truth_intervals", intervals_json(truth)},
      {"flow", {{"ci_error", interval_error(flow_ci, truth)},
                {"intervals", intervals_json(flow_ci)},
                {"energy_distance", energy_distance(subsample(flow_s), exact)},
                {"train", train_summary(rep)},
                {"constraint", constraint_json(check_constraint(model, constraint_n, tol, con_rng), tol)}}},
      {"mh", {{"ci_error", interval_error(mh_ci, truth)},
              {"intervals", intervals_json(mh_ci)},
              {"energy_distance", energy_distance(subsample(chain.samples), exact)},
              {"chains", mc.chains},
              {"thin", mc.thin},
              {"matched_wallclock", mh_len == 0}}}};
  metrics["timing"] = {{"flow_seconds", flow_seconds},
                       {"mh_seconds", chain.seconds},
                       {"mh_proposals", chain.proposals},
                       {"mh_kept", chain.samples.size()},
                       {"mh_acceptance_rate", chain.acceptance_rate}};
  if (mh_len > 0) {
    // Deterministic when the chain length is fixed.
    metrics["mh"]["proposals"] = chain.proposals;
    metrics["mh"]["acceptance_rate"] = chain.acceptance_rate;
  }
  return metrics;
}

// ---------------------------------------------------------------------------
// portfolio: index-tracking weights on the simplex

inline Config::Json run_portfolio(const Config& c, const RunContext& ctx) {
  const std::string csv_path = c.require<std::string>("csv");
  const double sigma = c.get<double>("sigma", 0.01);
  const std::string prior_name = c.get<std::string>("prior", "uniform");
  const std::size_t n_post = c.get<std::size_t>("posterior_samples", 5000);
  const std::size_t constraint_n = c.get<std::size_t>("constraint_samples", 100000);
  const double tol = c.get<double>("constraint_tolerance", 1e-8);
  const FlowConfig fc = flow_from_config(c);
  TrainConfig defaults;
  defaults.steps = 1000;
  defaults.batch_size = 128;
  const TrainConfig tc = train_from_config(c, ctx.seed, defaults);
  PortfolioPrior prior;
  if (prior_name == "uniform") {
    prior = PortfolioPrior::uniform;
  } else if (prior_name == "dirichlet") {
    prior = PortfolioPrior::dirichlet;
  } else {
    throw ConfigError(c.where("prior") + ": key 'prior': expected uniform or dirichlet");
  }
  if (!std::filesystem::exists(csv_path)) {
    throw ConfigError(c.where("csv") + ": key 'csv': file '" + csv_path + "' does not exist");
  }
  const PortfolioData data = load_portfolio_csv(csv_path);
  const std::size_t n = data.assets.size();
  const auto alpha = detail::counts_or_alpha(c, "alpha", n, 1.0);
  c.reject_unused();
  if (n < 2) throw ConfigError(c.where("csv") + ": key 'csv': need at least two asset columns");

  const PortfolioPosterior target(data.returns, data.index, sigma, prior, alpha);
  FlowModel model(n, RadiusField::simplex(), fc);
  const TrainReport rep = train(model, target, tc);
  write_training_log(rep, detail::path_in(ctx, "training_log.csv"));
  save_checkpoint(model, detail::path_in(ctx, "checkpoint.json"));
  auto rng = stream(ctx.seed, kEvalStream);
  const Samples s = draw_samples(model, n_post, rng);
  {
    std::ofstream out(detail::path_in(ctx, "weights.csv"));
    if (!out) throw IoError("cannot write weights.csv");
    out.precision(17);
    for (std::size_t i = 0; i < n; ++i) out << (i ? "," : "") << data.assets[i];
    out << '\n';
    for (const auto& w : s) {
      for (std::size_t i = 0; i < n; ++i) out << (i ? "," : "") << w[i];
      out << '\n';
    }
  }
  const auto mean = column_mean(s);
  double sse = 0.0;
  for (std::size_t t = 0; t < data.index.size(); ++t) {
    double fit = 0.0;
    for (std::size_t i = 0; i < n; ++i) fit += data.returns(t, i) * mean[i];
    sse += (fit - data.index[t]) * (fit - data.index[t]);
  }
  auto con_rng = stream(ctx.seed, kConstraintStream);
  Config::Json weights = Config::Json::object();
  for (std::size_t i = 0; i < n; ++i) weights[data.assets[i]] = mean[i];
  return {{"assets", data.assets},
          {"observations", data.index.size()},
          {"posterior_mean", weights},
          {"intervals", intervals_json(credibility_intervals(s, 0.95))},
          {"tracking_rmse", std::sqrt(sse / static_cast<double>(data.index.size()))},
          {"train", train_summary(rep)},
          {"constraint", constraint_json(check_constraint(model, constraint_n, tol, con_rng), tol)},
          {"timing", {{"train_seconds", rep.seconds}}}};
}

// ---------------------------------------------------------------------------
// hutchinson-compare: exact against stochastic volume gradients

inline Config::Json run_hutchinson_compare(const Config& c, const RunContext& ctx) {
  const std::size_t d = c.get<std::size_t>("d", 8);
  const double p = c.get<double>("p", 0.5);
  const double t = c.get<double>("t", 1.0);
  const auto train_probes = c.get<std::vector<std::size_t>>("probes_list", {1});
  const auto var_probes = c.get<std::vector<std::size_t>>("variance_probes", {1, 5, 7});
  const std::size_t var_points = c.get<std::size_t>("variance_points", 10);
  const std::size_t var_draws = c.get<std::size_t>("variance_draws", 200);
  const std::size_t eval_n = c.get<std::size_t>("eval_samples", 2000);
  const std::size_t constraint_n = c.get<std::size_t>("constraint_samples", 100000);
  const double tol = c.get<double>("constraint_tolerance", 1e-8);
  const FlowConfig fc = flow_from_config(c);
  TrainConfig defaults;
  defaults.steps = 500;
  defaults.batch_size = 64;
  const TrainConfig base = train_from_config(c, ctx.seed, defaults);
  c.reject_unused();
  for (std::size_t n : train_probes)
    if (n < 1 || n > d - 1) throw ConfigError(c.where("probes_list") + ": probes must be in [1, d-1]");
  for (std::size_t n : var_probes)
    if (n < 1 || n > d - 1) throw ConfigError(c.where("variance_probes") + ": probes must be in [1, d-1]");

  const RadiusField field = RadiusField::lp_ball(p, t);
  const LpConeMeasure target(d, p, t);
  const LogDensityFn truth = [&target](std::span<const double> x) { return target.log_density(x); };

  Config::Json runs = Config::Json::object();
  Config::Json timing = Config::Json::object();
  auto run = [&](const std::string& name, TrainConfig tc) {
    FlowModel model(d, field, fc);
    const TrainReport rep = train(model, target, tc);
    write_training_log(rep, detail::path_in(ctx, "training_log_" + name + ".csv"));
    auto eval_rng = stream(ctx.seed, kEvalStream);
    auto con_rng = stream(ctx.seed, kConstraintStream);
    runs[name] = {{"mse_log_density", mse_log_density_oracle(model, truth, eval_n, eval_rng)},
                  {"train", train_summary(rep)},
                  {"constraint", constraint_json(check_constraint(model, constraint_n, tol, con_rng), tol)}};
    timing[name] = rep.seconds;
  };
  TrainConfig exact = base;
  exact.loss.volume = VolumeGradient::exact;
  run("exact", exact);
  Config::Json ratio = Config::Json::object();
  for (std::size_t n : train_probes) {
    TrainConfig h = base;
    h.loss.volume = VolumeGradient::hutchinson;
    h.loss.probes = n;
    const std::string name = "hutchinson_n" + std::to_string(n);
    run(name, h);
    ratio[name] = runs[name]["mse_log_density"].get<double>() / runs["exact"]["mse_log_density"].get<double>();
  }

  // Mean squared error of the estimated gradient of log vol at random interior points.
  auto rng = stream(ctx.seed, kAuxStream);
  std::vector<AngleVector<double>> pts;
  for (std::size_t k = 0; k < var_points; ++k) pts.push_back(random_interior_angles(d, field.domain(), rng));
  std::vector<std::vector<double>> exact_g;
  for (const auto& th : pts) exact_g.push_back(oracle_log_det_gradient(th, field));
  std::ofstream csv(detail::path_in(ctx, "variance.csv"));
  if (!csv) throw IoError("cannot write variance.csv");
  csv.precision(17);
  csv << "probes,variance\n";
  Config::Json variance = Config::Json::object();
  std::vector<double> vs;
  for (std::size_t n : var_probes) {
    double acc = 0.0;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      for (std::size_t r = 0; r < var_draws; ++r) {
        const auto g = hutchinson_grad_estimate(pts[k], field, n, rng);
        for (std::size_t i = 0; i < g.size(); ++i) acc += (g[i] - exact_g[k][i]) * (g[i] - exact_g[k][i]);
      }
    }
    const double v = acc / static_cast<double>(pts.size() * var_draws);
    csv << n << ',' << v << '\n';
    variance[std::to_string(n)] = v;
    vs.push_back(v);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < vs.size(); ++i) monotone = monotone && vs[i] < vs[i - 1];
  return {{"d", d},
          {"p", p},
          {"runs", runs},
          {"mse_ratio", ratio},
          {"estimator_variance", variance},
          {"variance_monotone", monotone},
          {"timing", {{"train_seconds", timing}}}};
}

// ---------------------------------------------------------------------------
// Dispatch, manifest and metrics files

using ExperimentFn = std::function<Config::Json(const Config&, const RunContext&)>;

inline const std::map<std::string, ExperimentFn>& experiments() {
  static const std::map<std::string, ExperimentFn> table{
      {"jacdet-bench", run_jacdet_bench},
      {"jacdet-verify", run_jacdet_verify},
      {"train-3d", run_train_3d},
      {"objective-bayes", run_objective_bayes},
      {"mixing-mcmc-compare", run_mixing_mcmc_compare},
      {"portfolio", run_portfolio},
      {"hutchinson-compare", run_hutchinson_compare},
      {"density-grid", run_density_grid},
  };
  return table;
}

inline std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_json(const Config::Json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline Config::Json versions() {
  return {{"starflow", kVersion},
          {"compiler", __VERSION__},
          {"cplusplus", __cplusplus},
          {"boost", BOOST_LIB_VERSION},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

// Writes manifest.json before the work starts and again (with wall-clock) after.
inline Config::Json run_experiment(const std::string& name, const Config& config, const RunContext& ctx) {
  const auto it = experiments().find(name);
  if (it == experiments().end()) throw InvalidArgument("unknown experiment '" + name + "'");
  std::filesystem::create_directories(ctx.out);
  Config::Json manifest{{"experiment", name},
                        {"config", config.json()},
                        {"config_source", config.source()},
                        {"seed", ctx.seed},
                        {"versions", versions()},
                        {"timing", {{"started_utc", utc_now()}}},
                        {"status", "running"}};
  write_json(manifest, ctx.out / "manifest.json");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    Config::Json metrics = it->second(config, ctx);
    metrics["experiment"] = name;
    metrics["seed"] = ctx.seed;
    write_json(metrics, ctx.out / "metrics.json");
    manifest["status"] = "ok";
    manifest["timing"]["finished_utc"] = utc_now();
    manifest["timing"]["wallclock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json(manifest, ctx.out / "manifest.json");
    return metrics;
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["timing"]["finished_utc"] = utc_now();
    write_json(manifest, ctx.out / "manifest.json");
    throw;
  }
}

}  // namespace starflow
