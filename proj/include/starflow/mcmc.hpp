#pragma once

// Metropolis-Hastings on the probability simplex with a Dirichlet proposal
// centred on the current state, and the conjugate Dirichlet posterior used as
// ground truth.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <boost/math/distributions/beta.hpp>

#include "starflow/error.hpp"
#include "starflow/targets.hpp"
#include "starflow/vi.hpp"

namespace starflow {

struct MHConfig {
  std::size_t chains = 100;
  std::size_t samples_per_chain = 10000;
  double concentration_scale = 0.0;  // 0 selects 100 d
  double concentration_floor = 1e-3;
  std::size_t burn_in = static_cast<std::size_t>(-1);  // -1 selects 10% of the chain
  std::size_t thin = 1;                                // keep every thin-th state
  std::uint64_t seed = 0;
  double time_budget_s = 0.0;  // > 0 stops every chain early to fit the budget

  void validate() const {
    if (chains < 1) throw InvalidArgument("mh: chains must be >= 1");
    if (samples_per_chain < 1) throw InvalidArgument("mh: samples_per_chain must be >= 1");
    if (thin < 1) throw InvalidArgument("mh: thin must be >= 1");
    if (concentration_scale < 0.0) throw InvalidArgument("mh: concentration_scale must be > 0");
    if (!(concentration_floor > 0.0)) throw InvalidArgument("mh: concentration_floor must be > 0");
  }
  double scale_for(std::size_t d) const {
    return concentration_scale > 0.0 ? concentration_scale : 100.0 * static_cast<double>(d);
  }
  std::size_t burn_in_for(std::size_t n) const { return burn_in == static_cast<std::size_t>(-1) ? n / 10 : burn_in; }
};

struct ChainOutput {
  Samples samples;            // kept states, chain-major
  std::vector<std::size_t> chain_of;
  double acceptance_rate = 0.0;
  std::size_t proposals = 0;
  double seconds = 0.0;
};

// log Dir(x; a) including the normalizer.
inline double dirichlet_log_pdf(const std::vector<double>& x, const std::vector<double>& a) {
  double sa = 0.0, out = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sa += a[i];
    out += (a[i] - 1.0) * std::log(x[i]) - std::lgamma(a[i]);
  }
  return out + std::lgamma(sa);
}

// Gamma(a, 1) draws are formed in log space (a < 1 uses the a + 1 boost) so
// tiny concentrations do not underflow before normalization.
template <class Rng>
bool sample_dirichlet(const std::vector<double>& a, Rng& rng, std::vector<double>& out) {
  const std::size_t d = a.size();
  std::vector<double> lg(d);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < d; ++i) {
    if (a[i] < 1.0) {
      std::gamma_distribution<double> g(a[i] + 1.0, 1.0);
      double u = unif(rng);
      while (u == 0.0) u = unif(rng);
      lg[i] = std::log(g(rng)) + std::log(u) / a[i];
    } else {
      std::gamma_distribution<double> g(a[i], 1.0);
      lg[i] = std::log(g(rng));
    }
    mx = std::max(mx, lg[i]);
  }
  double s = 0.0;
  out.resize(d);
  for (std::size_t i = 0; i < d; ++i) s += (out[i] = std::exp(lg[i] - mx));
  bool positive = true;
  for (auto& v : out) {
    v /= s;
    positive = positive && v > 0.0;
  }
  return positive;
}

template <class Rng>
ChainOutput mh_simplex(const TargetDensity& target, const MHConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = target.dim();
  if (d < 2) throw InvalidArgument("mh: dimension must be >= 2");
  const double c = cfg.scale_for(d);
  const auto t0 = std::chrono::steady_clock::now();
  const double per_chain_budget = cfg.time_budget_s / static_cast<double>(cfg.chains);

  ChainOutput out;
  std::size_t accepted = 0;
  std::vector<double> cur, prop, a_fwd(d), a_rev(d);
  const std::vector<double> ones(d, 1.0);
  for (std::size_t ch = 0; ch < cfg.chains; ++ch) {
    // Start from a uniform draw on the simplex.
    while (!sample_dirichlet(ones, rng, cur)) {
    }
    double lp = target(cur);
    if (!std::isfinite(lp)) throw NumericalError("mh: target is not finite at the initial state");
    const auto chain_start = std::chrono::steady_clock::now();
    Samples chain;
    std::size_t s = 0;
    for (; s < cfg.samples_per_chain; ++s) {
      if (per_chain_budget > 0.0 && (s & 63u) == 0 &&
          std::chrono::duration<double>(std::chrono::steady_clock::now() - chain_start).count() > per_chain_budget) {
        break;
      }
      for (std::size_t i = 0; i < d; ++i) a_fwd[i] = c * cur[i] + cfg.concentration_floor;
      ++out.proposals;
      if (sample_dirichlet(a_fwd, rng, prop)) {
        for (std::size_t i = 0; i < d; ++i) a_rev[i] = c * prop[i] + cfg.concentration_floor;
        const double lp_new = target(prop);
        const double log_alpha =
            lp_new - lp + dirichlet_log_pdf(cur, a_rev) - dirichlet_log_pdf(prop, a_fwd);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        if (std::isfinite(log_alpha) && std::log(unif(rng)) < log_alpha) {
          cur.swap(prop);
          lp = lp_new;
          ++accepted;
        }
      }
      if (s % cfg.thin == 0) chain.push_back(cur);
    }
    // Burn-in refers to the realized chain length (a time budget may cut it short).
    const std::size_t burn = std::min(s, cfg.burn_in_for(s));
    for (std::size_t k = 0; k < chain.size(); ++k) {
      if (k * cfg.thin < burn) continue;
      out.samples.push_back(std::move(chain[k]));
      out.chain_of.push_back(ch);
    }
  }
  out.acceptance_rate = out.proposals ? static_cast<double>(accepted) / static_cast<double>(out.proposals) : 0.0;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline void write_chain_csv(const ChainOutput& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.precision(17);
  const std::size_t d = c.samples.empty() ? 0 : c.samples[0].size();
  out << "chain,step";
  for (std::size_t i = 1; i <= d; ++i) out << ",pi_" << i;
  out << '\n';
  std::size_t step = 0;
  for (std::size_t k = 0; k < c.samples.size(); ++k) {
    if (k > 0 && c.chain_of[k] != c.chain_of[k - 1]) step = 0;
    out << c.chain_of[k] << ',' << step++;
    for (double v : c.samples[k]) out << ',' << v;
    out << '\n';
  }
}

// Dirichlet(alpha + counts).
class DirichletPosterior {
 public:
  DirichletPosterior(const std::vector<double>& alpha, const std::vector<double>& counts) {
    if (alpha.size() != counts.size() || alpha.empty()) {
      throw InvalidArgument("dirichlet posterior: alpha and counts must have equal nonzero length");
    }
    for (std::size_t i = 0; i < alpha.size(); ++i) {
      if (!(alpha[i] > 0.0)) throw InvalidArgument("dirichlet posterior: alpha must be > 0");
      if (!(counts[i] >= 0.0)) throw InvalidArgument("dirichlet posterior: counts must be >= 0");
      post_.push_back(alpha[i] + counts[i]);
      total_ += post_.back();
    }
  }

  const std::vector<double>& concentration() const { return post_; }

  std::vector<double> mean() const {
    std::vector<double> m;
    for (double a : post_) m.push_back(a / total_);
    return m;
  }

  // Marginal i is Beta(a_i, total - a_i).
  double marginal_quantile(std::size_t i, double q) const {
    const boost::math::beta_distribution<double> b(post_.at(i), total_ - post_.at(i));
    return boost::math::quantile(b, q);
  }

  std::vector<Interval> intervals(double level) const {
    if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("dirichlet posterior: level must be in (0, 1)");
    std::vector<Interval> out;
    for (std::size_t i = 0; i < post_.size(); ++i) {
      out.push_back({marginal_quantile(i, 0.5 * (1.0 - level)), marginal_quantile(i, 0.5 * (1.0 + level))});
    }
    return out;
  }

  template <class Rng>
  Samples sample(std::size_t n, Rng& rng) const {
    Samples out;
    std::vector<double> x;
    while (out.size() < n)
      if (sample_dirichlet(post_, rng, x)) out.push_back(x);
    return out;
  }

 private:
  std::vector<double> post_;
  double total_ = 0.0;
};

inline DirichletPosterior dirichlet_posterior_analytic(const std::vector<double>& alpha,
                                                       const std::vector<double>& counts) {
  return DirichletPosterior(alpha, counts);
}

}  // namespace starflow
