#pragma once

// Unnormalized log-densities used as variational targets. Each target is
// evaluated generically so the same code runs on doubles and on the tape.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>

#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "starflow/ad.hpp"
#include "starflow/error.hpp"
#include "starflow/linalg.hpp"
#include "starflow/scalar.hpp"
#include "starflow/spherical.hpp"

namespace starflow {

class TargetDensity {
 public:
  virtual ~TargetDensity() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t dim() const = 0;
  virtual double log_density(std::span<const double> x) const = 0;
  virtual ad::Var log_density(std::span<const ad::Var> x) const = 0;

  double operator()(const std::vector<double>& x) const { return log_density(std::span<const double>(x)); }

 protected:
  void check_dim(std::size_t n) const {
    if (n != dim()) {
      throw InvalidArgument(kind() + ": expected a point of dimension " + std::to_string(dim()) +
                            ", got " + std::to_string(n));
    }
  }
};

// Routes both virtual overloads to Derived::eval<T>.
template <class Derived>
class TargetBase : public TargetDensity {
 public:
  double log_density(std::span<const double> x) const override {
    check_dim(x.size());
    return static_cast<const Derived*>(this)->template eval<double>(x);
  }
  ad::Var log_density(std::span<const ad::Var> x) const override {
    check_dim(x.size());
    return static_cast<const Derived*>(this)->template eval<ad::Var>(x);
  }
};

// ---------------------------------------------------------------------------

template <class T>
T vmf_log(std::span<const T> x, std::span<const double> mu, double kappa) {
  T acc(0.0);
  for (std::size_t i = 0; i < x.size(); ++i) acc += mu[i] * x[i];
  return kappa * acc;
}

inline void require_unit(std::span<const double> mu, const char* who) {
  double n = 0.0;
  for (double v : mu) n += v * v;
  if (std::fabs(std::sqrt(n) - 1.0) > 1e-10) {
    throw InvalidArgument(std::string(who) + ": mean direction must have unit norm (got " +
                          std::to_string(std::sqrt(n)) + ")");
  }
}

class VonMisesFisher : public TargetBase<VonMisesFisher> {
 public:
  VonMisesFisher(std::vector<double> mu, double kappa) : mu_(std::move(mu)), kappa_(kappa) {
    if (mu_.size() < 2) throw InvalidArgument("vmf: dimension must be >= 2");
    require_unit(mu_, "vmf");
    if (!(kappa_ >= 0.0)) throw InvalidArgument("vmf: kappa must be >= 0");
  }
  std::string kind() const override { return "vmf"; }
  std::size_t dim() const override { return mu_.size(); }
  const std::vector<double>& mu() const { return mu_; }
  double kappa() const { return kappa_; }

  template <class T>
  T eval(std::span<const T> x) const {
    return vmf_log<T>(x, mu_, kappa_);
  }

  // log C_d(kappa): the normalizer of kappa <mu, x> over S^{d-1} (d = 3 closed form,
  // otherwise via the modified Bessel function).
  double log_normalizer() const {
    const double d = static_cast<double>(mu_.size());
    if (kappa_ == 0.0) return -log_unit_sphere_area(mu_.size());
    if (mu_.size() == 3) {
      // kappa / (4 pi sinh kappa) = kappa / (2 pi (e^k - e^-k))
      return std::log(kappa_) - std::log(2.0 * kPi) - kappa_ - std::log1p(-std::exp(-2.0 * kappa_));
    }
    const double nu = d / 2.0 - 1.0;
    return nu * std::log(kappa_) - (d / 2.0) * std::log(2.0 * kPi) -
           std::log(std::cyl_bessel_i(nu, kappa_));
  }

 private:
  std::vector<double> mu_;
  double kappa_;
};

struct VmfComponent {
  std::vector<double> mu;
  double kappa = 1.0;
  double weight = 1.0;
};

class VmfMixture : public TargetBase<VmfMixture> {
 public:
  explicit VmfMixture(std::vector<VmfComponent> comps) : comps_(std::move(comps)) {
    if (comps_.empty()) throw InvalidArgument("vmf mixture: needs at least one component");
    double total = 0.0;
    for (const auto& c : comps_) {
      require_unit(c.mu, "vmf mixture");
      if (c.mu.size() != comps_[0].mu.size()) throw InvalidArgument("vmf mixture: inconsistent dimensions");
      if (!(c.weight > 0.0)) throw InvalidArgument("vmf mixture: weights must be positive");
      total += c.weight;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw InvalidArgument("vmf mixture: weights must sum to 1");
    for (const auto& c : comps_) log_w_.push_back(std::log(c.weight));
  }
  std::string kind() const override { return "vmf_mixture"; }
  std::size_t dim() const override { return comps_[0].mu.size(); }
  const std::vector<VmfComponent>& components() const { return comps_; }

  template <class T>
  T eval(std::span<const T> x) const {
    std::vector<T> terms;
    terms.reserve(comps_.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < comps_.size(); ++i) {
      terms.push_back(log_w_[i] + vmf_log<T>(x, comps_[i].mu, comps_[i].kappa));
      mx = std::max(mx, value_of(terms.back()));
    }
    T s(0.0);
    for (const auto& t : terms) s += exp(t - mx);
    return mx + log(s);
  }

  // Normalized log-density (each component a normalized vMF), for d = 3.
  double log_density_normalized(std::span<const double> x) const {
    std::vector<double> terms;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < comps_.size(); ++i) {
      const VonMisesFisher v(comps_[i].mu, comps_[i].kappa);
      terms.push_back(log_w_[i] + v.log_normalizer() + v.eval<double>(x));
      mx = std::max(mx, terms.back());
    }
    double s = 0.0;
    for (double t : terms) s += std::exp(t - mx);
    return mx + std::log(s);
  }

 private:
  std::vector<VmfComponent> comps_;
  std::vector<double> log_w_;
};

// m equally weighted components along a spiral on S^2: colatitude sweeps
// 0.1 pi -> 0.9 pi while longitude turns twice.
inline VmfMixture spiral_mixture(std::size_t m = 50, double kappa = 50.0) {
  if (m < 1) throw InvalidArgument("spiral_mixture: m must be >= 1");
  std::vector<VmfComponent> comps;
  for (std::size_t i = 0; i < m; ++i) {
    const double t1 = m == 1 ? 0.5 * kPi : 0.1 * kPi + 0.8 * kPi * static_cast<double>(i) / static_cast<double>(m - 1);
    const double t2 = std::fmod(2.0 * kTwoPi * static_cast<double>(i) / static_cast<double>(m), kTwoPi);
    const std::vector<double> th = {t1, t2};
    auto u = unit_cartesian<double>(th);
    comps.push_back({u, kappa, 1.0 / static_cast<double>(m)});
  }
  return VmfMixture(std::move(comps));
}

// log rho = sin(4 a_1) sin(4 a_2) in terms of the angles of x (d = 3). The
// value does not depend on the radius, so it also serves the deformed sphere.
class Sinusoidal : public TargetBase<Sinusoidal> {
 public:
  explicit Sinusoidal(double frequency = 4.0) : frequency_(frequency) {}
  std::string kind() const override { return "sinusoidal"; }
  std::size_t dim() const override { return 3; }

  template <class T>
  T eval(std::span<const T> x) const {
    const T rho = sqrt(x[1] * x[1] + x[2] * x[2]);
    const T a1 = atan2(rho, x[0]);
    const T a2 = atan2(x[2], x[1]);  // sin(4 a_2) is 2 pi periodic, no wrap needed
    return sin(frequency_ * a1) * sin(frequency_ * a2);
  }

 private:
  double frequency_;
};

// Constant log-density: the uniform distribution on whatever manifold q lives on.
class UniformTarget : public TargetBase<UniformTarget> {
 public:
  explicit UniformTarget(std::size_t d, double value = 0.0) : d_(d), value_(value) {}
  std::string kind() const override { return "uniform"; }
  std::size_t dim() const override { return d_; }

  template <class T>
  T eval(std::span<const T> /*x*/) const {
    return T(value_);
  }

 private:
  std::size_t d_;
  double value_;
};

// Cone measure of the lp ball {||x||_p <= t}: the normalized law of t g / ||g||_p
// for g with i.i.d. generalized-Gaussian coordinates. Relative to surface area
// its density is <x, n(x)> / (d Vol(B)), and <x, n> = t / |grad ||x||_p|.
class LpConeMeasure : public TargetBase<LpConeMeasure> {
 public:
  LpConeMeasure(std::size_t d, double p, double t = 1.0) : d_(d), p_(p), t_(t) {
    if (d_ < 2) throw InvalidArgument("lp_cone: dimension must be >= 2");
    if (!(p_ > 0.0)) throw InvalidArgument("lp_cone: p must be > 0");
    if (!(t_ > 0.0)) throw InvalidArgument("lp_cone: t must be > 0");
    const double dd = static_cast<double>(d_);
    log_volume_ = dd * std::log(t_) + dd * std::log(2.0 * std::tgamma(1.0 + 1.0 / p_)) - std::lgamma(1.0 + dd / p_);
  }
  std::string kind() const override { return "lp_cone"; }
  std::size_t dim() const override { return d_; }
  double log_ball_volume() const { return log_volume_; }

  template <class T>
  T eval(std::span<const T> x) const {
    T s(0.0);
    for (const T& v : x) s += exp(2.0 * (p_ - 1.0) * log(abs(v)));
    return p_ * std::log(t_) - 0.5 * log(s) - std::log(static_cast<double>(d_)) - log_volume_;
  }

 private:
  std::size_t d_;
  double p_;
  double t_;
  double log_volume_ = 0.0;
};

// -||y - X beta||^2 / (2 sigma^2).
template <class T>
T gaussian_regression_log(std::span<const T> beta, const Matrix<double>& x, std::span<const double> y,
                          double sigma) {
  if (x.cols() != beta.size() || x.rows() != y.size()) {
    throw InvalidArgument("gaussian_regression: shape mismatch (X is " + std::to_string(x.rows()) + "x" +
                          std::to_string(x.cols()) + ", beta " + std::to_string(beta.size()) + ", y " +
                          std::to_string(y.size()) + ")");
  }
  if (!(sigma > 0.0)) throw InvalidArgument("gaussian_regression: sigma must be > 0");
  T acc(0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T r(y[i]);
    for (std::size_t j = 0; j < x.cols(); ++j) r -= x(i, j) * beta[j];
    acc += r * r;
  }
  return acc * (-0.5 / (sigma * sigma));
}

class GaussianRegression : public TargetBase<GaussianRegression> {
 public:
  GaussianRegression(Matrix<double> x, std::vector<double> y, double sigma)
      : x_(std::move(x)), y_(std::move(y)), sigma_(sigma) {
    if (x_.rows() != y_.size()) throw InvalidArgument("gaussian_regression: X rows must match y length");
    if (!(sigma_ > 0.0)) throw InvalidArgument("gaussian_regression: sigma must be > 0");
  }
  std::string kind() const override { return "gaussian_regression"; }
  std::size_t dim() const override { return x_.cols(); }

  template <class T>
  T eval(std::span<const T> beta) const {
    return gaussian_regression_log<T>(beta, x_, y_, sigma_);
  }

 private:
  Matrix<double> x_;
  std::vector<double> y_;
  double sigma_;
};

inline constexpr double kSimplexLogFloor = 1e-12;

template <class T>
T floored_log(const T& v) {
  return value_of(v) < kSimplexLogFloor ? T(std::log(kSimplexLogFloor)) : log(v);
}

// sum_i (c_i + alpha_i - 1) log pi_i.
template <class T>
T dirichlet_multinomial_log(std::span<const T> pi, std::span<const double> counts,
                            std::span<const double> alpha) {
  if (counts.size() != pi.size() || alpha.size() != pi.size()) {
    throw InvalidArgument("dirichlet_multinomial: counts, alpha and pi must have the same length");
  }
  T acc(0.0);
  for (std::size_t i = 0; i < pi.size(); ++i) {
    const double e = counts[i] + alpha[i] - 1.0;
    if (e != 0.0) acc += e * floored_log(pi[i]);
  }
  return acc;
}

class DirichletMultinomial : public TargetBase<DirichletMultinomial> {
 public:
  DirichletMultinomial(std::vector<double> counts, std::vector<double> alpha)
      : counts_(std::move(counts)), alpha_(std::move(alpha)) {
    if (counts_.size() != alpha_.size() || counts_.size() < 2) {
      throw InvalidArgument("dirichlet_multinomial: counts and alpha must have equal length >= 2");
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      if (!(alpha_[i] > 0.0)) throw InvalidArgument("dirichlet_multinomial: alpha must be > 0");
      if (!(counts_[i] >= 0.0)) throw InvalidArgument("dirichlet_multinomial: counts must be >= 0");
    }
  }
  std::string kind() const override { return "dirichlet_multinomial"; }
  std::size_t dim() const override { return counts_.size(); }
  const std::vector<double>& counts() const { return counts_; }
  const std::vector<double>& alpha() const { return alpha_; }

  template <class T>
  T eval(std::span<const T> pi) const {
    return dirichlet_multinomial_log<T>(pi, counts_, alpha_);
  }

 private:
  std::vector<double> counts_;
  std::vector<double> alpha_;
};

struct PortfolioData {
  Matrix<double> returns;     // T x n asset returns
  std::vector<double> index;  // T index returns
  std::vector<std::string> assets;
};

// CSV with a header row; one column must be named `index`, all others are assets.
inline PortfolioData load_portfolio_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("portfolio csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("portfolio csv: '" + path + "' is empty");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      out.push_back(cell);
    }
    return out;
  };
  const auto header = split(line);
  std::size_t index_col = header.size();
  PortfolioData data;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j] == "index") index_col = j;
    else data.assets.push_back(header[j]);
  }
  if (index_col == header.size()) throw InvalidArgument("portfolio csv: no column named 'index'");
  if (data.assets.empty()) throw InvalidArgument("portfolio csv: no asset columns");
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \r\t") == std::string::npos) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw InvalidArgument("portfolio csv: line " + std::to_string(lineno) + " has " +
                            std::to_string(cells.size()) + " fields, expected " + std::to_string(header.size()));
    }
    std::vector<double> row;
    for (std::size_t j = 0; j < cells.size(); ++j) {
      try {
        std::size_t used = 0;
        const double v = std::stod(cells[j], &used);
        if (used != cells[j].size()) throw std::invalid_argument("trailing");
        row.push_back(v);
      } catch (const std::exception&) {
        throw InvalidArgument("portfolio csv: line " + std::to_string(lineno) + ", column '" + header[j] +
                              "': not a number");
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InvalidArgument("portfolio csv: no data rows");
  data.returns = Matrix<double>(rows.size(), data.assets.size());
  for (std::size_t t = 0; t < rows.size(); ++t) {
    std::size_t a = 0;
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (j == index_col) data.index.push_back(rows[t][j]);
      else data.returns(t, a++) = rows[t][j];
    }
  }
  return data;
}

enum class PortfolioPrior { uniform, dirichlet };

// -||rho - R pi||^2 / (2 sigma^2) + prior kernel.
class PortfolioPosterior : public TargetBase<PortfolioPosterior> {
 public:
  PortfolioPosterior(Matrix<double> returns, std::vector<double> index, double sigma,
                     PortfolioPrior prior = PortfolioPrior::uniform, std::vector<double> alpha = {})
      : returns_(std::move(returns)), index_(std::move(index)), sigma_(sigma), prior_(prior),
        alpha_(std::move(alpha)) {
    if (returns_.rows() != index_.size()) {
      throw InvalidArgument("portfolio: returns have " + std::to_string(returns_.rows()) + " rows but index has " +
                            std::to_string(index_.size()));
    }
    if (!(sigma_ > 0.0)) throw InvalidArgument("portfolio: sigma must be > 0");
    if (prior_ == PortfolioPrior::dirichlet) {
      if (alpha_.size() != returns_.cols()) throw InvalidArgument("portfolio: alpha must have one entry per asset");
      for (double a : alpha_)
        if (!(a > 0.0)) throw InvalidArgument("portfolio: alpha must be > 0");
    }
  }
  std::string kind() const override { return "portfolio"; }
  std::size_t dim() const override { return returns_.cols(); }

  template <class T>
  T eval(std::span<const T> pi) const {
    T v = gaussian_regression_log<T>(pi, returns_, index_, sigma_);
    if (prior_ == PortfolioPrior::dirichlet) {
      for (std::size_t i = 0; i < pi.size(); ++i)
        if (alpha_[i] != 1.0) v += (alpha_[i] - 1.0) * floored_log(pi[i]);
    }
    return v;
  }

 private:
  Matrix<double> returns_;
  std::vector<double> index_;
  double sigma_;
  PortfolioPrior prior_;
  std::vector<double> alpha_;
};

// Tape gradient of a target at x.
inline std::vector<double> target_gradient(const TargetDensity& target, std::span<const double> x) {
  ad::Tape tape;
  std::vector<ad::Var> xv;
  for (double v : x) xv.push_back(tape.variable(v));
  const auto g = tape.backward(target.log_density(std::span<const ad::Var>(xv)));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = g[xv[i]];
  return out;
}

}  // namespace starflow
