#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "starflow/checkpoint.hpp"
#include "starflow/targets.hpp"

using namespace starflow;

namespace {

std::vector<double> random_unit(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  double s = 0.0;
  for (auto& e : v) {
    e = n(rng);
    s += e * e;
  }
  for (auto& e : v) e /= std::sqrt(s);
  return v;
}

std::vector<double> random_simplex(std::size_t d, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(2.0, 1.0);
  std::vector<double> v(d);
  double s = 0.0;
  for (auto& e : v) s += (e = g(rng));
  for (auto& e : v) e /= s;
  return v;
}

double max_fd_error(const TargetDensity& t, const std::vector<double>& x) {
  const auto g = target_gradient(t, x);
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (t(xp) - t(xm)) / (2 * h);
    worst = std::max(worst, std::fabs(fd - g[i]));
  }
  return worst;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("starflow_test_" + name);
}

Matrix<double> matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> m(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

}  // namespace

TEST(Vmf, Examples) {
  const VonMisesFisher v({0.0, 0.0, 1.0}, 5.0);
  EXPECT_DOUBLE_EQ(v({0.0, 0.0, 1.0}), 5.0);
  EXPECT_DOUBLE_EQ(v({1.0, 0.0, 0.0}), 0.0);
  const VonMisesFisher flat({0.6, 0.8, 0.0}, 0.0);
  EXPECT_DOUBLE_EQ(flat({0.0, 0.6, 0.8}), 0.0);
  EXPECT_THROW(VonMisesFisher({1.0, 1.0, 0.0}, 1.0), InvalidArgument);
  EXPECT_THROW(VonMisesFisher({1.0, 0.0, 0.0}, -1.0), InvalidArgument);
  EXPECT_THROW(v({1.0, 0.0}), InvalidArgument);
}

TEST(Vmf, NormalizerMatchesQuadrature) {
  for (double kappa : {0.0, 1.0, 5.0, 20.0}) {
    const VonMisesFisher v({0.0, 0.0, 1.0}, kappa);
    // Integral over the sphere depends only on the polar angle to mu.
    const int n = 20000;
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
      const double a = (i + 0.5) * kPi / n;
      z += std::exp(kappa * std::cos(a)) * std::sin(a) * (kPi / n) * kTwoPi;
    }
    EXPECT_NEAR(v.log_normalizer(), -std::log(z), 1e-7) << kappa;
  }
  // Circle: 1 / (2 pi I_0(kappa)), through the Bessel branch.
  const VonMisesFisher c({1.0, 0.0}, 2.0);
  EXPECT_NEAR(c.log_normalizer(), -std::log(kTwoPi * std::cyl_bessel_i(0.0, 2.0)), 1e-12);
}

TEST(VmfMixture, SingleComponentReducesToVmf) {
  std::mt19937_64 rng(1);
  const auto mu = random_unit(3, rng);
  const VmfMixture m({{mu, 4.0, 1.0}});
  const VonMisesFisher v(mu, 4.0);
  for (int i = 0; i < 20; ++i) {
    const auto x = random_unit(3, rng);
    EXPECT_NEAR(m(x), v(x), 1e-13);
  }
}

TEST(VmfMixture, AntipodalPairIsSymmetric) {
  std::mt19937_64 rng(2);
  const auto mu = random_unit(4, rng);
  std::vector<double> neg = mu;
  for (auto& v : neg) v = -v;
  const VmfMixture m({{mu, 3.0, 0.5}, {neg, 3.0, 0.5}});
  for (int i = 0; i < 20; ++i) {
    auto x = random_unit(4, rng);
    const double a = m(x);
    for (auto& v : x) v = -v;
    EXPECT_NEAR(m(x), a, 1e-13);
  }
}

TEST(VmfMixture, LogSumExpMatchesExtendedPrecision) {
  const auto m = spiral_mixture(50, 50.0);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto x = random_unit(3, rng);
    long double s = 0.0L;
    for (const auto& c : m.components()) {
      long double dot = 0.0L;
      for (std::size_t k = 0; k < 3; ++k) dot += static_cast<long double>(c.mu[k]) * x[k];
      s += static_cast<long double>(c.weight) * std::exp(static_cast<long double>(c.kappa) * dot);
    }
    const double direct = static_cast<double>(std::log(s));
    EXPECT_LT(std::fabs(m(x) - direct) / std::max(1.0, std::fabs(direct)), 1e-12);
  }
}

TEST(VmfMixture, SpiralLayoutAndValidation) {
  const auto m = spiral_mixture();
  ASSERT_EQ(m.components().size(), 50u);
  double w = 0.0;
  for (const auto& c : m.components()) {
    EXPECT_NEAR(std::hypot(c.mu[0], c.mu[1], c.mu[2]), 1.0, 1e-14);
    EXPECT_EQ(c.kappa, 50.0);
    w += c.weight;
  }
  EXPECT_NEAR(w, 1.0, 1e-14);
  EXPECT_NEAR(m.components().front().mu[0], std::cos(0.1 * kPi), 1e-14);
  EXPECT_NEAR(m.components().back().mu[0], std::cos(0.9 * kPi), 1e-14);
  EXPECT_THROW(VmfMixture({}), InvalidArgument);
  EXPECT_THROW(VmfMixture({{{1.0, 0.0}, 1.0, 0.4}}), InvalidArgument);
}

TEST(VmfMixture, NormalizedDensityIntegratesToOne) {
  const auto m = spiral_mixture(50, 50.0);
  const int n = 400;
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const std::vector<double> th = {(i + 0.5) * kPi / n, (j + 0.5) * kTwoPi / n};
      const auto x = unit_cartesian<double>(th);
      total += std::exp(m.log_density_normalized(x)) * std::sin(th[0]) * (kPi / n) * (kTwoPi / n);
    }
  EXPECT_NEAR(total, 1.0, 1e-3);
}

TEST(Sinusoidal, Examples) {
  const Sinusoidal s;
  const std::vector<double> a = {kPi / 8, kPi / 8};
  EXPECT_NEAR(s(unit_cartesian<double>(a)), 1.0, 1e-12);
  const std::vector<double> b = {kPi / 4, 1.234};
  EXPECT_NEAR(s(unit_cartesian<double>(b)), 0.0, 1e-12);
  // Radius does not matter.
  auto x = unit_cartesian<double>(a);
  for (auto& v : x) v *= 1.7;
  EXPECT_NEAR(s(x), 1.0, 1e-12);
  EXPECT_THROW(s({1.0, 0.0}), InvalidArgument);
}

TEST(Sinusoidal, BoundedOnRandomPoints) {
  const Sinusoidal s;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10000; ++i) {
    const double v = s(random_unit(3, rng));
    ASSERT_LE(std::fabs(v), 1.0);
  }
}

TEST(GaussianRegression, Examples) {
  Matrix<double> x(1, 2);
  x(0, 0) = 1.0;
  const GaussianRegression g(x, {2.0}, 1.0);
  EXPECT_DOUBLE_EQ(g({1.0, 1.0}), -0.5);
  const GaussianRegression g2(x, {2.0}, 2.0);
  EXPECT_DOUBLE_EQ(g2({1.0, 1.0}), -0.125);
  std::mt19937_64 rng(5);
  const auto big = matrix(6, 3, rng);
  const std::vector<double> beta = {0.3, -1.0, 2.0};
  std::vector<double> y(6, 0.0);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 3; ++j) y[i] += big(i, j) * beta[j];
  EXPECT_NEAR(GaussianRegression(big, y, 0.7)(beta), 0.0, 1e-28);
  EXPECT_THROW(GaussianRegression(big, {1.0}, 1.0), InvalidArgument);
  EXPECT_THROW(GaussianRegression(big, y, 0.0), InvalidArgument);
  EXPECT_THROW(GaussianRegression(big, y, 1.0)({1.0, 2.0}), InvalidArgument);
}

TEST(DirichletMultinomial, UniformAndConjugacy) {
  std::mt19937_64 rng(6);
  const DirichletMultinomial flat({0, 0, 0, 0}, {1, 1, 1, 1});
  const DirichletMultinomial post({3, 0, 5, 1}, {2, 1, 0.5, 1});
  const DirichletMultinomial kernel({0, 0, 0, 0}, {5, 1, 5.5, 2});
  for (int i = 0; i < 50; ++i) {
    const auto pi = random_simplex(4, rng);
    EXPECT_EQ(flat(pi), 0.0);
    EXPECT_NEAR(post(pi), kernel(pi), 1e-12);
  }
  EXPECT_THROW(DirichletMultinomial({1, 2}, {1, 0}), InvalidArgument);
  EXPECT_THROW(DirichletMultinomial({1, 2}, {1}), InvalidArgument);
}

TEST(DirichletMultinomial, FloorKeepsBoundaryFinite) {
  const DirichletMultinomial t({0, 0, 0}, {0.5, 1, 1});
  EXPECT_NEAR(t({0.0, 0.5, 0.5}), -0.5 * std::log(1e-12), 1e-12);
}

TEST(DirichletMultinomial, ArgmaxMatchesClosedForm) {
  const std::vector<double> counts = {4, 1, 7, 2}, alpha = {1.5, 2, 1, 3};
  const DirichletMultinomial t(counts, alpha);
  // Exponentiated-gradient ascent stays on the simplex.
  std::vector<double> pi(4, 0.25);
  for (int it = 0; it < 5000; ++it) {
    const auto g = target_gradient(t, pi);
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) s += (pi[i] *= std::exp(0.01 * g[i]));
    for (auto& v : pi) v /= s;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < 4; ++i) total += counts[i] + alpha[i] - 1.0;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(pi[i], (counts[i] + alpha[i] - 1.0) / total, 1e-6);
}

TEST(Portfolio, ExactReplicationAndPriors) {
  std::mt19937_64 rng(7);
  const auto r = matrix(30, 5, rng);
  const auto pi = random_simplex(5, rng);
  std::vector<double> rho(30, 0.0);
  for (std::size_t t = 0; t < 30; ++t)
    for (std::size_t j = 0; j < 5; ++j) rho[t] += r(t, j) * pi[j];
  const PortfolioPosterior uni(r, rho, 1.0);
  EXPECT_NEAR(uni(pi), 0.0, 1e-25);
  const PortfolioPosterior dir1(r, rho, 1.0, PortfolioPrior::dirichlet, std::vector<double>(5, 1.0));
  for (int i = 0; i < 20; ++i) {
    const auto p = random_simplex(5, rng);
    EXPECT_EQ(uni(p), dir1(p));
  }
  EXPECT_THROW(PortfolioPosterior(r, {1.0}, 1.0), InvalidArgument);
  EXPECT_THROW(PortfolioPosterior(r, rho, 1.0, PortfolioPrior::dirichlet, {1.0}), InvalidArgument);
}

TEST(Portfolio, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const auto r = matrix(40, 6, rng);
  std::vector<double> rho(40);
  for (auto& v : rho) v = 0.1 * std::normal_distribution<double>(0.0, 1.0)(rng);
  const PortfolioPosterior t(r, rho, 0.5, PortfolioPrior::dirichlet, {0.5, 1, 2, 3, 1, 0.8});
  for (int i = 0; i < 50; ++i) EXPECT_LT(max_fd_error(t, random_simplex(6, rng)), 1e-6);
}

TEST(Targets, TapeGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  const auto x = matrix(8, 4, rng);
  std::vector<double> y(8, 0.3);
  const VonMisesFisher vmf(random_unit(3, rng), 5.0);
  const auto mix = spiral_mixture(50, 50.0);
  const Sinusoidal sin4;
  const GaussianRegression reg(x, y, 1.0);
  const DirichletMultinomial dm({3, 0, 1, 7}, {1, 0.5, 2, 1});
  const UniformTarget uni(3);
  for (int i = 0; i < 100; ++i) {
    const auto u = random_unit(3, rng);
    EXPECT_LT(max_fd_error(vmf, u), 1e-5);
    EXPECT_LT(max_fd_error(mix, u), 1e-5 * std::max(1.0, std::fabs(mix(u))));
    EXPECT_LT(max_fd_error(sin4, u), 1e-5);
    EXPECT_LT(max_fd_error(uni, u), 1e-12);
    EXPECT_LT(max_fd_error(reg, random_unit(4, rng)), 1e-5);
    EXPECT_LT(max_fd_error(dm, random_simplex(4, rng)), 1e-5);
  }
}

TEST(LpCone, SphereCaseIsUniform) {
  for (std::size_t d : {2, 3, 5, 8}) {
    const LpConeMeasure cone(d, 2.0);
    const double dd = static_cast<double>(d);
    const double log_area = std::log(2.0) + 0.5 * dd * std::log(kPi) - std::lgamma(0.5 * dd);
    std::mt19937_64 rng(d);
    EXPECT_NEAR(cone(random_unit(d, rng)), -log_area, 1e-12);
  }
  EXPECT_THROW(LpConeMeasure(1, 2.0), InvalidArgument);
  EXPECT_THROW(LpConeMeasure(3, 0.0), InvalidArgument);
}

TEST(LpCone, IntegratesToOneAgainstAKnownDensity) {
  // Importance weights p / q under the identity flow, whose density is exact.
  for (double p : {0.5, 1.0, 3.0}) {
    const FlowModel id(4, RadiusField::lp_ball(p), FlowConfig{});
    const LpConeMeasure cone(4, p);
    std::mt19937_64 rng(11);
    double acc = 0.0;
    const std::size_t n = 20000;
    for (const auto& s : sample_and_logprob(id, n, rng)) acc += std::exp(cone(s.x) - s.log_q);
    EXPECT_NEAR(acc / static_cast<double>(n), 1.0, 0.03) << "p = " << p;
  }
}

TEST(LpCone, TapeGradientMatchesClosedForm) {
  std::mt19937_64 rng(12);
  const LpConeMeasure cone(6, 0.5);
  for (int i = 0; i < 50; ++i) {
    auto u = random_unit(6, rng);
    double s = 0.0;
    for (double v : u) s += std::sqrt(std::fabs(v));
    for (double& v : u) v /= s * s;
    // d/dx_i = -(p - 1) sign(x_i) |x_i|^(2p - 3) / sum_j |x_j|^(2p - 2)
    double sum = 0.0;
    for (double v : u) sum += 1.0 / std::fabs(v);
    const auto g = target_gradient(cone, u);
    for (std::size_t k = 0; k < u.size(); ++k) {
      const double expect = 0.5 * std::copysign(1.0, u[k]) * std::pow(std::fabs(u[k]), -2.0) / sum;
      EXPECT_NEAR(g[k], expect, 1e-10 * std::fabs(expect));
    }
  }
}

TEST(PortfolioCsv, LoadsAssetsAndIndex) {
  const auto path = temp_file("portfolio.csv");
  {
    std::ofstream out(path);
    out << "a,index,b\n0.01,0.02,0.03\n-0.01, 0.00 ,0.05\r\n\n";
  }
  const auto data = load_portfolio_csv(path.string());
  ASSERT_EQ(data.assets.size(), 2u);
  EXPECT_EQ(data.assets[1], "b");
  ASSERT_EQ(data.index.size(), 2u);
  EXPECT_DOUBLE_EQ(data.index[1], 0.0);
  EXPECT_DOUBLE_EQ(data.returns(1, 1), 0.05);
  std::filesystem::remove(path);
}

TEST(PortfolioCsv, RejectsMalformedFiles) {
  const auto path = temp_file("bad.csv");
  auto write = [&](const std::string& s) {
    std::ofstream out(path);
    out << s;
  };
  write("a,b\n1,2\n");
  EXPECT_THROW(load_portfolio_csv(path.string()), InvalidArgument);
  write("a,index\n1,x\n");
  EXPECT_THROW(load_portfolio_csv(path.string()), InvalidArgument);
  write("a,index\n1,2,3\n");
  EXPECT_THROW(load_portfolio_csv(path.string()), InvalidArgument);
  write("a,index\n");
  EXPECT_THROW(load_portfolio_csv(path.string()), InvalidArgument);
  std::filesystem::remove(path);
  EXPECT_THROW(load_portfolio_csv(path.string()), InvalidArgument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (const auto& field : {RadiusField::sphere(1.5), RadiusField::lp_ball(0.5, 2.0), RadiusField::simplex(),
                            RadiusField::deformed(0.3, 2.0)}) {
    FlowConfig cfg;
    cfg.layers = 2;
    cfg.window = 3;
    FlowModel m(5, field, cfg);
    std::mt19937_64 rng(10);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& v : m.params()) v += n(rng) / 3.0;
    const auto path = temp_file("model.json");
    save_checkpoint(m, path.string());
    const FlowModel back = load_checkpoint(path.string());
    std::filesystem::remove(path);
    EXPECT_EQ(back.params(), m.params());
    EXPECT_EQ(back.field().name(), field.name());
    EXPECT_EQ(back.config().window, 3u);
    EXPECT_EQ(model_to_json(back).dump(), model_to_json(m).dump());
    std::mt19937_64 r1(11), r2(11);
    const auto a = sample_and_logprob(m, 5, r1);
    const auto b = sample_and_logprob(back, 5, r2);
    for (int i = 0; i < 5; ++i) EXPECT_EQ(a[i].log_q, b[i].log_q);
  }
}

TEST(Checkpoint, RejectsInconsistentFiles) {
  FlowModel m(3, RadiusField::sphere());
  auto j = model_to_json(m);
  j["format"] = "other";
  EXPECT_THROW(model_from_json(j), InvalidArgument);
  j = model_to_json(m);
  j["params"].erase(0);
  EXPECT_THROW(model_from_json(j), InvalidArgument);
  j = model_to_json(m);
  j["boundaries"][1] = "monotone_bounded";
  EXPECT_THROW(model_from_json(j), InvalidArgument);
  EXPECT_THROW(field_from_json(Json{{"kind", "torus"}}), InvalidArgument);
  EXPECT_THROW(field_from_json(Json{{"kind", "lp_ball"}}), InvalidArgument);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.json"), IoError);
}
