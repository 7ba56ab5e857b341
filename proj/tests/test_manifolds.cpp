#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "starflow/manifolds.hpp"

using namespace starflow;

namespace {

std::vector<double> random_theta(std::size_t d, std::mt19937_64& rng, AngleDomain domain) {
  std::vector<double> th;
  for (std::size_t k = 0; k + 1 < d; ++k) {
    const double hi = angle_upper(domain, k, d - 1);
    std::uniform_real_distribution<double> u(1e-3 * hi, (1 - 1e-3) * hi);
    th.push_back(u(rng));
  }
  return th;
}

std::vector<double> fd_gradient(const RadiusField& f, std::vector<double> th, double h = 1e-6) {
  std::vector<double> g(th.size());
  for (std::size_t k = 0; k < th.size(); ++k) {
    const double v = th[k];
    th[k] = v + h;
    const double rp = f.radius<double>(th);
    th[k] = v - h;
    const double rm = f.radius<double>(th);
    th[k] = v;
    g[k] = (rp - rm) / (2 * h);
  }
  return g;
}

std::vector<double> image(const RadiusField& f, const std::vector<double>& th) {
  return to_cartesian(SphericalPoint<double>{{th, f.domain()}, f.radius<double>(th)}).x;
}

std::vector<RadiusField> all_fields() {
  return {RadiusField::sphere(1.5), RadiusField::lp_ball(0.5), RadiusField::lp_ball(1.0, 2.0),
          RadiusField::lp_ball(3.0), RadiusField::simplex(), RadiusField::deformed()};
}

}  // namespace

TEST(Sphere, RadiusAndGradient) {
  const auto f = RadiusField::sphere();
  const std::vector<double> th = {0.3, 1.2, 4.0};
  EXPECT_EQ(f.radius<double>(th), 1.0);
  for (double g : f.gradient<double>(th)) EXPECT_EQ(g, 0.0);
}

TEST(Sphere, InvalidParameters) {
  EXPECT_THROW(RadiusField::sphere(0.0), InvalidArgument);
  EXPECT_THROW(RadiusField::sphere(-1.0), InvalidArgument);
}

TEST(LpBall, EuclideanCaseIsUnitSphere) {
  std::mt19937_64 rng(1);
  const auto f = RadiusField::lp_ball(2.0);
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(f.radius<double>(random_theta(6, rng, AngleDomain::full)), 1.0, 1e-14);
}

TEST(LpBall, HalfNormExample) {
  const auto f = RadiusField::lp_ball(0.5);
  const std::vector<double> th = {kPi / 4};
  const double r = f.radius<double>(th);
  EXPECT_NEAR(r, 0.35355339059327373, 1e-15);
  const std::vector<double> x = {r * std::cos(kPi / 4), r * std::sin(kPi / 4)};
  EXPECT_NEAR(lp_norm(x, 0.5), 1.0, 1e-14);
}

TEST(LpBall, L1NormOfImage) {
  std::mt19937_64 rng(2);
  const auto f = RadiusField::lp_ball(1.0, 2.0);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto x = image(f, random_theta(5, rng, AngleDomain::full));
    double s = 0.0;
    for (double v : x) s += std::fabs(v);
    worst = std::max(worst, std::fabs(s - 2.0));
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(LpBall, InvalidParameters) {
  EXPECT_THROW(RadiusField::lp_ball(0.0), InvalidArgument);
  EXPECT_THROW(RadiusField::lp_ball(2.0, -1.0), InvalidArgument);
  const std::vector<double> th = {1.0};
  EXPECT_THROW(radius_lp<double>(th, -0.5, 1.0), InvalidArgument);
}

TEST(LpBall, SmallPDoesNotUnderflow) {
  const auto f = RadiusField::lp_ball(0.1);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto th = random_theta(40, rng, AngleDomain::full);
    const double r = f.radius<double>(th);
    EXPECT_TRUE(std::isfinite(r));
    EXPECT_GT(r, 0.0);
    EXPECT_NEAR(lp_norm(image(f, th), 0.1), 1.0, 1e-9);
  }
}

TEST(LpBall, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (double p : {0.5, 1.0, 1.5, 3.0}) {
    const auto f = RadiusField::lp_ball(p);
    for (int i = 0; i < 50; ++i) {
      const auto th = random_theta(3, rng, AngleDomain::full);
      const auto g = f.gradient<double>(th);
      const auto fd = fd_gradient(f, th);
      for (std::size_t k = 0; k < th.size(); ++k) EXPECT_NEAR(g[k], fd[k], 1e-5) << "p=" << p;
    }
  }
}

TEST(LpBall, ClosedFormGradientMatchesTape) {
  std::mt19937_64 rng(5);
  for (double p : {0.5, 2.5}) {
    const auto f = RadiusField::lp_ball(p, 1.7);
    for (std::size_t d : {2u, 7u, 25u}) {
      const auto th = random_theta(d, rng, AngleDomain::full);
      const auto g = f.gradient<double>(th);
      const auto t = grad_radius_by_tape(f, th);
      for (std::size_t k = 0; k < th.size(); ++k) EXPECT_NEAR(g[k], t[k], 1e-12 * (1 + std::fabs(t[k])));
    }
  }
}

TEST(Simplex, MidpointOfSegment) {
  const auto f = RadiusField::simplex();
  const std::vector<double> th = {kPi / 4};
  EXPECT_NEAR(f.radius<double>(th), 0.7071067811865476, 1e-15);
  const auto x = image(f, th);
  EXPECT_NEAR(x[0], 0.5, 1e-15);
  EXPECT_NEAR(x[1], 0.5, 1e-15);
  EXPECT_NEAR(f.gradient<double>(th)[0], 0.0, 1e-15);
}

TEST(Simplex, Vertex) {
  const auto f = RadiusField::simplex();
  const auto th = clamp_angles(AngleVector<double>{{kPi / 2, kPi / 2}, AngleDomain::positive_orthant}).theta;
  const auto x = image(f, th);
  EXPECT_NEAR(x[0], 0.0, 1e-5);
  EXPECT_NEAR(x[1], 0.0, 1e-5);
  EXPECT_NEAR(x[2], 1.0, 1e-5);
}

TEST(Simplex, ImageSumsToOne) {
  std::mt19937_64 rng(6);
  const auto f = RadiusField::simplex();
  double worst = 0.0, lowest = 1.0;
  for (int i = 0; i < 1000; ++i) {
    const auto x = image(f, random_theta(10, rng, AngleDomain::positive_orthant));
    double s = 0.0;
    for (double v : x) {
      s += v;
      lowest = std::min(lowest, v);
    }
    worst = std::max(worst, std::fabs(s - 1.0));
  }
  EXPECT_LT(worst, 1e-10);
  EXPECT_GE(lowest, 0.0);
}

TEST(Simplex, OutsideOrthantIsAnError) {
  const auto f = RadiusField::simplex();
  const std::vector<double> th = {2.0, 0.3};
  EXPECT_THROW(f.radius<double>(th), InvalidArgument);
  EXPECT_EQ(f.domain(), AngleDomain::positive_orthant);
}

TEST(Simplex, GradientMatchesFiniteDifferencesAndTape) {
  std::mt19937_64 rng(7);
  const auto f = RadiusField::simplex();
  for (std::size_t d : {2u, 3u, 8u, 20u}) {
    for (int i = 0; i < 20; ++i) {
      const auto th = random_theta(d, rng, AngleDomain::positive_orthant);
      const auto g = f.gradient<double>(th);
      const auto fd = fd_gradient(f, th);
      const auto tp = grad_radius_by_tape(f, th);
      for (std::size_t k = 0; k < th.size(); ++k) {
        EXPECT_NEAR(g[k], fd[k], 1e-5 * (1 + std::fabs(fd[k])));
        EXPECT_NEAR(g[k], tp[k], 1e-11 * (1 + std::fabs(tp[k])));
      }
    }
  }
}

TEST(Deformed, ZeroAmplitudeIsUnitSphere) {
  const auto f = RadiusField::deformed(0.0, 3.0);
  const std::vector<double> th = {0.4, 2.2};
  EXPECT_EQ(f.radius<double>(th), 1.0);
}

TEST(Deformed, FormulaExample) {
  const auto f = RadiusField::deformed(0.2, 3.0);
  const std::vector<double> th = {kPi / 6, kPi / 6};
  EXPECT_NEAR(f.radius<double>(th), 1.2, 1e-15);
}

TEST(Deformed, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const auto f = RadiusField::deformed();
  for (std::size_t d : {2u, 3u, 6u}) {
    for (int i = 0; i < 50; ++i) {
      const auto th = random_theta(d, rng, AngleDomain::full);
      const auto g = f.gradient<double>(th);
      const auto fd = fd_gradient(f, th);
      const auto tp = grad_radius_by_tape(f, th);
      for (std::size_t k = 0; k < th.size(); ++k) {
        EXPECT_NEAR(g[k], fd[k], 1e-6);
        EXPECT_NEAR(g[k], tp[k], 1e-13);
      }
    }
  }
}

TEST(Deformed, AmplitudeMustBeBelowOne) {
  EXPECT_THROW(RadiusField::deformed(1.0), InvalidArgument);
  EXPECT_THROW(RadiusField::deformed(-1.5), InvalidArgument);
}

TEST(AllFields, ImageSatisfiesConstraint) {
  std::mt19937_64 rng(9);
  for (const auto& f : all_fields()) {
    for (std::size_t d = 2; d <= 20; ++d) {
      double worst = 0.0;
      for (int i = 0; i < 1000; ++i) {
        const auto th = random_theta(d, rng, f.domain());
        worst = std::max(worst, f.constraint_residual(image(f, th)));
      }
      EXPECT_LT(worst, 1e-9) << f.name() << " d=" << d;
    }
  }
}

TEST(AllFields, RadiusIsPositive) {
  std::mt19937_64 rng(10);
  for (const auto& f : all_fields()) {
    for (int i = 0; i < 1000; ++i) {
      const auto th = clamp_angles(AngleVector<double>{random_theta(4, rng, f.domain()), f.domain()}).theta;
      EXPECT_GT(f.radius<double>(th), 0.0) << f.name();
    }
  }
}

// Each ray meets the manifold once: scaled images fall off it.
TEST(AllFields, RaysCrossOnce) {
  std::mt19937_64 rng(11);
  for (const auto& f : all_fields()) {
    for (int i = 0; i < 1000; ++i) {
      auto x = image(f, random_theta(5, rng, f.domain()));
      for (double s : {0.5, 2.0}) {
        std::vector<double> y = x;
        for (auto& v : y) v *= s;
        EXPECT_GT(f.constraint_residual(y), 1e-3) << f.name();
      }
    }
  }
}

TEST(AllFields, NamesAndDomains) {
  EXPECT_EQ(RadiusField::sphere().name(), "sphere");
  EXPECT_EQ(RadiusField::lp_ball(1.0).name(), "lp_ball");
  EXPECT_EQ(RadiusField::simplex().name(), "simplex");
  EXPECT_EQ(RadiusField::deformed().name(), "deformed");
  EXPECT_EQ(RadiusField::sphere().domain(), AngleDomain::full);
}

TEST(AllFields, GradientWorksOnTape) {
  ad::Tape tape;
  const auto f = RadiusField::lp_ball(0.7);
  std::vector<ad::Var> th = {tape.variable(0.4), tape.variable(1.1), tape.variable(2.5)};
  const auto g = f.gradient<ad::Var>(th);
  ad::Var s(0.0);
  for (const auto& v : g) s += v * v;
  const auto grads = tape.backward(s);
  // d/dtheta of |grad r|^2 by central differences on the double path.
  const double h = 1e-6;
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> p = {0.4, 1.1, 2.5}, m = p;
    p[k] += h;
    m[k] -= h;
    auto sq = [&](const std::vector<double>& t) {
      double acc = 0.0;
      for (double v : f.gradient<double>(t)) acc += v * v;
      return acc;
    };
    EXPECT_NEAR(grads[th[k]], (sq(p) - sq(m)) / (2 * h), 1e-5);
  }
}
