#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "starflow/ad.hpp"
#include "starflow/scalar.hpp"

using starflow::ad::Gradients;
using starflow::ad::Tape;
using starflow::ad::Var;

namespace {

double central(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace

TEST(Tape, SquareGradient) {
  Tape tape;
  Var x = tape.variable(3.0);
  Var y = x * x;
  EXPECT_DOUBLE_EQ(tape.backward(y)[x], 6.0);
}

TEST(Tape, SinAtZero) {
  Tape tape;
  Var x = tape.variable(0.0);
  EXPECT_DOUBLE_EQ(tape.backward(starflow::ad::sin(x))[x], 1.0);
}

TEST(Tape, SoftplusMatchesFiniteDifference) {
  Tape tape;
  Var x = tape.variable(0.7);
  Var y = starflow::ad::log(Var(1.0) + starflow::ad::exp(x));
  const double an = tape.backward(y)[x];
  const double fd = central([](double v) { return std::log(1.0 + std::exp(v)); }, 0.7);
  EXPECT_LT(std::fabs(an - fd) / std::fabs(fd), 1e-6);
}

TEST(Tape, ConstantOutputHasZeroGradients) {
  Tape tape;
  Var x = tape.variable(2.0);
  Var c(5.0);
  Gradients g = tape.backward(c);
  EXPECT_EQ(g[x], 0.0);
  EXPECT_EQ(g[c], 0.0);
}

TEST(Tape, IdentityLeaf) {
  Tape tape;
  Var a = tape.variable(1.0);
  Var b = tape.variable(2.0);
  Gradients g = tape.backward(b);
  EXPECT_EQ(g[b], 1.0);
  EXPECT_EQ(g[a], 0.0);
  EXPECT_EQ(g.leaf(1), 1.0);
}

TEST(Tape, ForeignOutputIsRejected) {
  Tape t1, t2;
  Var x = t1.variable(1.0);
  EXPECT_THROW(t2.backward(x * 2.0), starflow::InvalidArgument);
  Var y = t2.variable(1.0);
  EXPECT_THROW(x + y, starflow::InvalidArgument);
}

TEST(Tape, DomainErrorsNameTheOperation) {
  Tape tape;
  Var x = tape.variable(-1.0);
  try {
    starflow::ad::log(x);
    FAIL();
  } catch (const starflow::DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("-1"), std::string::npos);
  }
  EXPECT_THROW(starflow::ad::sqrt(x), starflow::DomainError);
  EXPECT_THROW(x / Var(0.0), starflow::DomainError);
}

TEST(Tape, AbsSubgradientAtZero) {
  Tape tape;
  Var x = tape.variable(0.0);
  EXPECT_EQ(tape.backward(starflow::ad::abs(x))[x], 0.0);
}

// Every primitive against central differences at 100 random interior points.
TEST(Tape, PrimitivesMatchFiniteDifferences) {
  using Fn = std::function<Var(const Var&, const Var&)>;
  using Ref = std::function<double(double, double)>;
  namespace ad = starflow::ad;
  struct Case {
    const char* name;
    Fn f;
    Ref ref;
    double lo, hi;
  };
  const std::vector<Case> cases = {
      {"add", [](auto& a, auto& b) { return a + b; }, [](double a, double b) { return a + b; }, -2, 2},
      {"sub", [](auto& a, auto& b) { return a - b; }, [](double a, double b) { return a - b; }, -2, 2},
      {"mul", [](auto& a, auto& b) { return a * b; }, [](double a, double b) { return a * b; }, -2, 2},
      {"div", [](auto& a, auto& b) { return a / b; }, [](double a, double b) { return a / b; }, 0.5, 2},
      {"neg", [](auto& a, auto&) { return -a; }, [](double a, double) { return -a; }, -2, 2},
      {"sin", [](auto& a, auto&) { return ad::sin(a); }, [](double a, double) { return std::sin(a); }, -2, 2},
      {"cos", [](auto& a, auto&) { return ad::cos(a); }, [](double a, double) { return std::cos(a); }, -2, 2},
      {"tan", [](auto& a, auto&) { return ad::tan(a); }, [](double a, double) { return std::tan(a); }, -1, 1},
      {"exp", [](auto& a, auto&) { return ad::exp(a); }, [](double a, double) { return std::exp(a); }, -2, 2},
      {"log", [](auto& a, auto&) { return ad::log(a); }, [](double a, double) { return std::log(a); }, 0.2, 3},
      {"pow", [](auto& a, auto&) { return ad::pow(a, 0.5); }, [](double a, double) { return std::pow(a, 0.5); }, 0.2, 3},
      {"abs", [](auto& a, auto&) { return ad::abs(a); }, [](double a, double) { return std::fabs(a); }, 0.1, 2},
      {"sqrt", [](auto& a, auto&) { return ad::sqrt(a); }, [](double a, double) { return std::sqrt(a); }, 0.2, 3},
      {"atan2", [](auto& a, auto& b) { return ad::atan2(a, b); }, [](double a, double b) { return std::atan2(a, b); }, 0.3, 2},
      {"min", [](auto& a, auto& b) { return ad::min(a, b); }, [](double a, double b) { return std::min(a, b); }, -2, 2},
      {"max", [](auto& a, auto& b) { return ad::max(a, b); }, [](double a, double b) { return std::max(a, b); }, -2, 2},
  };
  std::mt19937_64 rng(7);
  const double h = 1e-5;
  for (const auto& c : cases) {
    std::uniform_real_distribution<double> u(c.lo, c.hi);
    for (int i = 0; i < 100; ++i) {
      const double a = u(rng);
      double b = u(rng);
      if (std::fabs(a - b) < 1e-3) b += 0.01;  // keep min/max off the tie
      Tape tape;
      Var va = tape.variable(a), vb = tape.variable(b);
      const Var y = c.f(va, vb);
      EXPECT_EQ(y.value(), c.ref(a, b)) << c.name;
      const Gradients g = tape.backward(y);
      const double fa = (c.ref(a + h, b) - c.ref(a - h, b)) / (2 * h);
      const double fb = (c.ref(a, b + h) - c.ref(a, b - h)) / (2 * h);
      EXPECT_LT(std::fabs(g[va] - fa), 1e-5 * (std::fabs(fa) + 1e-3)) << c.name << " a=" << a;
      EXPECT_LT(std::fabs(g[vb] - fb), 1e-5 * (std::fabs(fb) + 1e-3)) << c.name << " b=" << b;
    }
  }
}

// Random 50-node expression graphs against central differences.
TEST(Tape, RandomGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n_leaves = 5;
    std::vector<double> point(n_leaves);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    for (auto& p : point) p = u(rng);
    std::vector<int> ops(45);
    std::vector<std::pair<int, int>> args(45);
    std::uniform_int_distribution<int> op_dist(0, 5);
    for (std::size_t k = 0; k < ops.size(); ++k) {
      ops[k] = op_dist(rng);
      std::uniform_int_distribution<int> pick(0, static_cast<int>(n_leaves + k) - 1);
      args[k] = {pick(rng), pick(rng)};
    }
    auto build = [&](std::span<const Var> leaves) {
      std::vector<Var> nodes(leaves.begin(), leaves.end());
      for (std::size_t k = 0; k < ops.size(); ++k) {
        const Var& a = nodes[static_cast<std::size_t>(args[k].first)];
        const Var& b = nodes[static_cast<std::size_t>(args[k].second)];
        Var v;
        switch (ops[k]) {
          case 0: v = a + b; break;
          case 1: v = a * b * 0.5; break;
          case 2: v = starflow::ad::sin(a) + b; break;
          case 3: v = starflow::ad::log(Var(1.0) + a * a) - b; break;
          case 4: v = a / (Var(2.0) + b * b); break;
          default: v = starflow::ad::exp(Var(-0.1) * a * a) * b; break;
        }
        nodes.push_back(v);
      }
      Var sum(0.0);
      for (std::size_t k = n_leaves; k < nodes.size(); ++k) sum += nodes[k] * 0.01;
      return sum;
    };
    const double err = starflow::ad::grad_check(build, point, 1e-5);
    EXPECT_LT(err, 1e-5) << "trial " << trial;
  }
}

TEST(GradCheck, Product) {
  auto f = [](std::span<const Var> x) { return x[0] * x[1]; };
  const std::vector<double> p = {2.0, 3.0};
  EXPECT_LT(starflow::ad::grad_check(f, p, 1e-5), 1e-8);
}

TEST(GradCheck, NonFiniteIsAnError) {
  auto f = [](std::span<const Var> x) { return x[0] / Var(0.0 * x[0].value() + 1e-320) * 1e300; };
  const std::vector<double> p = {1.0};
  EXPECT_THROW(starflow::ad::grad_check(f, p, 1e-5), starflow::DomainError);
}

TEST(Tape, SumOfIndependentSubgraphsIsLinear) {
  Tape joint, a_only, b_only;
  auto sub_a = [](const Var& x) { return starflow::ad::sin(x) * x; };
  auto sub_b = [](const Var& y) { return starflow::ad::exp(y) / (Var(1.0) + y * y); };
  Var x = joint.variable(0.3), y = joint.variable(-0.4);
  const Gradients gj = joint.backward(sub_a(x) + sub_b(y));
  Var xa = a_only.variable(0.3);
  Var yb = b_only.variable(-0.4);
  EXPECT_DOUBLE_EQ(gj[x], a_only.backward(sub_a(xa))[xa]);
  EXPECT_DOUBLE_EQ(gj[y], b_only.backward(sub_b(yb))[yb]);
}

TEST(Tape, NoHiddenStateAcrossTapes) {
  auto run = [] {
    Tape tape;
    Var x = tape.variable(1.25);
    Var y = starflow::ad::cos(x) * x + starflow::ad::pow(x, 3.0);
    return std::make_pair(y.value(), tape.backward(y)[x]);
  };
  const auto first = run();
  {
    Tape scratch;
    Var z = scratch.variable(9.0);
    for (int i = 0; i < 1000; ++i) z = z * 1.0001 + 0.5;
    (void)scratch.backward(z);
  }
  const auto second = run();
  EXPECT_EQ(first, second);
}

TEST(Tape, ReplayReproducesValuesBitExactly) {
  Tape tape;
  Var x = tape.variable(0.37), y = tape.variable(1.9);
  Var z = starflow::ad::atan2(x, y) * starflow::ad::pow(y, 2.5) - starflow::ad::sqrt(y) / x;
  z = starflow::ad::max(z, Var(0.1) * x) + starflow::ad::tan(x) + 3.0 - (2.0 / y);
  (void)z;
  EXPECT_EQ(tape.replay_mismatches(), 0u);
}

TEST(Tape, ParentsPrecedeChildren) {
  Tape tape;
  Var x = tape.variable(1.0);
  Var y = x;
  for (int i = 0; i < 10; ++i) y = y * x + Var(1.0);
  EXPECT_GT(y.index(), x.index());
  EXPECT_EQ(static_cast<std::size_t>(y.index()) + 1, tape.size());
}

TEST(Tape, FusedDotMatchesBinaryChain) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n01;
  Tape fused, chain;
  std::vector<Var> a1, b1, a2, b2;
  for (int k = 0; k < 6; ++k) {
    const double av = n01(rng), bv = n01(rng);
    a1.push_back(fused.variable(av));
    a2.push_back(chain.variable(av));
    // Mix constants in: every third right operand is not on the tape.
    b1.push_back(k % 3 == 0 ? Var(bv) : fused.variable(bv));
    b2.push_back(k % 3 == 0 ? Var(bv) : chain.variable(bv));
  }
  const Var d = starflow::ad::dot(std::span<const Var>(a1), std::span<const Var>(b1));
  Var c = Var(0.0);
  for (std::size_t k = 0; k < a2.size(); ++k) c = c + a2[k] * b2[k];
  EXPECT_EQ(d.value(), c.value());
  const Var out1 = starflow::ad::sin(d) * d;
  const Var out2 = starflow::ad::sin(c) * c;
  const Gradients g1 = fused.backward(out1);
  const Gradients g2 = chain.backward(out2);
  ASSERT_EQ(g1.leaves().size(), g2.leaves().size());
  for (std::size_t i = 0; i < g1.leaves().size(); ++i) EXPECT_NEAR(g1.leaf(i), g2.leaf(i), 1e-14);
  EXPECT_LT(fused.size(), chain.size());
  EXPECT_EQ(fused.replay_mismatches(), 0u);
  EXPECT_STREQ(starflow::ad::op_name(starflow::ad::Op::linear), "linear");
}

TEST(Tape, FusedDotHandlesRepeatsAndConstants) {
  Tape tape;
  Var x = tape.variable(2.0);
  const std::vector<Var> a{x, x, Var(3.0)};
  const std::vector<Var> b{x, Var(5.0), Var(4.0)};
  const Var d = starflow::ad::dot(std::span<const Var>(a), std::span<const Var>(b));
  EXPECT_EQ(d.value(), 4.0 + 10.0 + 12.0);
  EXPECT_DOUBLE_EQ(tape.backward(d)[x], 2.0 * 2.0 + 5.0);
  const std::vector<Var> k{Var(1.0), Var(2.0)};
  EXPECT_TRUE(starflow::ad::dot(std::span<const Var>(k), std::span<const Var>(k)).is_constant());
  EXPECT_THROW(starflow::ad::dot(std::span<const Var>(a), std::span<const Var>(k)), starflow::InvalidArgument);
}
