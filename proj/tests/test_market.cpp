#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "retrocede/market.hpp"

using namespace retrocede;

namespace {

/// Interior point of D_2: positive mean and variance.
MomentVector random_interior(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mean(0.05, 5.0), var(0.01, 10.0);
  const double m1 = mean(rng);
  return {m1, m1 * m1 + var(rng)};
}

PremiumPrinciple sqrt_loading() {
  return PremiumPrinciple::variance(
      "variance(g=sqrt(1+v))", [](double v) { return std::sqrt(1.0 + v); },
      [](double v) { return 0.5 / std::sqrt(1.0 + v); }, [](double v) { return -0.25 / std::pow(1.0 + v, 1.5); });
}

MomentVector central_gradient(const PremiumPrinciple& p, const MomentVector& m, double h) {
  MomentVector g(m.size());
  for (std::size_t j = 0; j < m.size(); ++j) {
    auto up = m, down = m;
    const double step = h * std::max(1.0, std::abs(m[j]));
    up[j] += step;
    down[j] -= step;
    g[j] = (p.premium(up) - p.premium(down)) / (2 * step);
  }
  return g;
}

} // namespace

TEST(Premium, Examples) {
  EXPECT_NEAR(PremiumPrinciple::expected_value(0.3).premium({1.0}), 1.3, 1e-15);
  EXPECT_NEAR(PremiumPrinciple::std_dev(0.5).premium({1.0, 2.0}), 1.5, 1e-15);
  EXPECT_NEAR(PremiumPrinciple::variance(1.0).premium({1.0, 2.0}), 2.0, 1e-15);
}

TEST(Premium, ZeroMomentsCostNothing) {
  EXPECT_EQ(PremiumPrinciple::expected_value(0.3).premium({0.0}), 0.0);
  EXPECT_EQ(PremiumPrinciple::std_dev(0.5).premium({0.0, 0.0}), 0.0);
  EXPECT_EQ(PremiumPrinciple::variance(0.5).premium({0.0, 0.0}), 0.0);
}

TEST(Premium, RejectsMomentsOutsideClosure) {
  // sqrt(m2) < m1 is impossible for any random variable.
  EXPECT_THROW(PremiumPrinciple::std_dev(0.5).premium({2.0, 1.0}), InvalidMoment);
  EXPECT_THROW(PremiumPrinciple::expected_value(0.5).premium({-1.0}), InvalidMoment);
  EXPECT_NO_THROW(PremiumPrinciple::std_dev(0.5).premium({1.0, 1.0}));
}

TEST(Premium, RejectsNegativeLoading) {
  EXPECT_THROW(PremiumPrinciple::expected_value(-0.5), DomainError);
  EXPECT_THROW(PremiumPrinciple::std_dev(-0.1), DomainError);
}

TEST(Premium, OrderMatchesKind) {
  EXPECT_EQ(PremiumPrinciple::expected_value(0.3).order(), 1);
  EXPECT_EQ(PremiumPrinciple::std_dev(0.5).order(), 2);
  EXPECT_EQ(PremiumPrinciple::variance(0.5).order(), 2);
  EXPECT_THROW(PremiumPrinciple::std_dev(0.5).premium({1.0}), DomainError);
}

TEST(PremiumGradient, Examples) {
  const auto ev = PremiumPrinciple::expected_value(0.3).gradient({0.7});
  ASSERT_EQ(ev.size(), 1u);
  EXPECT_NEAR(ev[0], 1.3, 1e-15);
  const auto sd = PremiumPrinciple::std_dev(0.5).gradient({1.0, 2.0});
  EXPECT_NEAR(sd[0], 0.5, 1e-15);
  EXPECT_NEAR(sd[1], 0.25, 1e-15);
  const auto sq = sqrt_loading();
  const auto var = sq.gradient({1.0, 2.0});
  const double dg = 0.5 / std::sqrt(2.0);
  EXPECT_NEAR(var[0], 1.0 - 2.0 * dg, 1e-15);
  EXPECT_NEAR(var[1], dg, 1e-15);
}

TEST(PremiumGradient, DegenerateVarianceIsADomainError) {
  EXPECT_THROW(PremiumPrinciple::std_dev(0.5).gradient({1.0, 1.0}), DomainError);
}

TEST(PremiumGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const std::vector<PremiumPrinciple> kinds = {PremiumPrinciple::std_dev(0.5), PremiumPrinciple::variance(0.4),
                                               sqrt_loading()};
  for (const auto& p : kinds)
    for (int k = 0; k < 200; ++k) {
      const auto m = random_interior(rng);
      const auto g = p.gradient(m), fd = central_gradient(p, m, 1e-6);
      for (std::size_t j = 0; j < m.size(); ++j)
        EXPECT_NEAR(fd[j], g[j], 1e-5 * std::max(1.0, std::abs(g[j]))) << p.name();
    }
}

TEST(PremiumHessian, MatchesGradientDifferences) {
  std::mt19937_64 rng(4);
  for (const auto& p : {PremiumPrinciple::std_dev(0.5), sqrt_loading()})
    for (int k = 0; k < 50; ++k) {
      const auto m = random_interior(rng);
      const auto h = p.hessian(m);
      for (std::size_t j = 0; j < 2; ++j) {
        auto up = m, down = m;
        const double step = 1e-6 * std::max(1.0, m[j]);
        up[j] += step;
        down[j] -= step;
        const auto gu = p.gradient(up), gd = p.gradient(down);
        for (std::size_t l = 0; l < 2; ++l)
          EXPECT_NEAR((gu[l] - gd[l]) / (2 * step), h[l][j], 1e-4 * std::max(1.0, std::abs(h[l][j])));
      }
    }
}

TEST(PremiumGradient, ExpectedValueGradientHasNoZero) {
  for (double theta : {0.0, 0.3, 0.5, 2.0}) EXPECT_GT(PremiumPrinciple::expected_value(theta).gradient({1.0})[0], 0.0);
}

TEST(PremiumGradient, VarianceRelatedPartialsShareNoZero) {
  std::mt19937_64 rng(5);
  for (const auto& p : {PremiumPrinciple::std_dev(0.5), PremiumPrinciple::variance(0.5), sqrt_loading()})
    for (int k = 0; k < 1000; ++k) {
      const auto g = p.gradient(random_interior(rng));
      EXPECT_GT(g[1], 0.0) << p.name();
      EXPECT_TRUE(g[0] != 0.0 || g[1] != 0.0);
    }
}

TEST(Premium, ConditionFamily) {
  EXPECT_EQ(PremiumPrinciple::expected_value(0.3).condition_family(), "expected_value");
  EXPECT_EQ(PremiumPrinciple::std_dev(0.3).condition_family(), "variance_related");
  EXPECT_EQ(PremiumPrinciple::variance(0.3).condition_family(), "variance_related");
}

TEST(MomentClosure, AcceptsDegenerateBoundary) {
  EXPECT_TRUE(in_moment_closure({2.0, 4.0, 8.0}));
  EXPECT_FALSE(in_moment_closure({2.0, 3.0}));
  EXPECT_FALSE(in_moment_closure({1.0, 2.0, 2.0}));
}

TEST(Utility, ExponentialExamples) {
  const auto u = UtilityModel::exponential(2.0);
  EXPECT_DOUBLE_EQ(u.value(0.0), -1.0);
  EXPECT_DOUBLE_EQ(u.prime(0.0), 2.0);
  EXPECT_DOUBLE_EQ(u.double_prime(0.0), -4.0);
  EXPECT_NEAR(UtilityModel::exponential(1.0).prime(std::log(2.0)), 0.5, 1e-15);
}

TEST(Utility, ExponentialHasConstantRiskAversion) {
  for (double r : {0.1, 1.0, 3.7})
    for (double x : {-50.0, -1.0, 0.0, 2.5, 100.0})
      EXPECT_NEAR(UtilityModel::exponential(r).risk_aversion(x), r, 1e-12 * r);
}

TEST(Utility, OverflowReturnsInfiniteSentinel) {
  const auto u = UtilityModel::exponential(1.0);
  EXPECT_EQ(u.value(-800.0), -std::numeric_limits<double>::infinity());
  EXPECT_EQ(u.prime(-800.0), std::numeric_limits<double>::infinity());
  EXPECT_EQ(u.value(800.0), -0.0);
}

TEST(Utility, ConcaveAndIncreasingOnSamples) {
  const auto quad_u = UtilityModel::general([](double x) { return -(5.0 - x) * (5.0 - x); },
                                            [](double x) { return 2.0 * (5.0 - x); }, [](double) { return -2.0; },
                                            4.0);
  for (const auto& u : {UtilityModel::exponential(0.7), quad_u})
    for (int k = 0; k <= 100; ++k) {
      const double x = -10.0 + 0.14 * k;
      EXPECT_GT(u.prime(x), 0.0);
      EXPECT_LE(u.double_prime(x), 0.0);
    }
  EXPECT_THROW(quad_u.value(4.5), DomainError);
}

TEST(Utility, RejectsNonpositiveRiskAversion) { EXPECT_THROW(UtilityModel::exponential(0.0), DomainError); }
