#include <array>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "retrocede/copula.hpp"
#include "retrocede/quad.hpp"

using namespace retrocede;

namespace {

/// Grid of a 5x5 checkerboard with mixed-sign dependence, from cell masses in 1/25 units.
std::vector<double> mixed_grid() {
  const double m[5][5] = {{2.5, 1, .5, .5, .5}, {1, 2, 1, .5, .5}, {.5, 1, 1, 1, 1.5},
                          {.5, .5, 1, 1.5, 1.5}, {.5, .5, 1.5, 1.5, 1}};
  std::vector<double> g(36, 0.0);
  for (int a = 1; a <= 5; ++a)
    for (int b = 1; b <= 5; ++b)
      g[a * 6 + b] = m[a - 1][b - 1] / 25.0 + g[(a - 1) * 6 + b] + g[a * 6 + b - 1] - g[(a - 1) * 6 + b - 1];
  return g;
}

std::vector<double> independence_grid(int cells) {
  std::vector<double> g;
  for (int a = 0; a <= cells; ++a)
    for (int b = 0; b <= cells; ++b) g.push_back(static_cast<double>(a) * b / (cells * cells));
  return g;
}

std::vector<CopulaModel> shipped() {
  return {CopulaModel::independence(), CopulaModel::frank(10.0), CopulaModel::frank(-10.0), CopulaModel::fgm(1.0),
          CopulaModel::fgm(-0.5), CopulaModel::checkerboard(mixed_grid())};
}

} // namespace

TEST(CopulaCdf, Examples) {
  EXPECT_NEAR(CopulaModel::independence().cdf(0.3, 0.4), 0.12, 1e-15);
  EXPECT_NEAR(CopulaModel::fgm(1.0).cdf(0.5, 0.5), 0.3125, 1e-15);
  const double f = CopulaModel::frank(10.0).cdf(0.5, 0.5);
  EXPECT_GT(f, 0.25);
  EXPECT_LT(f, 0.5);
}

TEST(CopulaCdf, FrankMatchesIntegratedDensity) {
  const auto c = CopulaModel::frank(10.0);
  const double v = adaptive_gauss(
      [&](double u) { return adaptive_gauss([&](double w) { return c.density(u, w); }, 0.0, 0.5, 1e-12); }, 0.0, 0.5,
      1e-11);
  EXPECT_NEAR(v, c.cdf(0.5, 0.5), 1e-9);
}

TEST(CopulaCdf, GroundedWithUniformMargins) {
  for (const auto& c : shipped())
    for (int k = 0; k <= 100; ++k) {
      const double t = k / 100.0;
      EXPECT_NEAR(c.cdf(t, 0.0), 0.0, 1e-12) << c.name();
      EXPECT_NEAR(c.cdf(0.0, t), 0.0, 1e-12) << c.name();
      EXPECT_NEAR(c.cdf(t, 1.0), t, 1e-12) << c.name();
      EXPECT_NEAR(c.cdf(1.0, t), t, 1e-12) << c.name();
    }
}

TEST(CopulaCdf, TwoIncreasingOnRefinedGrid) {
  const int n = 64;
  for (const auto& c : shipped())
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        const double u0 = double(a) / n, u1 = double(a + 1) / n, v0 = double(b) / n, v1 = double(b + 1) / n;
        EXPECT_GE(c.cdf(u1, v1) - c.cdf(u0, v1) - c.cdf(u1, v0) + c.cdf(u0, v0), -1e-14) << c.name();
      }
}

TEST(CopulaCdf, FrankSmallParameterApproachesIndependence) {
  // C = uv + (alpha / 2) uv (1 - u)(1 - v) + O(alpha^2), so |C - uv| <= alpha / 32 to first order.
  const auto c = CopulaModel::frank(1e-5);
  const auto c4 = CopulaModel::frank(1e-4);
  for (int a = 0; a <= 10; ++a)
    for (int b = 0; b <= 10; ++b) {
      const double u = a / 10.0, v = b / 10.0;
      EXPECT_NEAR(c.cdf(u, v), u * v, 1e-6);
      EXPECT_NEAR((c4.cdf(u, v) - u * v) / 1e-4, 0.5 * u * v * (1 - u) * (1 - v), 1e-5);
    }
}

TEST(Density, Examples) {
  EXPECT_EQ(CopulaModel::independence().density(0.2, 0.9), 1.0);
  EXPECT_NEAR(CopulaModel::fgm(1.0).density(0.5, 0.5), 1.0, 1e-15);
  const auto flat = CopulaModel::checkerboard(independence_grid(5));
  for (double u : {0.05, 0.3, 0.61, 0.99})
    for (double v : {0.01, 0.5, 0.77}) EXPECT_NEAR(flat.density(u, v), 1.0, 1e-12);
}

TEST(Density, MatchesMixedFiniteDifference) {
  const double h = 1e-4;
  for (const auto& c : {CopulaModel::frank(10.0), CopulaModel::frank(-10.0), CopulaModel::fgm(0.7)})
    for (double u : {0.1, 0.35, 0.8})
      for (double v : {0.2, 0.5, 0.9}) {
        const double fd = (c.cdf(u + h, v + h) - c.cdf(u + h, v - h) - c.cdf(u - h, v + h) + c.cdf(u - h, v - h)) /
                          (4 * h * h);
        EXPECT_NEAR(fd, c.density(u, v), 1e-4 * std::max(1.0, c.density(u, v))) << c.name();
      }
}

TEST(Density, NonnegativeAndNormalized) {
  const auto rule = gauss_legendre(20);
  for (const auto& c : shipped()) {
    // Tensor rule on 10x10 panels, aligned with the checkerboard cells.
    double total = 0.0;
    for (int pa = 0; pa < 10; ++pa)
      for (int pb = 0; pb < 10; ++pb)
        for (std::size_t i = 0; i < rule.nodes.size(); ++i)
          for (std::size_t j = 0; j < rule.nodes.size(); ++j) {
            const double u = (pa + 0.5 * (rule.nodes[i] + 1.0)) / 10.0, v = (pb + 0.5 * (rule.nodes[j] + 1.0)) / 10.0;
            const double d = c.density(u, v);
            EXPECT_GE(d, 0.0);
            total += rule.weights[i] * rule.weights[j] * d / 400.0;
          }
    EXPECT_NEAR(total, 1.0, 1e-6) << c.name();
  }
}

TEST(CondCdf, Examples) {
  EXPECT_NEAR(CopulaModel::independence().cond_cdf(0.3, 0.6), 0.6, 1e-15);
  for (double v : {0.1, 0.4, 0.9}) EXPECT_NEAR(CopulaModel::fgm(0.8).cond_cdf(0.5, v), v, 1e-15);
  const auto fgm = CopulaModel::fgm(0.8);
  EXPECT_NEAR(fgm.cond_cdf(0.2, 0.3), 0.3 + 0.8 * 0.3 * (0.3 - 1.0) * (0.4 - 1.0), 1e-15);
  EXPECT_GT(CopulaModel::frank(10.0).cond_cdf(0.1, 0.1), 0.1);
}

TEST(CondCdf, IsPartialDerivativeInU) {
  const double h = 1e-6;
  for (const auto& c : {CopulaModel::frank(10.0), CopulaModel::frank(-10.0), CopulaModel::fgm(0.6)})
    for (double u : {0.1, 0.5, 0.85})
      for (double v : {0.1, 0.3, 0.7})
        EXPECT_NEAR((c.cdf(u + h, v) - c.cdf(u - h, v)) / (2 * h), c.cond_cdf(u, v), 1e-7) << c.name();
}

TEST(CondCdf, MonotoneWithEndpoints) {
  for (const auto& c : shipped())
    for (double u : {0.03, 0.2, 0.5, 0.77, 0.99}) {
      EXPECT_EQ(c.cond_cdf(u, 0.0), 0.0);
      EXPECT_EQ(c.cond_cdf(u, 1.0), 1.0);
      double prev = 0.0;
      for (int k = 1; k <= 200; ++k) {
        const double h = c.cond_cdf(u, k / 200.0);
        EXPECT_GE(h, prev - 1e-15) << c.name();
        prev = h;
      }
    }
}

TEST(CondQuantile, Examples) {
  EXPECT_EQ(CopulaModel::independence().cond_quantile(0.4, 0.37), 0.37);
  EXPECT_NEAR(CopulaModel::fgm(0.9).cond_quantile(0.5, 0.7), 0.7, 1e-12);
  EXPECT_LT(CopulaModel::frank(-10.0).cond_quantile(0.9, 0.5), 0.5);
}

TEST(CondQuantile, InvertsCondCdf) {
  for (const auto& c : shipped())
    for (double u : {0.05, 0.3, 0.6, 0.95})
      for (double p : {0.01, 0.25, 0.5, 0.8, 0.99})
        EXPECT_NEAR(c.cond_cdf(u, c.cond_quantile(u, p)), p, 1e-9) << c.name();
}

TEST(Fgm, ThirdDerivativeExamples) {
  EXPECT_EQ(CopulaModel::fgm(1.0).fgm_d3(0.3, 0.5), 0.0);
  EXPECT_EQ(CopulaModel::fgm(1.0).fgm_d3(0.3, 1.0), 2.0);
  EXPECT_EQ(CopulaModel::fgm(0.5).fgm_d3(0.9, 0.25), -0.5);
  EXPECT_THROW(CopulaModel::frank(2.0).fgm_d3(0.5, 0.5), UnsupportedOperation);
}

TEST(Fgm, SecondPartialsAreNonpositive) {
  const auto c = CopulaModel::fgm(0.7);
  const double h = 1e-4;
  for (double u : {0.1, 0.4, 0.9})
    for (double v : {0.2, 0.5, 0.8}) {
      const double cuu = (c.cdf(u + h, v) - 2 * c.cdf(u, v) + c.cdf(u - h, v)) / (h * h);
      const double cvv = (c.cdf(u, v + h) - 2 * c.cdf(u, v) + c.cdf(u, v - h)) / (h * h);
      EXPECT_NEAR(cuu, 2 * v * (v - 1) * 0.7, 1e-6);
      EXPECT_NEAR(cvv, 2 * u * (u - 1) * 0.7, 1e-6);
      EXPECT_LE(cuu, 1e-9);
      EXPECT_LE(cvv, 1e-9);
    }
}

TEST(Checkerboard, DensityIsCellMassOverArea) {
  const auto g = mixed_grid();
  const auto c = CopulaModel::checkerboard(g);
  EXPECT_NEAR(c.density(0.1, 0.1), 2.5, 1e-12);
  EXPECT_NEAR(c.density(0.9, 0.9), 1.0, 1e-12);
  EXPECT_NEAR(c.density(0.5, 0.9), 1.5, 1e-12);
  // Boundary points take the cell above them.
  EXPECT_NEAR(c.density(0.2, 0.2), 2.0, 1e-12);
}

TEST(Checkerboard, SamplingReproducesCellMasses) {
  const auto c = CopulaModel::checkerboard(mixed_grid());
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int n = 100000;
  std::array<int, 25> counts{};
  for (int k = 0; k < n; ++k) {
    const auto [u, v] = c.sample([&] { return unif(rng); });
    counts[std::min(4, int(u * 5)) * 5 + std::min(4, int(v * 5))]++;
  }
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b) {
      const double p = c.cdf((a + 1) / 5.0, (b + 1) / 5.0) - c.cdf(a / 5.0, (b + 1) / 5.0) -
                       c.cdf((a + 1) / 5.0, b / 5.0) + c.cdf(a / 5.0, b / 5.0);
      const double se = std::sqrt(p * (1 - p) / n);
      EXPECT_NEAR(counts[a * 5 + b] / double(n), p, 3 * se) << "cell " << a << "," << b;
    }
}

TEST(Checkerboard, ValidationNamesFailingRectangle) {
  auto g = independence_grid(5);
  g[2 * 6 + 2] -= 0.05; // C(0.4, 0.4)
  try {
    CopulaModel::checkerboard(g);
    FAIL() << "expected a domain error";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("rectangle [0.2,0.4]x[0.2,0.4]"), std::string::npos) << e.what();
  }
  auto margin = independence_grid(5);
  margin[5 * 6 + 3] = 0.5;
  EXPECT_THROW(CopulaModel::checkerboard(margin), DomainError);
  EXPECT_THROW(CopulaModel::checkerboard(std::vector<double>(35, 0.0)), DomainError);
}

TEST(Construction, RejectsInvalidParameters) {
  EXPECT_THROW(CopulaModel::frank(0.0), DomainError);
  EXPECT_THROW(CopulaModel::fgm(1.5), DomainError);
}
