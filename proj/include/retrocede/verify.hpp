#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "retrocede/copula.hpp"
#include "retrocede/error.hpp"
#include "retrocede/model.hpp"
#include "retrocede/quad.hpp"
#include "retrocede/solver.hpp"
#include "retrocede/treaty.hpp"

namespace retrocede {

enum class ResidualSide { AtZero, Interior, AtX };

inline const char* side_name(ResidualSide s) {
  switch (s) {
  case ResidualSide::AtZero: return "at_zero";
  case ResidualSide::Interior: return "interior";
  case ResidualSide::AtX: return "at_x";
  }
  return "?";
}

/// First-order conditions of one risk along a loss grid. lhs is the
/// conditional expected marginal utility, rhs the marginal premium cost
/// times E U'(L).
struct RiskResidual {
  std::vector<double> x, ceded, lhs, rhs, violation;
  std::vector<ResidualSide> side;
  double max_violation = 0.0;
};

struct ResidualReport {
  double m0 = 0.0;
  std::vector<RiskResidual> risks;
  double max_violation = 0.0;
};

/// Checks lhs <= rhs where Z = 0, lhs = rhs where 0 < Z < x and lhs >= rhs
/// where Z = x, for x > 0. A point counts as on a bound within 1e-6 x. The
/// default grid per risk is the treaty grid up to the 1 - 1e-6 quantile.
inline ResidualReport optimality_residual(const MarketModel& mm, const Strategy& s, const QuadratureSpec& q = {},
                                          std::vector<std::vector<double>> grids = {}) {
  mm.validate();
  ResidualReport rep;
  rep.m0 = expected_marginal_utility(mm, s, q);
  if (grids.empty())
    for (const auto& m : mm.marginals) grids.push_back(treaty_grid(m));
  for (std::size_t i = 0; i < mm.size(); ++i) {
    RiskResidual rr;
    const auto& g = grids[i];
    rr.x = g;
    rr.ceded.resize(g.size());
    rr.lhs.resize(g.size());
    rr.rhs.resize(g.size());
    rr.violation.resize(g.size());
    rr.side.resize(g.size());
    const auto grad = mm.principles[i].gradient(s.ceded_moments()[i]);
    Pricing pr{s.premiums()[i], grad, {}};
    parallel_for(g.size(), [&](std::size_t k) {
      const double x = g[k];
      const double z = s.treaty(i).eval(x);
      rr.ceded[k] = z;
      rr.lhs[k] = lambda_fn(mm, i, s, x, z - s.premiums()[i], q);
      rr.rhs[k] = rep.m0 * pr.marginal_price(z);
      const double band = 1e-6 * x;
      const double diff = rr.lhs[k] - rr.rhs[k];
      if (!(x > 0.0)) {
        // Z(0) = 0 sits on both bounds, so neither inequality binds.
        rr.side[k] = ResidualSide::AtZero;
        rr.violation[k] = 0.0;
      } else if (z <= band) {
        rr.side[k] = ResidualSide::AtZero;
        rr.violation[k] = std::max(0.0, diff);
      } else if (z >= x - band) {
        rr.side[k] = ResidualSide::AtX;
        rr.violation[k] = std::max(0.0, -diff);
      } else {
        rr.side[k] = ResidualSide::Interior;
        rr.violation[k] = std::abs(diff);
      }
    });
    for (double v : rr.violation) rr.max_violation = std::max(rr.max_violation, v);
    rep.max_violation = std::max(rep.max_violation, rr.max_violation);
    rep.risks.push_back(std::move(rr));
  }
  return rep;
}

struct StopLossDiagnostic {
  double lhs = 0.0;
  double d_lhs_analytic = 0.0;
  double d_lhs_numeric = 0.0;
};

/// Stop-loss retention M2 on risk 2 under an FGM(alpha) copula:
/// lhs(M2) = int_0^M2 (e^{R M2} - e^{R x}) d3(u, F2(x)) f2(x) dx, where
/// d3 is the FGM third mixed derivative 2 alpha (2 v - 1). It does not
/// depend on u, which is accepted for completeness and ignored.
/// The analytic derivative is R e^{R M2} 2 alpha F2(M2) (F2(M2) - 1).
inline StopLossDiagnostic stoploss_diagnostic(const MarginalModel& f2, double alpha, double risk_aversion, double m2,
                                              double u = 0.5) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw DomainError("stop-loss diagnostic needs alpha in (0, 1]");
  if (!(m2 >= 0.0)) throw DomainError("stop-loss diagnostic needs M2 >= 0");
  if (!(u >= 0.0 && u <= 1.0)) throw DomainError("stop-loss diagnostic needs u in [0, 1]");
  const auto fgm = CopulaModel::fgm(alpha);
  auto lhs = [&](double m) {
    if (!(m > 0.0)) return 0.0;
    return adaptive_gauss(
        [&](double x) {
          return (std::exp(risk_aversion * m) - std::exp(risk_aversion * x)) * fgm.fgm_d3(u, f2.cdf(x)) * f2.pdf(x);
        },
        0.0, m, 1e-13, 1e-15 * std::exp(risk_aversion * m) * alpha * m);
  };
  StopLossDiagnostic out;
  out.lhs = lhs(m2);
  const double f = f2.cdf(m2);
  out.d_lhs_analytic = risk_aversion * std::exp(risk_aversion * m2) * 2.0 * alpha * f * (f - 1.0);
  const double h = m2 > 0.0 ? 1e-4 * m2 : 1e-8;
  out.d_lhs_numeric = (lhs(m2 + h) - lhs(m2 - h)) / (2.0 * h);
  return out;
}

/// Closed forms comparing the stop-loss treaty (x - m)^+ with
/// x 1[0,a](x) + (x - b)^+ on an exponential risk under exponential utility
/// and the expected-value principle, plus quadrature and finite-difference
/// cross-checks.
struct ConcavityProbe {
  double m = 0.0;
  double A = 0.0, B = 0.0, C = 0.0;
  /// A (A B + 2 (C - B)); its sign is that of the second derivative at t = 0.
  double sign_expr = 0.0;
  double B_quadrature = 0.0, C_quadrature = 0.0;
  std::vector<double> t, second_derivative, second_derivative_numeric;
};

inline ConcavityProbe concavity_probe(double lambda, double risk_aversion, double theta, double a, double b,
                                      double eps_shift, const QuadratureSpec& q = {}) {
  const double l = lambda, r = risk_aversion;
  if (!(l > 0.0) || !(r > 0.0) || !(theta >= 0.0)) throw DomainError("concavity probe needs lambda, R > 0, theta >= 0");
  if (r == l) throw DomainError("concavity probe requires R != lambda");
  if (!(a > 0.0 && a < b)) throw DomainError("concavity probe requires 0 < a < b");
  // e^{-lambda a}(e^{lambda a} - 1 - lambda a) = lambda E[X; X <= a]
  const double head = std::exp(-l * a) * (std::expm1(l * a) - l * a);
  const double tail = head + std::exp(-l * b);
  const double em = tail - l * eps_shift;
  if (!(em > 0.0 && em < 1.0)) throw DomainError("retention m is undefined for this shift");
  ConcavityProbe out;
  out.m = -std::log(em) / l;
  const double k = r - l;
  out.A = r * (1.0 + theta) * (tail - em) / l;
  out.B = r / k * std::exp(k * out.m) - l / k;
  out.C = 1.0 - std::exp(-l * a) - l / k * std::exp(k * a) + r / k * std::exp(k * b);
  out.sign_expr = out.A * (out.A * out.B + 2.0 * (out.C - out.B));

  const auto x1 = MarginalModel::exponential(l);
  out.B_quadrature = integrate_marginal([&](double x) { return std::exp(r * std::min(x, out.m)); }, x1, q);
  out.C_quadrature = integrate_marginal(
      [&](double x) {
        const double z = (x <= a ? x : 0.0) + std::max(0.0, x - b);
        return std::exp(r * (x - z));
      },
      x1, q);

  // f(t) = e^{At}(B + (C - B)t). The affine part B + (C - B)t has a zero second
  // difference, so differencing (e^{At} - 1)(B + (C - B)t) avoids cancellation.
  const double A = out.A, B = out.B, C = out.C, h = 1e-2;
  auto shifted = [&](double t) { return std::expm1(A * t) * (B + (C - B) * t); };
  for (int j = 1; j <= 9; ++j) {
    const double t = 0.1 * j;
    out.t.push_back(t);
    out.second_derivative.push_back(std::exp(A * t) * A * (A * B + 2.0 * (C - B) + A * (C - B) * t));
    out.second_derivative_numeric.push_back((shifted(t + h) - 2.0 * shifted(t) + shifted(t - h)) / (h * h));
  }
  return out;
}

/// Two-risk discretization with equal-probability cells: nodes at cell
/// midpoints in probability, joint masses from copula rectangles.
inline Discretization oracle_discretization(const MarketModel& mm, int cells) {
  mm.validate();
  if (mm.size() != 2) throw DomainError("the grid oracle handles two risks");
  if (cells < 1 || cells > 64) throw DomainError("grid oracle refused: x grid must have 1..64 points");
  const auto g = static_cast<std::size_t>(cells);
  std::vector<MarginalMesh> meshes(2);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < g; ++k) {
      meshes[i].nodes.push_back(mm.marginals[i].quantile((static_cast<double>(k) + 0.5) / static_cast<double>(g)));
      meshes[i].weights.push_back(1.0 / static_cast<double>(g));
    }
  std::vector<double> joint(g * g);
  for (std::size_t a = 0; a < g; ++a)
    for (std::size_t b = 0; b < g; ++b) {
      const double u0 = static_cast<double>(a) / g, u1 = static_cast<double>(a + 1) / g;
      const double v0 = static_cast<double>(b) / g, v1 = static_cast<double>(b + 1) / g;
      const double mass =
          mm.copula.cdf(u1, v1) - mm.copula.cdf(u0, v1) - mm.copula.cdf(u1, v0) + mm.copula.cdf(u0, v0);
      joint[a * g + b] = std::max(mass, 0.0);
    }
  return Discretization::from_joint(mm, std::move(meshes), std::move(joint));
}

/// E U(L) on a two-risk discretization for ceded node values z.
inline double discrete_expected_utility(const MarketModel& mm, const Discretization& d,
                                        const std::vector<std::vector<double>>& z) {
  double p[2];
  for (std::size_t i = 0; i < 2; ++i)
    p[i] = mm.principles[i].premium(discrete_moments(z[i], d.masses(i), mm.principles[i].order()));
  double s = 0.0;
  for (std::size_t a = 0; a < d.size(0); ++a) {
    const double wa = mm.income - p[0] - p[1] - d.nodes(0)[a] + z[0][a];
    for (std::size_t b = 0; b < d.size(1); ++b)
      s += d.joint(a, b) * mm.utility.value(wa - d.nodes(1)[b] + z[1][b]);
  }
  return s;
}

struct OracleResult {
  Strategy strategy;
  double value = 0.0;
  std::vector<std::vector<double>> nodes, ceded;
  int sweeps = 0;
};

/// Coordinate descent over ceded levels linspace(0, x, z_grid_size) at each
/// node of oracle_discretization, starting from full cession and repricing
/// every candidate from its discrete moments, until a sweep changes nothing.
inline OracleResult brute_force_oracle(const MarketModel& mm, int x_grid_size, int z_grid_size) {
  if (z_grid_size < 1 || z_grid_size > 64) throw DomainError("grid oracle refused: z grid must have 1..64 points");
  const auto d = oracle_discretization(mm, x_grid_size);
  const auto levels = static_cast<std::size_t>(z_grid_size);
  auto level = [&](double x, std::size_t l) {
    if (l + 1 == levels) return levels == 1 ? 0.0 : x;
    return x * static_cast<double>(l) / static_cast<double>(levels - 1);
  };
  OracleResult out;
  std::vector<std::vector<std::size_t>> choice(2);
  for (std::size_t i = 0; i < 2; ++i) {
    out.nodes.push_back(d.nodes(i));
    choice[i].assign(d.size(i), levels - 1);
    out.ceded.emplace_back();
    for (double x : d.nodes(i)) out.ceded[i].push_back(level(x, levels - 1));
  }
  double best = discrete_expected_utility(mm, d, out.ceded);
  for (bool changed = true; changed; ++out.sweeps) {
    changed = false;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t n = 0; n < d.size(i); ++n) {
        std::vector<double> value(levels);
        parallel_for(levels, [&](std::size_t l) {
          auto trial = out.ceded;
          trial[i][n] = level(d.nodes(i)[n], l);
          value[l] = discrete_expected_utility(mm, d, trial);
        });
        std::size_t pick = choice[i][n];
        for (std::size_t l = 0; l < levels; ++l)
          if (value[l] > value[pick] + 1e-15) pick = l;
        if (pick != choice[i][n]) {
          choice[i][n] = pick;
          out.ceded[i][n] = level(d.nodes(i)[n], pick);
          best = value[pick];
          changed = true;
        }
      }
  }
  out.value = best;
  std::vector<TreatyCurve> curves;
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> x{0.0}, z{0.0};
    for (std::size_t n = 0; n < d.size(i); ++n)
      if (d.nodes(i)[n] > 0.0) {
        x.push_back(d.nodes(i)[n]);
        z.push_back(out.ceded[i][n]);
      }
    curves.push_back(TreatyCurve::piecewise(std::move(x), std::move(z)));
  }
  out.strategy = Strategy::build(mm, std::move(curves));
  return out;
}

/// Solver optimum on the oracle's discretization.
inline DiscreteSolution solve_on_oracle_grid(const MarketModel& mm, int x_grid_size, const SolverConfig& cfg = {}) {
  const auto d = oracle_discretization(mm, x_grid_size);
  return solve_discrete(mm, d, cfg);
}

/// sup over the grid of |Z_eps(x) - Z_0(x)| at a fixed moment state of risk i.
inline double smoothing_gap(const RiskProblem& p, double m0, const MomentVector& m, double eps,
                            const std::vector<double>& grid) {
  const Pricing pr = Pricing::at(p.principle(), m);
  std::vector<double> gap(grid.size());
  parallel_for(grid.size(), [&](std::size_t k) {
    const auto pt = p.point_at(grid[k]);
    gap[k] = std::abs(p.solve_ceded(pt, m0, pr, eps) - p.solve_ceded(pt, m0, pr, 0.0));
  });
  double s = 0.0;
  for (double g : gap) s = std::max(s, g);
  return s;
}

} // namespace retrocede
