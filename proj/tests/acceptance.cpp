#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "retrocede/cli.hpp"

using namespace retrocede;

namespace {

using Clock = std::chrono::steady_clock;

const fs::path kConfigs = RETROCEDE_CONFIG_DIR;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool report(int n, bool ok, const std::string& detail) {
  std::printf("criterion %d [%s] %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  return ok;
}

void note(const std::string& line) {
  std::printf("  %s\n", line.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

std::vector<ExperimentConfig> suite_configs() {
  std::vector<ExperimentConfig> out;
  for (const auto& e : load_suite(kConfigs / "paper_suite.json").runs) out.push_back(load_config(e.config));
  return out;
}

std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) v[static_cast<std::size_t>(k)] = a + (b - a) * k / (n - 1);
  return v;
}

// Composite Simpson rule from lo to hi (signed) with 2n panels, independent of the library quadrature.
double simpson(const std::function<double(double)>& f, double lo, double hi, int n = 20000) {
  if (hi < lo) return -simpson(f, hi, lo, n);
  if (hi == lo) return 0.0;
  const double h = (hi - lo) / (2 * n);
  double s = f(lo) + f(hi);
  for (int k = 1; k < 2 * n; ++k) s += (k % 2 ? 4.0 : 2.0) * f(lo + k * h);
  return s * h / 3.0;
}

// Root of e^{RM} = (1 + theta) E e^{R min(X, M)}, using E e^{R min(X, M)} = 1 + R int_0^M e^{Rx} S(x) dx.
double deductible_oracle(const std::function<double(double)>& survival, double r, double theta) {
  auto f = [&](double m) {
    return std::exp(r * m) - (1.0 + theta) * (1.0 + r * simpson([&](double x) { return std::exp(r * x) * survival(x); }, 0.0, m));
  };
  double lo = 1e-9, hi = 1.0;
  while (f(hi) < 0.0) hi *= 2.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

bool criterion_1() {
  const auto cfg = load_config(kConfigs / "independence_ev.json");
  const auto t0 = Clock::now();
  const auto res = optimize(cfg.model, cfg.solver, cfg.quadrature);
  const double runtime = seconds_since(t0);
  const double r = *cfg.model.utility.exponential_rate();
  const std::function<double(double)> survival[2] = {[](double x) { return std::exp(-x); },
                                                     [](double x) { return std::pow(1.0 + x / 4.0, -5.0); }};
  const double theta[2] = {0.3, 0.5};
  bool ok = runtime <= 60.0;
  double worst_shape = 0.0, risk1_error = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& t = res.strategy.treaty(i);
    const double q99 = cfg.model.marginals[i].quantile(0.99);
    const double fitted = q99 - t.eval(q99);
    double shape = 0.0;
    for (double x : linspace(0.0, q99, 4001)) shape = std::max(shape, std::abs(t.eval(x) - std::max(0.0, x - fitted)));
    const double oracle = deductible_oracle(survival[i], r, theta[i]);
    note(fmt("risk %.0f: fitted deductible %.9f, oracle %.9f, sup |Z - stop-loss| on [0, q99] = %.3e", double(i + 1),
             fitted, oracle, shape));
    worst_shape = std::max(worst_shape, shape);
    if (i == 0) risk1_error = std::abs(fitted - oracle);
  }
  ok = ok && worst_shape < 1e-3 && risk1_error <= 1e-5;
  return report(1, ok,
                fmt("independence EV: shape gap %.3e (< 1e-3), risk-1 deductible error %.3e (<= 1e-5), runtime %.1f s "
                    "(<= 60)",
                    worst_shape, risk1_error, runtime));
}

bool criterion_2() {
  double worst = -1e300;
  for (const char* kind : {"ev", "sd"}) {
    const auto neg = load_config(kConfigs / (std::string("frank_neg10_") + kind + ".json"));
    const auto ind = load_config(kConfigs / (std::string("independence_") + kind + ".json"));
    const auto a = optimize(neg.model, neg.solver, neg.quadrature);
    const auto b = optimize(ind.model, ind.solver, ind.quadrature);
    for (std::size_t i = 0; i < 2; ++i) {
      double excess = -1e300;
      for (double x : treaty_grid(neg.model.marginals[i], neg.solver.treaty_knots, neg.solver.treaty_upper_prob))
        excess = std::max(excess, a.strategy.treaty(i).eval(x) - b.strategy.treaty(i).eval(x));
      note(std::string(kind) + fmt(" risk %.0f: max (Z_frank(-10) - Z_independence) = %.3e", double(i + 1), excess));
      worst = std::max(worst, excess);
    }
  }
  return report(2, worst <= 1e-3, fmt("Frank(-10) cedes at most the independence amount: worst excess %.3e (<= 1e-3)", worst));
}

bool criterion_3() {
  bool ok = true;
  for (const auto& cfg : suite_configs()) {
    const auto res = optimize(cfg.model, cfg.solver, cfg.quadrature);
    double worst_drop = 0.0;
    const auto& c = res.discrete.cycles;
    for (std::size_t k = 1; k < c.size(); ++k)
      worst_drop = std::max(worst_drop, c[k - 1].expected_utility - c[k].expected_utility);
    const bool mono = worst_drop <= 1e-9;
    note(cfg.name + fmt(": %.0f cycles, largest utility drop %.3e", double(c.size() - 1), worst_drop));
    ok = ok && mono;
  }
  return report(3, ok, "per-cycle expected utility nondecreasing within 1e-9 on all suite runs");
}

bool criterion_4() {
  bool ok = true;
  double worst = 0.0;
  for (const auto& cfg : suite_configs()) {
    const auto res = optimize(cfg.model, cfg.solver, cfg.quadrature);
    const auto rep = optimality_residual(cfg.model, res.strategy, cfg.quadrature, residual_grids(cfg));
    const double rel = rep.max_violation / rep.m0;
    note(cfg.name + fmt(": max violation / m0 = %.3e", rel));
    worst = std::max(worst, rel);
    ok = ok && rel <= 1e-4;
  }
  return report(4, ok, fmt("optimality residuals: worst max violation / m0 = %.3e (<= 1e-4)", worst));
}

bool criterion_5() {
  bool ok = true;
  for (const char* name : {"independence_ev", "frank10_ev", "frank_neg10_ev"}) {
    const auto cfg = load_config(kConfigs / (std::string(name) + ".json"));
    const auto t0 = Clock::now();
    const auto o = brute_force_oracle(cfg.model, 64, 64);
    const double runtime = seconds_since(t0);
    const auto sol = solve_on_oracle_grid(cfg.model, 64, cfg.solver);
    const double gap = std::abs(sol.expected_utility - o.value);
    note(std::string(name) + fmt(": solver %.9f, oracle %.9f, |diff| %.3e, oracle %.1f s", sol.expected_utility, o.value,
                                 gap, runtime));
    ok = ok && gap <= 1e-3 && runtime <= 600.0;
  }
  return report(5, ok, "64x64 grid oracle agrees with the solver within 1e-3, each oracle under 10 min");
}

bool criterion_6() {
  const auto pareto = MarginalModel::pareto(4.0, 5.0);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> alpha(0.05, 1.0), r(0.2, 2.0), m2(0.05, 5.0);
  double worst_rel = 0.0, largest = -1e300;
  for (int k = 0; k < 20; ++k) {
    const double a = alpha(rng), ra = r(rng), m = m2(rng);
    const auto d = stoploss_diagnostic(pareto, a, ra, m);
    worst_rel = std::max(worst_rel, std::abs(d.d_lhs_numeric - d.d_lhs_analytic) / std::abs(d.d_lhs_analytic));
    largest = std::max(largest, d.d_lhs_analytic);
  }
  return report(6, worst_rel <= 1e-5 && largest < 0.0,
                fmt("FGM stop-loss derivative: worst relative FD error %.3e (<= 1e-5), largest value %.3e (< 0)",
                    worst_rel, largest));
}

bool criterion_7() {
  const double lambda = 1.0, r = 0.5, theta = 0.3, b = 1.0;
  bool closed_ok = true, second_ok = true, sign_ok = true;
  for (double a : {0.02, 0.05})
    for (double eps : {-1e-3, 1e-3, -1e-4, 1e-4}) {
      const auto p = concavity_probe(lambda, r, theta, a, b, eps);
      // A = R (1 + theta)(E Z_alt - E (X - m)^+) = R (1 + theta)(int_0^a x f - int_m^b S), with a signed int_m^b.
      const double a_quad =
          r * (1.0 + theta) *
          (simpson([&](double x) { return x * lambda * std::exp(-lambda * x); }, 0.0, a) -
           simpson([&](double x) { return std::exp(-lambda * x); }, p.m, b));
      const double ea = std::abs(p.A - a_quad) / std::abs(p.A), eb = std::abs(p.B - p.B_quadrature) / std::abs(p.B),
                   ec = std::abs(p.C - p.C_quadrature) / std::abs(p.C);
      double e2 = 0.0;
      for (std::size_t j = 0; j < p.t.size(); ++j)
        e2 = std::max(e2, std::abs(p.second_derivative_numeric[j] - p.second_derivative[j]));
      const bool sign_match = (p.sign_expr > 0.0) == (eps > 0.0) && p.sign_expr != 0.0;
      note(fmt("a=%.2f eps=%+.0e: rel err A %.1e B %.1e", a, eps, ea, eb) +
           fmt(" C %.1e, f'' err %.1e, ", ec, e2) +
           fmt("A(AB+2(C-B)) = %+.3e, ", p.sign_expr) + (sign_match ? "sign ok" : "SIGN MISMATCH"));
      closed_ok = closed_ok && std::max({ea, eb, ec}) <= 1e-6;
      second_ok = second_ok && e2 <= 1e-6;
      sign_ok = sign_ok && sign_match;
    }
  return report(7, closed_ok && second_ok && sign_ok,
                std::string("concavity probe: closed forms ") + (closed_ok ? "ok" : "off") + ", second derivative " +
                    (second_ok ? "ok" : "off") + ", sign(A(AB+2(C-B))) = sign(eps) " + (sign_ok ? "ok" : "violated"));
}

bool criterion_8() {
  const auto exp1 = MarginalModel::exponential(1.0);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  bool ok = true;
  const std::pair<const char*, PremiumPrinciple> kinds[] = {{"expected_value", PremiumPrinciple::expected_value(0.3)},
                                                           {"std_dev", PremiumPrinciple::std_dev(0.5)},
                                                           {"variance", PremiumPrinciple::variance(0.2)}};
  for (const auto& [label, principle] : kinds) {
    MarketModel mm;
    mm.marginals = {exp1, MarginalModel::pareto(4.0, 5.0)};
    mm.copula = CopulaModel::frank(10.0);
    mm.principles = {principle, principle};
    mm.utility = UtilityModel::exponential(1.0);
    mm.income = 4.0;
    const auto d = Discretization::build(mm, {});
    std::vector<std::vector<double>> z(2);
    std::vector<double> premiums;
    for (std::size_t i = 0; i < 2; ++i) {
      z[i] = d.nodes(i);
      premiums.push_back(mm.principles[i].premium(discrete_moments(z[i], d.masses(i), mm.principles[i].order())));
    }
    const SolverConfig cfg;
    const RiskProblem prob(mm, d, 0, z, premiums, cfg);
    const int k = prob.order();
    double worst = 0.0;
    int failures = 0;
    for (int s = 0; s < 20; ++s) {
      const double m0 = std::exp(std::log(0.01) + unit(rng) * std::log(20.0));
      MomentVector m{0.05 + 0.75 * unit(rng)};
      if (k == 2) m.push_back(m[0] * m[0] * (1.1 + 2.0 * unit(rng)));
      const double eps = unit(rng) < 0.5 ? 1e-2 : 1e-3;
      const auto j = upsilon_jacobian(prob, m0, m, eps);
      auto flat = [&](const RiskProblem::Value& v) {
        std::vector<double> f{v.m0};
        f.insert(f.end(), v.m.begin(), v.m.end());
        return f;
      };
      for (int c = 0; c <= k; ++c) {
        double up_m0 = m0, dn_m0 = m0;
        MomentVector up = m, dn = m;
        const double base = c == 0 ? m0 : m[static_cast<std::size_t>(c - 1)];
        const double h = 1e-6 * std::max(1.0, std::abs(base));
        if (c == 0) {
          up_m0 += h;
          dn_m0 -= h;
        } else {
          up[static_cast<std::size_t>(c - 1)] += h;
          dn[static_cast<std::size_t>(c - 1)] -= h;
        }
        const auto fu = flat(prob.upsilon(up_m0, up, eps)), fd = flat(prob.upsilon(dn_m0, dn, eps));
        for (int row = 0; row <= k; ++row) {
          const double num = (fu[static_cast<std::size_t>(row)] - fd[static_cast<std::size_t>(row)]) / (2.0 * h);
          const double err = std::abs(j(row, c) - num);
          worst = std::max(worst, err / std::max(1e-4, 1e-3 * std::abs(j(row, c))));
          if (err > std::max(1e-4, 1e-3 * std::abs(j(row, c)))) ++failures;
        }
      }
    }
    note(std::string(label) + fmt(": worst error / tolerance %.3e, %.0f entries out of tolerance", worst, failures));
    ok = ok && failures == 0;
  }
  return report(8, ok, "analytic fixed-point Jacobian agrees with central differences within max(1e-4, 1e-3 rel)");
}

bool criterion_9() {
  bool ok = true;
  double worst = 0.0;
  for (const auto& cfg : suite_configs()) {
    const auto d = Discretization::build(cfg.model, cfg.quadrature);
    const auto sol = solve_discrete(cfg.model, d, cfg.solver);
    for (std::size_t i = 0; i < cfg.model.size(); ++i) {
      const RiskProblem prob(cfg.model, d, i, sol.ceded, sol.premiums, cfg.solver);
      const auto grid = treaty_grid(cfg.model.marginals[i], cfg.solver.treaty_knots, cfg.solver.treaty_upper_prob);
      const double gap = smoothing_gap(prob, sol.state.m0, sol.state.m[i], 1e-6, grid);
      note(cfg.name + fmt(" risk %.0f: sup |Z_1e-6 - Z_0| = %.3e", double(i + 1), gap));
      worst = std::max(worst, gap);
      ok = ok && gap <= 1e-4;
    }
  }
  return report(9, ok, fmt("smoothed vs clamped ceded solves: worst sup gap %.3e (<= 1e-4)", worst));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool criterion_10() {
  const fs::path root = fs::temp_directory_path() / "retrocede_acceptance_10";
  fs::remove_all(root);
  bool ok = true;
  int compared = 0;
  for (const char* name : {"frank10_ev", "checkerboard_sd"}) {
    const auto cfg = load_config(kConfigs / (std::string(name) + ".json"));
    RunOptions opt;
    opt.compare_independence = true;
    const fs::path a = root / name / "a", b = root / name / "b";
    run_experiment(cfg, a, opt);
    run_experiment(cfg, b, opt);
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file() || e.path().filename() == "timing.json") continue;
      const fs::path other = b / fs::relative(e.path(), a);
      ++compared;
      if (!fs::exists(other) || slurp(e.path()) != slurp(other)) {
        note("differs: " + fs::relative(e.path(), root).string());
        ok = false;
      }
    }
  }
  fs::remove_all(root);
  return report(10, ok && compared > 0,
                fmt("two consecutive runs: %.0f output files compared byte for byte (timing.json excluded)", compared));
}

} // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<bool()>> criteria = {criterion_1, criterion_2, criterion_3, criterion_4,
                                                       criterion_5, criterion_6, criterion_7, criterion_8,
                                                       criterion_9, criterion_10};
  std::vector<int> pick;
  for (int a = 1; a < argc; ++a) pick.push_back(std::atoi(argv[a]));
  if (pick.empty())
    for (int n = 1; n <= static_cast<int>(criteria.size()); ++n) pick.push_back(n);
  bool ok = true;
  for (int n : pick) {
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "no criterion %d\n", n);
      return 2;
    }
    try {
      ok = criteria[static_cast<std::size_t>(n - 1)]() && ok;
    } catch (const std::exception& e) {
      ok = report(n, false, std::string("threw: ") + e.what()) && ok;
    }
  }
  return ok ? 0 : 1;
}
