#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "retrocede/error.hpp"
#include "retrocede/model.hpp"
#include "retrocede/parallel.hpp"
#include "retrocede/quad.hpp"
#include "retrocede/treaty.hpp"

namespace retrocede {

enum class Initialization { Full, StopLossMedian };

struct SolverConfig {
  /// Barrier weights, solved in order with warm starts, then a clamped polish.
  std::vector<double> barrier_eps = {1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  double barrier_alpha = 0.25;
  double newton_tol = 1e-8;
  int newton_max_iter = 50;
  double newton_damping = 0.5;
  int newton_max_halvings = 20;
  /// Damped fixed-point iterations tried after Newton gives up.
  int fallback_max_iter = 2000;
  double outer_tol = 1e-9;
  /// Largest move of a ceded node, relative to 1 + x, still counted as settled.
  double outer_ceded_tol = 1e-9;
  int outer_max_cycles = 100;
  double root_tol = 1e-12;
  Initialization init = Initialization::Full;
  int treaty_knots = 401;
  double treaty_upper_prob = 1.0 - 1e-6;
  /// Chord tolerance and bisection depth for the sampled output curves.
  double treaty_refine_tol = 1e-8;
  int treaty_refine_levels = 8;

  void validate() const {
    if (barrier_eps.empty()) throw ConfigError("solver barrier_eps schedule is empty");
    for (std::size_t k = 0; k < barrier_eps.size(); ++k) {
      if (!(barrier_eps[k] > 0.0)) throw ConfigError("solver barrier_eps entries must be > 0");
      if (k > 0 && !(barrier_eps[k] < barrier_eps[k - 1]))
        throw ConfigError("solver barrier_eps schedule must be decreasing");
    }
    if (!(barrier_alpha > 0.0)) throw ConfigError("solver barrier_alpha must be > 0");
    if (!(newton_tol > 0.0) || !(outer_tol > 0.0) || !(outer_ceded_tol > 0.0) || !(root_tol > 0.0))
      throw ConfigError("solver tolerances must be > 0");
    if (!(newton_damping > 0.0 && newton_damping < 1.0)) throw ConfigError("solver newton_damping must lie in (0, 1)");
    if (newton_max_iter < 1 || newton_max_halvings < 0 || outer_max_cycles < 1 || fallback_max_iter < 0)
      throw ConfigError("solver iteration budgets must be positive");
    if (treaty_knots < 2) throw ConfigError("solver treaty_knots must be >= 2");
    if (!(treaty_refine_tol > 0.0) || treaty_refine_levels < 0)
      throw ConfigError("solver treaty refinement needs tol > 0 and levels >= 0");
    if (!(treaty_upper_prob > 0.5 && treaty_upper_prob < 1.0))
      throw ConfigError("solver treaty_upper_prob must lie in (0.5, 1)");
  }
};

/// Expected marginal utility level and ceded moments of every risk.
struct MomentState {
  double m0 = 0.0;
  std::vector<MomentVector> m;
};

/// beta(x, z) = eps * x^(a+1) / (1 + x^(a+1)) * (z^-a - (x - z)^-a).
inline double barrier(double x, double z, double eps, double alpha) {
  const double s = std::pow(x, alpha + 1.0);
  return eps * s / (1.0 + s) * (std::pow(z, -alpha) - std::pow(x - z, -alpha));
}

inline double barrier_dz(double x, double z, double eps, double alpha) {
  const double s = std::pow(x, alpha + 1.0);
  return -eps * s / (1.0 + s) * alpha * (std::pow(z, -alpha - 1.0) + std::pow(x - z, -alpha - 1.0));
}

/// Premium, gradient and Hessian of one principle at one moment vector.
struct Pricing {
  double premium = 0.0;
  MomentVector grad;
  std::vector<MomentVector> hess;

  static Pricing at(const PremiumPrinciple& p, const MomentVector& m) {
    return {p.premium(m), p.gradient(m), p.hessian(m)};
  }

  /// sum_r dPsi_r r z^(r-1)
  double marginal_price(double z) const {
    double s = 0.0, zp = 1.0;
    for (std::size_t r = 1; r <= grad.size(); ++r, zp *= z) s += grad[r - 1] * static_cast<double>(r) * zp;
    return s;
  }

  /// d/dz of marginal_price.
  double marginal_price_dz(double z) const {
    double s = 0.0, zp = 1.0;
    for (std::size_t r = 2; r <= grad.size(); ++r, zp *= z)
      s += grad[r - 1] * static_cast<double>(r * (r - 1)) * zp;
    return s;
  }
};

/// Discrete moments sum_n mass_n z_n^r, r = 1..k.
inline MomentVector discrete_moments(std::span<const double> z, std::span<const double> mass, int k) {
  MomentVector m(static_cast<std::size_t>(k), 0.0);
  for (std::size_t n = 0; n < z.size(); ++n) {
    double p = 1.0;
    for (int r = 0; r < k; ++r) {
      p *= z[n];
      m[static_cast<std::size_t>(r)] += mass[n] * p;
    }
  }
  return m;
}

/// Result of one fixed-point solve for a single risk.
struct FixedPoint {
  double m0 = 0.0;
  MomentVector m;
  int iterations = 0;
  double residual = 0.0;
  bool used_fallback = false;
};

/// Scaled sup-norm of Upsilon(v) - v.
inline double fixed_point_residual(const Eigen::VectorXd& v, const Eigen::VectorXd& f) {
  double r = std::abs(f[0]) / std::abs(v[0]);
  for (Eigen::Index k = 1; k < v.size(); ++k) r = std::max(r, std::abs(f[k]) / (1.0 + std::abs(v[k])));
  return r;
}

inline double spectral_radius(const Eigen::MatrixXd& j) {
  const Eigen::EigenSolver<Eigen::MatrixXd> es(j, false);
  double r = 0.0;
  for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k) r = std::max(r, std::abs(es.eigenvalues()[k]));
  return r;
}

/// Best-response problem of risk i with every other risk frozen.
///
/// The other risks enter through atoms S_k = y_k + P_j - Z_j(y_k) with
/// conditional weights W(x, k); Lambda(x, z) = sum_k W(x, k) U'(c - S_k - x + z).
/// Under exponential utility only log sum_k W(x, k) e^{R S_k} is stored.
class RiskProblem {
public:
  struct Point {
    double x = 0.0;
    double log_a = 0.0;
    std::vector<double> row;
  };

  struct Value {
    double m0 = 0.0;
    MomentVector m;
    std::vector<double> z;
  };

  RiskProblem(const MarketModel& mm, const Discretization& d, std::size_t i,
              const std::vector<std::vector<double>>& ceded, const std::vector<double>& premiums,
              const SolverConfig& cfg)
      : mm_(&mm), d_(&d), i_(i), cfg_(cfg), rate_(mm.utility.exponential_rate()) {
    const std::size_t n = mm.size();
    if (n > 2 && !rate_) throw ConfigError("more than two risks require exponential utility in the solver");
    if (n == 2) {
      const std::size_t j = 1 - i;
      for (std::size_t k = 0; k < d.size(j); ++k) atoms_.push_back(d.nodes(j)[k] + premiums[j] - ceded[j][k]);
    } else if (n == 1) {
      atoms_.push_back(0.0);
    } else {
      // Independent risks: e^{R S*} = prod_j E e^{R (X_j + P_j - Z_j)}.
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        std::vector<double> e;
        for (std::size_t k = 0; k < d.size(j); ++k)
          e.push_back(std::log(d.masses(j)[k]) + *rate_ * (d.nodes(j)[k] + premiums[j] - ceded[j][k]));
        s += log_sum_exp(e) / *rate_;
      }
      atoms_.push_back(s);
    }
    points_.resize(d.size(i));
    parallel_for(points_.size(), [&](std::size_t k) {
      points_[k] = make_point(d.nodes(i)[k], n == 2 ? d.conditional_row(i, k) : std::vector<double>{1.0});
    });
  }

  std::size_t risk() const { return i_; }
  std::size_t nodes() const { return points_.size(); }
  const Point& node(std::size_t n) const { return points_[n]; }
  const std::vector<double>& mass() const { return d_->masses(i_); }
  const PremiumPrinciple& principle() const { return mm_->principles[i_]; }
  int order() const { return principle().order(); }

  /// Conditioning point at an arbitrary loss.
  Point point_at(double x) const {
    if (mm_->size() != 2) return make_point(x, {1.0});
    return make_point(x, d_->conditional_row_at(i_, mm_->marginals[i_].cdf(x)));
  }

  /// Lambda(x, z): conditional expected marginal utility given X_i = x with
  /// the signed offset z added to wealth.
  double lambda(const Point& p, double z) const {
    if (rate_) return *rate_ * std::exp(-*rate_ * (mm_->income - p.x + z) + p.log_a);
    double s = 0.0;
    for (std::size_t k = 0; k < atoms_.size(); ++k) s += p.row[k] * mm_->utility.prime(wealth(p, k, z));
    return s;
  }

  /// dLambda/dz, the U'' analogue of lambda.
  double dlambda(const Point& p, double z) const {
    if (rate_) return -*rate_ * lambda(p, z);
    double s = 0.0;
    for (std::size_t k = 0; k < atoms_.size(); ++k) s += p.row[k] * mm_->utility.double_prime(wealth(p, k, z));
    return s;
  }

  double utility(const Point& p, double z) const {
    if (rate_) return -std::exp(-*rate_ * (mm_->income - p.x + z) + p.log_a);
    double s = 0.0;
    for (std::size_t k = 0; k < atoms_.size(); ++k) s += p.row[k] * mm_->utility.value(wealth(p, k, z));
    return s;
  }

  /// G(x, z) = Lambda(x, z - P) - m0 sum_r dPsi_r r z^(r-1).
  double g(const Point& p, double m0, const Pricing& pr, double z) const {
    return lambda(p, z - pr.premium) - m0 * pr.marginal_price(z);
  }

  /// Ceded amount solving G + beta_eps = 0 (eps > 0) or the clamped
  /// three-case rule (eps = 0).
  double solve_ceded(const Point& p, double m0, const Pricing& pr, double eps) const {
    const double x = p.x;
    if (!(x > 0.0)) return 0.0;
    const double tol = cfg_.root_tol * (1.0 + std::abs(m0));
    auto h = [&](double z, double& dh) {
      double v = g(p, m0, pr, z);
      dh = dlambda(p, z - pr.premium) - m0 * pr.marginal_price_dz(z);
      if (eps > 0.0) {
        v += barrier(x, z, eps, cfg_.barrier_alpha);
        dh += barrier_dz(x, z, eps, cfg_.barrier_alpha);
      }
      return v;
    };
    double dh = 0.0;
    if (eps == 0.0) {
      if (h(0.0, dh) <= 0.0) return 0.0;
      if (h(x, dh) >= 0.0) return x;
    }
    double lo = 0.0, hi = x;
    double z = initial_guess(p, m0, pr);
    if (!(z > lo && z < hi)) z = 0.5 * (lo + hi);
    // Newton steps that leave the bracket or fail to halve the step before
    // last are replaced by bisection.
    double step_old = hi - lo, step = step_old;
    for (int it = 0; it < 400; ++it) {
      const double v = h(z, dh);
      if (std::abs(v) <= tol) return z;
      if (v > 0.0) lo = z;
      else hi = z;
      if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * x) return 0.5 * (lo + hi);
      double next = z - v / dh;
      if (!(next > lo && next < hi) || std::abs(next - z) > 0.5 * std::abs(step_old)) next = 0.5 * (lo + hi);
      step_old = step;
      step = next - z;
      z = next;
    }
    throw NumericError("ceded-amount root did not converge at x=" + std::to_string(x));
  }

  /// Ceded amounts at every node.
  std::vector<double> ceded_at_nodes(double m0, const MomentVector& m, double eps) const {
    const Pricing pr = Pricing::at(principle(), m);
    std::vector<double> z(points_.size());
    parallel_for(points_.size(), [&](std::size_t n) { z[n] = solve_ceded(points_[n], m0, pr, eps); });
    return z;
  }

  /// Upsilon(m0, m): expected Lambda and moments of the induced ceded amounts.
  Value upsilon(double m0, const MomentVector& m, double eps) const {
    Value out;
    const Pricing pr = Pricing::at(principle(), m);
    out.z = ceded_at_nodes(m0, m, eps);
    std::vector<double> lam(points_.size());
    for (std::size_t n = 0; n < points_.size(); ++n) lam[n] = mass()[n] * lambda(points_[n], out.z[n] - pr.premium);
    for (double v : lam) out.m0 += v;
    out.m = discrete_moments(out.z, mass(), order());
    return out;
  }

  /// Analytic Jacobian of Upsilon in (m0, m_1..m_k). With eps = 0 the
  /// generalized Jacobian is returned: clamped nodes do not move.
  Eigen::MatrixXd jacobian(double m0, const MomentVector& m, double eps) const {
    const int k = order();
    const Pricing pr = Pricing::at(principle(), m);
    const auto z = ceded_at_nodes(m0, m, eps);
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(k + 1, k + 1);
    std::vector<double> dz(static_cast<std::size_t>(k + 1));
    for (std::size_t n = 0; n < points_.size(); ++n) {
      const Point& p = points_[n];
      const double mu = mass()[n];
      const double zn = z[n];
      const double dl = dlambda(p, zn - pr.premium);
      const bool clamped = eps == 0.0 && (zn <= 0.0 || zn >= p.x);
      if (clamped || !(p.x > 0.0)) {
        std::fill(dz.begin(), dz.end(), 0.0);
      } else {
        double den = dl - m0 * pr.marginal_price_dz(zn);
        if (eps > 0.0) den += barrier_dz(p.x, zn, eps, cfg_.barrier_alpha);
        dz[0] = pr.marginal_price(zn) / den;
        for (int l = 1; l <= k; ++l) {
          double hsum = 0.0, zp = 1.0;
          for (int r = 1; r <= k; ++r, zp *= zn)
            hsum += pr.hess[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(r - 1)] * r * zp;
          dz[static_cast<std::size_t>(l)] = (dl * pr.grad[static_cast<std::size_t>(l - 1)] + m0 * hsum) / den;
        }
      }
      jac(0, 0) += mu * dl * dz[0];
      for (int l = 1; l <= k; ++l)
        jac(0, l) += mu * dl * (dz[static_cast<std::size_t>(l)] - pr.grad[static_cast<std::size_t>(l - 1)]);
      double zp = 1.0;
      for (int r = 1; r <= k; ++r, zp *= zn)
        for (int c = 0; c <= k; ++c) jac(r, c) += mu * r * zp * dz[static_cast<std::size_t>(c)];
    }
    return jac;
  }

  /// Newton iteration on Upsilon(v) - v with backtracking, falling back to
  /// damped fixed-point iteration. eps = 0 uses the generalized Jacobian.
  FixedPoint newton_fixed_point(double m0, const MomentVector& m, double eps) const {
    const int k = order();
    Eigen::VectorXd v(k + 1);
    v[0] = m0;
    for (int r = 0; r < k; ++r) v[r + 1] = m[static_cast<std::size_t>(r)];
    auto eval = [&](const Eigen::VectorXd& at, Eigen::VectorXd& f) -> bool {
      if (!valid(at)) return false;
      try {
        const Value u = upsilon(at[0], unpack(at), eps);
        f.resize(k + 1);
        f[0] = u.m0 - at[0];
        for (int r = 0; r < k; ++r) f[r + 1] = u.m[static_cast<std::size_t>(r)] - at[r + 1];
        return f.allFinite();
      } catch (const DomainError&) {
        return false;
      }
    };
    Eigen::VectorXd f;
    if (!eval(v, f)) throw SolverStall("fixed point started outside the admissible moment set");
    FixedPoint out;
    double res = fixed_point_residual(v, f);
    for (; out.iterations < cfg_.newton_max_iter && res > cfg_.newton_tol; ++out.iterations) {
      Eigen::MatrixXd j = jacobian(v[0], unpack(v), eps) - Eigen::MatrixXd::Identity(k + 1, k + 1);
      const Eigen::VectorXd step = j.fullPivLu().solve(-f);
      bool accepted = false;
      double tau = 1.0;
      for (int h = 0; h <= cfg_.newton_max_halvings && step.allFinite(); ++h, tau *= cfg_.newton_damping) {
        Eigen::VectorXd cand = v + tau * step, fc;
        if (!eval(cand, fc)) continue;
        const double rc = fixed_point_residual(cand, fc);
        if (rc < (1.0 - 1e-4 * tau) * res) {
          v = cand;
          f = fc;
          res = rc;
          accepted = true;
          break;
        }
      }
      if (!accepted) break;
    }
    if (res > cfg_.newton_tol) {
      out.used_fallback = true;
      for (int it = 0; it < cfg_.fallback_max_iter && res > cfg_.newton_tol; ++it) {
        Eigen::VectorXd cand = v + 0.5 * f, fc;
        if (!eval(cand, fc)) break;
        v = cand;
        f = fc;
        res = fixed_point_residual(v, f);
        ++out.iterations;
      }
    }
    out.m0 = v[0];
    out.m = unpack(v);
    out.residual = res;
    if (res > cfg_.newton_tol)
      throw SolverStall("fixed point for risk " + std::to_string(i_ + 1) + " stalled at eps=" + std::to_string(eps) +
                        " with residual " + std::to_string(res));
    return out;
  }

  /// E U(L) when risk i cedes z at its nodes for premium P.
  double expected_utility(std::span<const double> z, double premium) const {
    double s = 0.0;
    for (std::size_t n = 0; n < points_.size(); ++n) s += mass()[n] * utility(points_[n], z[n] - premium);
    return s;
  }

  /// E U'(L) when risk i cedes z at its nodes for premium P.
  double marginal_utility(std::span<const double> z, double premium) const {
    double s = 0.0;
    for (std::size_t n = 0; n < points_.size(); ++n) s += mass()[n] * lambda(points_[n], z[n] - premium);
    return s;
  }

private:
  static double log_sum_exp(const std::vector<double>& v) {
    double top = -std::numeric_limits<double>::infinity();
    for (double e : v) top = std::max(top, e);
    if (!std::isfinite(top)) return top;
    double s = 0.0;
    for (double e : v) s += std::exp(e - top);
    return top + std::log(s);
  }

  Point make_point(double x, std::vector<double> row) const {
    Point p;
    p.x = x;
    if (rate_) {
      std::vector<double> e(atoms_.size());
      for (std::size_t k = 0; k < atoms_.size(); ++k)
        e[k] = row[k] > 0.0 ? std::log(row[k]) + *rate_ * atoms_[k] : -std::numeric_limits<double>::infinity();
      p.log_a = log_sum_exp(e);
    } else {
      p.row = std::move(row);
    }
    return p;
  }

  double wealth(const Point& p, std::size_t k, double z) const { return mm_->income - atoms_[k] - p.x + z; }

  /// Root of the unsmoothed first-order condition, exact for exponential
  /// utility with a linear premium.
  double initial_guess(const Point& p, double m0, const Pricing& pr) const {
    if (!rate_) return std::numeric_limits<double>::quiet_NaN();
    const double level = m0 * pr.grad[0];
    if (!(level > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return p.x - mm_->income + pr.premium + (std::log(*rate_) + p.log_a - std::log(level)) / *rate_;
  }

  MomentVector unpack(const Eigen::VectorXd& v) const {
    MomentVector m(static_cast<std::size_t>(v.size() - 1));
    for (Eigen::Index r = 1; r < v.size(); ++r) m[static_cast<std::size_t>(r - 1)] = v[r];
    return m;
  }

  bool valid(const Eigen::VectorXd& v) const {
    return v.allFinite() && v[0] > 0.0 && in_moment_closure(unpack(v));
  }

  const MarketModel* mm_;
  const Discretization* d_;
  std::size_t i_;
  SolverConfig cfg_;
  std::optional<double> rate_;
  std::vector<double> atoms_;
  std::vector<Point> points_;
};

/// Analytic Jacobian of Upsilon on the smoothed branch.
inline Eigen::MatrixXd upsilon_jacobian(const RiskProblem& p, double m0, const MomentVector& m, double eps) {
  if (!(eps > 0.0)) throw UnsupportedOperation("the Upsilon Jacobian is defined on the smoothed branch (eps > 0) only");
  return p.jacobian(m0, m, eps);
}

/// Lambda through the continuous conditional expectation: the other risks
/// follow the treaties and premiums in `s` (entry i of `s` is ignored).
inline double lambda_fn(const MarketModel& mm, std::size_t i, const Strategy& s, double x, double z,
                        const QuadratureSpec& q = {}) {
  if (const auto rate = mm.utility.exponential_rate(); rate && mm.size() > 2) {
    // Independent risks factorize: R e^{-R(c - x + z)} prod_j E e^{R (X_j + P_j - Z_j)}.
    double log_a = 0.0;
    for (std::size_t j = 0; j < mm.size(); ++j) {
      if (j == i) continue;
      log_a += std::log(integrate_marginal(
          [&](double y) { return std::exp(*rate * (y + s.premiums()[j] - s.treaty(j).eval(y))); }, mm.marginals[j],
          q));
    }
    return *rate * std::exp(-*rate * (mm.income - x + z) + log_a);
  }
  return cond_expect(
      mm, i, x,
      [&](std::span<const double> v) {
        double w = mm.income - x + z;
        for (std::size_t j = 0; j < v.size(); ++j)
          if (j != i) w -= v[j] + s.premiums()[j] - s.treaty(j).eval(v[j]);
        return mm.utility.prime(w);
      },
      q);
}

/// G through the continuous conditional expectation.
inline double g_fn(const MarketModel& mm, std::size_t i, double m0, const MomentVector& mi, const Strategy& s,
                   double x, double z, const QuadratureSpec& q = {}) {
  const Pricing pr = Pricing::at(mm.principles[i], mi);
  return lambda_fn(mm, i, s, x, z - pr.premium, q) - m0 * pr.marginal_price(z);
}

struct CycleRecord {
  int cycle = 0;
  double expected_utility = 0.0;
  double m0 = 0.0;
  std::vector<double> premiums;
  /// Per risk, in order; empty for the initialization record.
  std::vector<int> newton_iterations;
  std::vector<double> fixed_point_residual;
  std::vector<double> spectral_radius;
  std::vector<bool> used_fallback;
  /// Largest |delta z| / (1 + x) over the cycle's mesh nodes.
  double max_ceded_change = 0.0;
};

/// Optimum on a fixed discretization.
struct DiscreteSolution {
  std::vector<std::vector<double>> ceded;
  std::vector<double> premiums;
  MomentState state;
  double expected_utility = 0.0;
  std::vector<CycleRecord> cycles;
};

namespace detail {

inline std::vector<std::vector<double>> initial_ceded(const MarketModel& mm, const Discretization& d,
                                                      Initialization init) {
  std::vector<std::vector<double>> z(mm.size());
  for (std::size_t i = 0; i < mm.size(); ++i) {
    const double median = init == Initialization::StopLossMedian ? mm.marginals[i].quantile(0.5) : 0.0;
    for (double x : d.nodes(i)) z[i].push_back(std::max(0.0, x - median));
  }
  return z;
}

inline void check_hypotheses(const MarketModel& mm) {
  for (std::size_t i = 0; i < mm.size(); ++i) {
    if (!mm.marginals[i].has_density())
      throw ConfigError("risk " + std::to_string(i + 1) + ": the solver needs an atomless marginal with a density");
    if (mm.principles[i].condition_family() == "general")
      throw ConfigError("risk " + std::to_string(i + 1) +
                        ": the solver supports expected-value and variance-related principles");
  }
}

} // namespace detail

/// Cyclic best responses on a fixed discretization. Each risk's step anneals
/// the barrier weight down the schedule with warm-started Newton solves and
/// finishes with a clamped polish, so every step is an exact best response.
/// Cycling stops once a cycle gains less than outer_tol in utility and moves
/// no ceded node by more than outer_ceded_tol (1 + x).
inline DiscreteSolution solve_discrete(const MarketModel& mm, const Discretization& d, const SolverConfig& cfg) {
  mm.validate();
  cfg.validate();
  detail::check_hypotheses(mm);
  const std::size_t n = mm.size();
  DiscreteSolution sol;
  sol.ceded = detail::initial_ceded(mm, d, cfg.init);
  sol.state.m.resize(n);
  sol.premiums.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    sol.state.m[i] = discrete_moments(sol.ceded[i], d.masses(i), mm.principles[i].order());
    sol.premiums[i] = mm.principles[i].premium(sol.state.m[i]);
  }
  {
    const RiskProblem p0(mm, d, 0, sol.ceded, sol.premiums, cfg);
    sol.expected_utility = p0.expected_utility(sol.ceded[0], sol.premiums[0]);
    sol.state.m0 = p0.marginal_utility(sol.ceded[0], sol.premiums[0]);
  }
  sol.cycles.push_back({0, sol.expected_utility, sol.state.m0, sol.premiums, {}, {}, {}, {}});
  for (int cycle = 1; cycle <= cfg.outer_max_cycles; ++cycle) {
    CycleRecord rec;
    rec.cycle = cycle;
    double eu = sol.expected_utility;
    double moved = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const RiskProblem prob(mm, d, i, sol.ceded, sol.premiums, cfg);
      double m0 = prob.marginal_utility(sol.ceded[i], sol.premiums[i]);
      MomentVector mi = sol.state.m[i];
      int iterations = 0;
      bool fallback = false;
      FixedPoint fp;
      try {
        for (double eps : cfg.barrier_eps) {
          fp = prob.newton_fixed_point(m0, mi, eps);
          m0 = fp.m0;
          mi = fp.m;
          iterations += fp.iterations;
          fallback = fallback || fp.used_fallback;
        }
        fp = prob.newton_fixed_point(m0, mi, 0.0);
      } catch (const SolverStall& e) {
        throw SolverStall("cycle " + std::to_string(cycle) + ": " + e.what());
      }
      iterations += fp.iterations;
      fallback = fallback || fp.used_fallback;
      auto ceded = prob.ceded_at_nodes(fp.m0, fp.m, 0.0);
      for (std::size_t k = 0; k < ceded.size(); ++k)
        moved = std::max(moved, std::abs(ceded[k] - sol.ceded[i][k]) / (1.0 + d.nodes(i)[k]));
      sol.ceded[i] = std::move(ceded);
      sol.state.m[i] = discrete_moments(sol.ceded[i], d.masses(i), mm.principles[i].order());
      sol.premiums[i] = mm.principles[i].premium(sol.state.m[i]);
      eu = prob.expected_utility(sol.ceded[i], sol.premiums[i]);
      sol.state.m0 = prob.marginal_utility(sol.ceded[i], sol.premiums[i]);
      rec.newton_iterations.push_back(iterations);
      rec.fixed_point_residual.push_back(fp.residual);
      rec.used_fallback.push_back(fallback);
      double rho = std::numeric_limits<double>::quiet_NaN();
      try {
        rho = spectral_radius(upsilon_jacobian(prob, fp.m0, fp.m, cfg.barrier_eps.back()));
      } catch (const Error&) {
      }
      rec.spectral_radius.push_back(rho);
    }
    const double improvement = eu - sol.expected_utility;
    sol.expected_utility = eu;
    rec.expected_utility = eu;
    rec.m0 = sol.state.m0;
    rec.premiums = sol.premiums;
    rec.max_ceded_change = moved;
    sol.cycles.push_back(rec);
    if (improvement < cfg.outer_tol && moved < cfg.outer_ceded_tol) return sol;
  }
  throw SolverStall("no convergence after " + std::to_string(cfg.outer_max_cycles) + " cycles");
}

struct OptimizeResult {
  Strategy strategy;
  DiscreteSolution discrete;
  /// Abscissae at which each treaty was sampled.
  std::vector<std::vector<double>> grids;
};

/// Sorted union of {0}, the default treaty grid and the mesh nodes.
inline std::vector<double> output_grid(const MarginalModel& m, const std::vector<double>& nodes,
                                       const SolverConfig& cfg) {
  std::vector<double> g = treaty_grid(m, cfg.treaty_knots, cfg.treaty_upper_prob);
  g.insert(g.end(), nodes.begin(), nodes.end());
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  return g;
}

namespace detail {

/// Curve through the clamped solve on `grid`. Intervals whose midpoint value
/// departs from the chord by more than refine_tol (1 + x) are bisected, up
/// to refine_levels times. Past the last point the retention is held
/// constant so tail integrals stay finite for heavy-tailed risks.
inline TreatyCurve sampled_curve(const RiskProblem& prob, std::vector<double> grid, double m0, const Pricing& pr,
                                 const SolverConfig& cfg, std::vector<double>* knots_out = nullptr) {
  auto solve = [&](const std::vector<double>& xs) {
    std::vector<double> z(xs.size());
    parallel_for(xs.size(), [&](std::size_t k) { z[k] = prob.solve_ceded(prob.point_at(xs[k]), m0, pr, 0.0); });
    return z;
  };
  std::vector<double> z = solve(grid);
  std::vector<std::size_t> open(grid.size() - 1);
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) open[k] = k;
  for (int level = 0; level < cfg.treaty_refine_levels && !open.empty(); ++level) {
    std::vector<double> mid;
    for (std::size_t k : open) mid.push_back(0.5 * (grid[k] + grid[k + 1]));
    const std::vector<double> zm = solve(mid);
    std::vector<double> g2, z2;
    std::vector<bool> split(grid.size(), false);
    std::vector<std::size_t> where(grid.size(), 0);
    for (std::size_t j = 0; j < open.size(); ++j) {
      const std::size_t k = open[j];
      if (std::abs(zm[j] - 0.5 * (z[k] + z[k + 1])) > cfg.treaty_refine_tol * (1.0 + mid[j])) {
        split[k] = true;
        where[k] = j;
      }
    }
    std::vector<std::size_t> next;
    for (std::size_t k = 0; k < grid.size(); ++k) {
      g2.push_back(grid[k]);
      z2.push_back(z[k]);
      if (split[k]) {
        next.push_back(g2.size() - 1);
        g2.push_back(mid[where[k]]);
        z2.push_back(zm[where[k]]);
        next.push_back(g2.size() - 1);
      }
    }
    grid = std::move(g2);
    z = std::move(z2);
    open = std::move(next);
  }
  if (knots_out) *knots_out = grid;
  grid.push_back(2.0 * grid.back());
  z.push_back(z.back() + 0.5 * grid.back());
  return TreatyCurve::piecewise(std::move(grid), std::move(z));
}

} // namespace detail

/// Clamped ceded curves of the final state sampled on the output grids.
inline std::vector<TreatyCurve> final_treaties(const MarketModel& mm, const Discretization& d,
                                               const DiscreteSolution& sol, const SolverConfig& cfg,
                                               std::vector<std::vector<double>>* grids = nullptr) {
  std::vector<TreatyCurve> out;
  for (std::size_t i = 0; i < mm.size(); ++i) {
    const RiskProblem prob(mm, d, i, sol.ceded, sol.premiums, cfg);
    const auto grid = output_grid(mm.marginals[i], d.nodes(i), cfg);
    out.push_back(detail::sampled_curve(prob, grid, sol.state.m0, Pricing::at(mm.principles[i], sol.state.m[i]), cfg));
    if (grids) grids->push_back(grid);
  }
  return out;
}

/// Optimal deterministic strategy of the cedent.
inline OptimizeResult optimize(const MarketModel& mm, const SolverConfig& cfg = {}, const QuadratureSpec& q = {}) {
  q.validate();
  const auto d = Discretization::build(mm, q);
  OptimizeResult out{Strategy{}, solve_discrete(mm, d, cfg), {}};
  out.strategy = Strategy::build(mm, final_treaties(mm, d, out.discrete, cfg, &out.grids), q);
  return out;
}

} // namespace retrocede
