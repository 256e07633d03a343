#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "retrocede/error.hpp"
#include "retrocede/model.hpp"
#include "retrocede/parallel.hpp"

namespace retrocede {

/// Accuracy knobs shared by every expectation in the library.
struct QuadratureSpec {
  /// Panels of the composite rule on the truncated support.
  int mesh_points = 256;
  /// Gauss-Legendre nodes per panel in fixed meshes.
  int panel_order = 4;
  int mc_samples = 20000;
  std::uint64_t rng_seed = 20200605;
  /// Support is cut at quantile(truncation_prob).
  double truncation_prob = 1.0 - 1e-14;
  /// Evaluate conditional layers by Monte Carlo instead of the mesh.
  bool monte_carlo = false;

  void validate() const {
    if (mesh_points < 16) throw ConfigError("quadrature mesh_points must be >= 16");
    if (mc_samples < 16) throw ConfigError("quadrature mc_samples must be >= 16");
    if (panel_order < 1 || panel_order > 64) throw ConfigError("quadrature panel_order must be in [1, 64]");
    if (!(truncation_prob > 0.9 && truncation_prob < 1.0))
      throw ConfigError("quadrature truncation_prob must lie in (0.9, 1)");
  }
};

struct GaussRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// Gauss-Legendre rule on [-1, 1] by Newton iteration on P_n.
inline GaussRule gauss_legendre(int n) {
  GaussRule r;
  r.nodes.resize(static_cast<std::size_t>(n));
  r.weights.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) p0 = 1.0, p1 = x;
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    r.nodes[static_cast<std::size_t>(i)] = -x;
    r.nodes[static_cast<std::size_t>(n - 1 - i)] = x;
    r.weights[static_cast<std::size_t>(i)] = w;
    r.weights[static_cast<std::size_t>(n - 1 - i)] = w;
  }
  if (n == 1) {
    r.nodes[0] = 0.0;
    r.weights[0] = 2.0;
  }
  return r;
}

namespace detail {

inline const GaussRule& rule10() {
  static const GaussRule r = gauss_legendre(10);
  return r;
}

template <class F>
double gauss_panel(F& f, double a, double b, const GaussRule& r) {
  const double h = 0.5 * (b - a), mid = 0.5 * (a + b);
  double s = 0.0;
  for (std::size_t k = 0; k < r.nodes.size(); ++k) s += r.weights[k] * f(mid + h * r.nodes[k]);
  return s * h;
}

/// Bisection refinement; `budget` counts remaining panel splits and stops
/// refinement once exhausted.
template <class F>
double adaptive_step(F& f, double a, double b, double whole, double abs_tol, int depth, long& budget) {
  const double m = 0.5 * (a + b);
  const double left = gauss_panel(f, a, m, rule10());
  const double right = gauss_panel(f, m, b, rule10());
  const double both = left + right;
  if (!std::isfinite(both)) return both;
  if (depth <= 0 || std::abs(both - whole) <= abs_tol || --budget <= 0) return both;
  return adaptive_step(f, a, m, left, 0.5 * abs_tol, depth - 1, budget) +
         adaptive_step(f, m, b, right, 0.5 * abs_tol, depth - 1, budget);
}

inline constexpr long kAdaptiveBudget = 50000;

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

} // namespace detail

/// Adaptive Gauss-Legendre (10-point, bisection) on [a, b].
template <class F>
double adaptive_gauss(F&& f, double a, double b, double rel_tol = 1e-12, double abs_tol = 1e-300,
                      int max_depth = 40) {
  if (!(b > a)) return 0.0;
  const double whole = detail::gauss_panel(f, a, b, detail::rule10());
  long budget = detail::kAdaptiveBudget;
  const double out =
      detail::adaptive_step(f, a, b, whole, std::max(abs_tol, rel_tol * std::abs(whole)), max_depth, budget);
  if (budget <= 0)
    throw QuadratureError("adaptive quadrature did not converge on [" + std::to_string(a) + ", " +
                          std::to_string(b) + "]");
  return out;
}

/// Independent uniform stream for block `block` of a run seeded by `seed`.
class UniformStream {
public:
  UniformStream(std::uint64_t seed, std::uint64_t block)
      : engine_(detail::splitmix(seed ^ detail::splitmix(block + 0x5DEECE66Dull))) {}
  /// Uniform on the open interval (0, 1).
  double operator()() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }

private:
  std::mt19937_64 engine_;
};

/// Panel boundaries as probabilities: half the panels uniform on [0, 0.9],
/// the rest geometric in survival probability down to the truncation level.
inline std::vector<double> panel_probabilities(int panels, double truncation_prob,
                                               const std::vector<double>& extra = {}) {
  const int bulk = panels / 2, tail = panels - bulk;
  const double split = 0.9;
  std::vector<double> p;
  p.reserve(static_cast<std::size_t>(panels) + extra.size() + 1);
  for (int k = 0; k <= bulk; ++k) p.push_back(split * k / bulk);
  const double s0 = 1.0 - split, s1 = 1.0 - truncation_prob;
  for (int k = 1; k <= tail; ++k) p.push_back(1.0 - s0 * std::pow(s1 / s0, static_cast<double>(k) / tail));
  for (double e : extra)
    if (e > 0.0 && e < truncation_prob) p.push_back(e);
  std::sort(p.begin(), p.end());
  p.erase(std::unique(p.begin(), p.end(), [](double a, double b) { return std::abs(a - b) < 1e-14; }),
          p.end());
  return p;
}

inline std::vector<double> panel_breakpoints(const MarginalModel& m, const QuadratureSpec& q,
                                             const std::vector<double>& extra_probs = {}) {
  std::vector<double> x;
  for (double p : panel_probabilities(q.mesh_points, q.truncation_prob, extra_probs)) x.push_back(m.quantile(p));
  x.erase(std::unique(x.begin(), x.end()), x.end());
  return x;
}

/// Quadrature nodes for one marginal; weights form a probability vector.
struct MarginalMesh {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// Composite Gauss-Legendre mesh of the marginal's density on its truncated
/// support. Empirical marginals use their sample points directly.
inline MarginalMesh build_mesh(const MarginalModel& m, const QuadratureSpec& q,
                               const std::vector<double>& extra_probs = {}) {
  MarginalMesh mesh;
  if (const auto* e = std::get_if<MarginalModel::Empirical>(&m.kind())) {
    mesh.nodes = e->sorted;
    mesh.weights.assign(e->sorted.size(), 1.0 / static_cast<double>(e->sorted.size()));
    return mesh;
  }
  const auto rule = gauss_legendre(q.panel_order);
  const auto bp = panel_breakpoints(m, q, extra_probs);
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < bp.size(); ++j) {
    const double h = 0.5 * (bp[j + 1] - bp[j]), mid = 0.5 * (bp[j + 1] + bp[j]);
    for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
      const double x = mid + h * rule.nodes[k];
      const double w = rule.weights[k] * h * m.pdf(x);
      mesh.nodes.push_back(x);
      mesh.weights.push_back(w);
      total += w;
    }
  }
  for (double& w : mesh.weights) w /= total;
  return mesh;
}

/// Extra panel probabilities a copula needs for the mesh of either margin.
inline std::vector<double> copula_breakpoints(const MarketModel& mm) { return mm.copula.breakpoints(); }

namespace detail {

template <class F>
double integrate_marginal_once(F& f, const MarginalModel& m, const QuadratureSpec& q) {
  auto integrand = [&](double x) {
    const double d = m.pdf(x);
    return d == 0.0 ? 0.0 : f(x) * d;
  };
  const auto bp = panel_breakpoints(m, q);
  double crude = 0.0;
  for (std::size_t j = 0; j + 1 < bp.size(); ++j) crude += gauss_panel(integrand, bp[j], bp[j + 1], rule10());
  const double abs_floor = 1e-15 * std::max(std::abs(crude), 1e-300);
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < bp.size(); ++j) {
    const double whole = gauss_panel(integrand, bp[j], bp[j + 1], rule10());
    long budget = kAdaptiveBudget;
    total += adaptive_step(integrand, bp[j], bp[j + 1], whole, std::max(abs_floor, 1e-13 * std::abs(whole)), 40,
                           budget);
    if (budget <= 0)
      throw QuadratureError("integrate_marginal: no convergence on panel [" + std::to_string(bp[j]) + ", " +
                            std::to_string(bp[j + 1]) + "] of " + m.name());
  }
  // Tail beyond the truncation point on doubling intervals until negligible.
  double a = bp.back(), len = std::max(bp.back(), 1.0), prev = std::abs(total);
  int growing = 0;
  for (int piece = 0; piece < 400; ++piece) {
    double part = 0.0;
    try {
      part = adaptive_gauss(integrand, a, a + len, 1e-12, 1e-16 * std::abs(total));
    } catch (const QuadratureError&) {
      throw IntegrabilityError("tail of the integrand cannot be resolved against " + m.name());
    }
    if (!std::isfinite(part)) throw IntegrabilityError("integrand is not integrable against " + m.name());
    total += part;
    const double mag = std::abs(part);
    if (mag <= 1e-15 * std::abs(total) || mag == 0.0) return total;
    growing = mag >= 0.9 * prev ? growing + 1 : 0;
    if (growing >= 4) throw IntegrabilityError("tail contributions do not decay against " + m.name());
    prev = mag;
    a += len;
    len *= 2.0;
  }
  throw IntegrabilityError("tail contributions did not become negligible against " + m.name());
}

} // namespace detail

/// E[f(X)] for X distributed as `m`: adaptive panels on the truncated support
/// plus a tail sweep, checked against a run on a twice finer mesh.
template <class F>
double integrate_marginal(F&& f, const MarginalModel& m, const QuadratureSpec& q = {}) {
  q.validate();
  if (const auto* e = std::get_if<MarginalModel::Empirical>(&m.kind())) {
    double s = 0.0;
    for (double v : e->sorted) s += f(v);
    return s / static_cast<double>(e->sorted.size());
  }
  const double coarse = detail::integrate_marginal_once(f, m, q);
  QuadratureSpec fine = q;
  fine.mesh_points *= 2;
  const double refined = detail::integrate_marginal_once(f, m, fine);
  if (std::abs(refined - coarse) > 1e-7 * std::max(std::abs(refined), 1e-300) &&
      std::abs(refined - coarse) > 1e-14)
    throw QuadratureError("integrate_marginal: mesh doubling moved the result from " + std::to_string(coarse) +
                          " to " + std::to_string(refined));
  return refined;
}

/// Discrete joint law used by the solver: a mesh per risk and, for two
/// dependent risks, a normalized joint weight matrix. Conditional laws and
/// marginal masses are both read off the joint weights, so the discrete
/// problem is internally consistent.
class Discretization {
public:
  static Discretization build(const MarketModel& mm, const QuadratureSpec& q) {
    q.validate();
    const auto extra = copula_breakpoints(mm);
    std::vector<MarginalMesh> meshes;
    for (const auto& m : mm.marginals) meshes.push_back(build_mesh(m, q, extra));
    return from_meshes(mm, std::move(meshes));
  }

  /// Joint weights w_n w_k c(F(x_n), F(y_k)) from the copula density.
  static Discretization from_meshes(const MarketModel& mm, std::vector<MarginalMesh> meshes) {
    Discretization d;
    d.meshes_ = std::move(meshes);
    d.copula_ = mm.copula;
    for (std::size_t i = 0; i < d.meshes_.size(); ++i) {
      d.uniforms_.emplace_back();
      for (double x : d.meshes_[i].nodes) d.uniforms_.back().push_back(mm.marginals[i].cdf(x));
    }
    if (d.meshes_.size() == 2 && !mm.copula.is_independence()) {
      const auto& a = d.meshes_[0];
      const auto& b = d.meshes_[1];
      d.joint_.resize(a.nodes.size() * b.nodes.size());
      double total = 0.0;
      for (std::size_t n = 0; n < a.nodes.size(); ++n)
        for (std::size_t k = 0; k < b.nodes.size(); ++k) {
          const double w = a.weights[n] * b.weights[k] * mm.copula.density(d.uniforms_[0][n], d.uniforms_[1][k]);
          d.joint_[n * b.nodes.size() + k] = w;
          total += w;
        }
      for (double& w : d.joint_) w /= total;
    }
    d.finish();
    return d;
  }

  /// Explicit joint weights (rows over risk 0 nodes), e.g. copula cell masses.
  static Discretization from_joint(const MarketModel& mm, std::vector<MarginalMesh> meshes,
                                   std::vector<double> joint) {
    if (meshes.size() != 2 || joint.size() != meshes[0].nodes.size() * meshes[1].nodes.size())
      throw DomainError("explicit joint weights need two meshes and a matching matrix");
    Discretization d;
    d.meshes_ = std::move(meshes);
    d.copula_ = mm.copula;
    for (std::size_t i = 0; i < 2; ++i) {
      d.uniforms_.emplace_back();
      for (double x : d.meshes_[i].nodes) d.uniforms_.back().push_back(mm.marginals[i].cdf(x));
    }
    double total = 0.0;
    for (double w : joint) total += w;
    for (double& w : joint) w /= total;
    d.joint_ = std::move(joint);
    d.finish();
    return d;
  }

  std::size_t risks() const { return meshes_.size(); }
  std::size_t size(std::size_t i) const { return meshes_[i].nodes.size(); }
  const std::vector<double>& nodes(std::size_t i) const { return meshes_[i].nodes; }
  /// Marginal probability of each node of risk i.
  const std::vector<double>& masses(std::size_t i) const { return masses_[i]; }
  bool is_product() const { return joint_.empty(); }

  /// Joint weight of node n of risk 0 and node k of risk 1.
  double joint(std::size_t n, std::size_t k) const {
    if (joint_.empty()) return masses_[0][n] * masses_[1][k];
    return joint_[n * meshes_[1].nodes.size() + k];
  }

  /// Conditional law of the other risk of a pair given node n of risk i.
  std::vector<double> conditional_row(std::size_t i, std::size_t n) const {
    const std::size_t j = 1 - i;
    std::vector<double> row(size(j));
    if (joint_.empty()) return masses_[j];
    double total = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) {
      row[k] = i == 0 ? joint(n, k) : joint(k, n);
      total += row[k];
    }
    for (double& w : row) w = total > 0.0 ? w / total : 1.0 / static_cast<double>(row.size());
    return row;
  }

  /// Conditional law of the other risk given risk i at an arbitrary uniform
  /// level; reproduces conditional_row exactly at mesh nodes.
  std::vector<double> conditional_row_at(std::size_t i, double u) const {
    const std::size_t j = 1 - i;
    if (joint_.empty()) return masses_[j];
    const auto& ui = uniforms_[i];
    auto it = std::lower_bound(ui.begin(), ui.end(), u);
    if (it != ui.end() && *it == u) return conditional_row(i, static_cast<std::size_t>(it - ui.begin()));
    std::vector<double> row(size(j));
    double total = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) {
      const double c = i == 0 ? copula_.density(u, uniforms_[j][k]) : copula_.density(uniforms_[j][k], u);
      row[k] = meshes_[j].weights[k] * c;
      total += row[k];
    }
    for (double& w : row) w /= total;
    return row;
  }

private:
  void finish() {
    masses_.clear();
    if (joint_.empty()) {
      for (const auto& m : meshes_) masses_.push_back(m.weights);
      return;
    }
    const std::size_t na = meshes_[0].nodes.size(), nb = meshes_[1].nodes.size();
    masses_.assign(2, {});
    masses_[0].assign(na, 0.0);
    masses_[1].assign(nb, 0.0);
    for (std::size_t n = 0; n < na; ++n)
      for (std::size_t k = 0; k < nb; ++k) {
        masses_[0][n] += joint_[n * nb + k];
        masses_[1][k] += joint_[n * nb + k];
      }
  }

  std::vector<MarginalMesh> meshes_;
  std::vector<std::vector<double>> uniforms_;
  std::vector<std::vector<double>> masses_;
  std::vector<double> joint_;
  CopulaModel copula_ = CopulaModel::independence();
};

/// Conditioned loss vector plus every other coordinate, in risk order.
using LossVector = std::vector<double>;

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

namespace detail {

/// Antithetic Monte Carlo over the risks other than i, conditioned on X_i = x.
template <class G>
MonteCarloEstimate cond_expect_mc(const MarketModel& mm, std::size_t i, double x, G& g, const QuadratureSpec& q) {
  const std::size_t n = mm.size();
  const std::size_t pairs = static_cast<std::size_t>(std::max(q.mc_samples / 2, 8));
  constexpr std::size_t kBlock = 1024;
  const std::size_t blocks = (pairs + kBlock - 1) / kBlock;
  std::vector<std::vector<double>> pair_means(blocks);
  const double ui = mm.marginals[i].cdf(x);
  const CopulaModel cop = i == 0 ? mm.copula : mm.copula.transposed();
  parallel_for(blocks, [&](std::size_t b) {
    UniformStream stream(q.rng_seed, b);
    const std::size_t count = std::min(kBlock, pairs - b * kBlock);
    auto& out = pair_means[b];
    out.resize(count);
    LossVector lo(n), hi(n);
    for (std::size_t s = 0; s < count; ++s) {
      lo[i] = hi[i] = x;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double p = stream();
        if (n == 2 && !cop.is_independence()) {
          lo[j] = mm.marginals[j].quantile(cop.cond_quantile(ui, p));
          hi[j] = mm.marginals[j].quantile(cop.cond_quantile(ui, 1.0 - p));
        } else {
          lo[j] = mm.marginals[j].quantile(p);
          hi[j] = mm.marginals[j].quantile(1.0 - p);
        }
      }
      out[s] = 0.5 * (g(std::span<const double>(lo)) + g(std::span<const double>(hi)));
    }
  });
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (const auto& block : pair_means)
    for (double v : block) {
      sum += v;
      ++count;
    }
  const double mean = sum / static_cast<double>(count);
  for (const auto& block : pair_means)
    for (double v : block) sq += (v - mean) * (v - mean);
  const double var = count > 1 ? sq / static_cast<double>(count - 1) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(count)), 2 * count};
}

} // namespace detail

/// E[g(X) | X_i = x] by Monte Carlo with antithetic conditional sampling.
template <class G>
MonteCarloEstimate cond_expect_mc(const MarketModel& mm, std::size_t i, double x, G&& g, const QuadratureSpec& q = {}) {
  mm.validate();
  q.validate();
  if (mm.size() == 1) {
    const LossVector v{x};
    return {g(std::span<const double>(v)), 0.0, 1};
  }
  return detail::cond_expect_mc(mm, i, x, g, q);
}

/// E[g(X) | X_i = x]. Two risks use a mesh over the other risk weighted by
/// the conditional density c(F_i(x), F_j(y)) f_j(y); larger independent
/// portfolios (or q.monte_carlo) use the Monte Carlo path.
template <class G>
double cond_expect(const MarketModel& mm, std::size_t i, double x, G&& g, const QuadratureSpec& q = {}) {
  mm.validate();
  q.validate();
  if (i >= mm.size()) throw DomainError("risk index out of range");
  if (mm.size() == 1) {
    const LossVector v{x};
    return g(std::span<const double>(v));
  }
  if (q.monte_carlo || mm.size() > 2) return detail::cond_expect_mc(mm, i, x, g, q).mean;
  const std::size_t j = 1 - i;
  const auto mesh = build_mesh(mm.marginals[j], q, copula_breakpoints(mm));
  const double ui = mm.marginals[i].cdf(x);
  LossVector v(2);
  v[i] = x;
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < mesh.nodes.size(); ++k) {
    const double w = mesh.weights[k] * mm.copula_density(i, ui, mm.marginals[j].cdf(mesh.nodes[k]));
    v[j] = mesh.nodes[k];
    num += w * g(std::span<const double>(v));
    den += w;
  }
  return num / den;
}

} // namespace retrocede
