#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "retrocede/error.hpp"
#include "retrocede/model.hpp"
#include "retrocede/quad.hpp"

namespace retrocede {

/// Ceded amount as a function of the claim, 0 <= Z(x) <= x.
///
/// Parametric shapes are evaluated exactly; general curves interpolate
/// linearly between knots and continue past the last knot with the last
/// slope clamped to [0, 1].
class TreatyCurve {
public:
  enum class Shape { Null, Full, StopLoss, QuotaShare, Piecewise };

  static TreatyCurve null() { return TreatyCurve(Shape::Null, 0.0); }
  static TreatyCurve full() { return TreatyCurve(Shape::Full, 0.0); }

  static TreatyCurve stop_loss(double retention) {
    if (!(retention >= 0.0) || !std::isfinite(retention))
      throw DomainError("stop-loss retention must be finite and >= 0");
    return TreatyCurve(Shape::StopLoss, retention);
  }

  static TreatyCurve quota_share(double share) {
    if (!(share >= 0.0 && share <= 1.0)) throw DomainError("quota share must lie in [0, 1]");
    return TreatyCurve(Shape::QuotaShare, share);
  }

  /// Knots must start at 0, increase strictly and satisfy 0 <= z <= x.
  static TreatyCurve piecewise(std::vector<double> x, std::vector<double> z) {
    if (x.size() != z.size() || x.size() < 2) throw DomainError("treaty needs at least two matching knots");
    if (x.front() != 0.0) throw DomainError("treaty grid must start at 0");
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (j > 0 && !(x[j] > x[j - 1])) throw DomainError("treaty grid must be strictly increasing");
      if (!(z[j] >= 0.0 && z[j] <= x[j]))
        throw DomainError("ceded value outside [0, x] at x=" + std::to_string(x[j]));
    }
    TreatyCurve t(Shape::Piecewise, 0.0);
    t.x_ = std::move(x);
    t.z_ = std::move(z);
    return t;
  }

  Shape shape() const { return shape_; }
  double parameter() const { return param_; }
  const std::vector<double>& knots() const { return x_; }
  const std::vector<double>& values() const { return z_; }

  std::string name() const {
    switch (shape_) {
    case Shape::Null: return "null";
    case Shape::Full: return "full";
    case Shape::StopLoss: return "stop_loss(" + std::to_string(param_) + ")";
    case Shape::QuotaShare: return "quota_share(" + std::to_string(param_) + ")";
    case Shape::Piecewise: break;
    }
    return "piecewise(" + std::to_string(x_.size()) + " knots)";
  }

  double eval(double x) const {
    if (!(x > 0.0)) return 0.0;
    switch (shape_) {
    case Shape::Null: return 0.0;
    case Shape::Full: return x;
    case Shape::StopLoss: return std::max(0.0, x - param_);
    case Shape::QuotaShare: return param_ * x;
    case Shape::Piecewise: break;
    }
    const std::size_t last = x_.size() - 1;
    double z;
    if (x >= x_[last]) {
      const double slope = std::clamp((z_[last] - z_[last - 1]) / (x_[last] - x_[last - 1]), 0.0, 1.0);
      z = z_[last] + slope * (x - x_[last]);
    } else {
      const auto hi = static_cast<std::size_t>(std::upper_bound(x_.begin(), x_.end(), x) - x_.begin());
      const std::size_t lo = hi - 1;
      const double t = (x - x_[lo]) / (x_[hi] - x_[lo]);
      z = z_[lo] + t * (z_[hi] - z_[lo]);
    }
    return std::clamp(z, 0.0, x);
  }

  /// Abscissae where the curve may kink.
  std::vector<double> kinks() const {
    if (shape_ == Shape::StopLoss) return {param_};
    return x_;
  }

private:
  TreatyCurve(Shape s, double p) : shape_(s), param_(p) {}

  Shape shape_;
  double param_;
  std::vector<double> x_, z_;
};

/// Default abscissae for sampled treaties: `knots` points from 0 to the
/// marginal's quantile at `upper_prob`.
inline std::vector<double> treaty_grid(const MarginalModel& m, int knots = 401, double upper_prob = 1.0 - 1e-6) {
  if (knots < 2) throw DomainError("treaty grid needs at least two knots");
  const double top = m.quantile(upper_prob);
  std::vector<double> g(static_cast<std::size_t>(knots));
  for (int j = 0; j < knots; ++j) g[static_cast<std::size_t>(j)] = top * j / (knots - 1);
  return g;
}

/// Raw moments E Z^r, r = 1..k, of the ceded risk.
inline MomentVector moments(const TreatyCurve& t, const MarginalModel& m, int k, const QuadratureSpec& q = {}) {
  if (!(static_cast<double>(k) < m.moment_order_bound()) && t.shape() != TreatyCurve::Shape::Null)
    throw DomainError(m.name() + " has no moment of order " + std::to_string(k));
  MomentVector out(static_cast<std::size_t>(k), 0.0);
  for (int r = 1; r <= k; ++r) {
    double v = 0.0;
    switch (t.shape()) {
    case TreatyCurve::Shape::Null: v = 0.0; break;
    case TreatyCurve::Shape::Full: v = m.raw_moment(r); break;
    case TreatyCurve::Shape::QuotaShare: v = std::pow(t.parameter(), r) * m.raw_moment(r); break;
    default: v = integrate_marginal([&](double x) { return std::pow(t.eval(x), r); }, m, q); break;
    }
    out[static_cast<std::size_t>(r - 1)] = v;
  }
  return out;
}

/// One treaty per risk with the premiums they cost.
class Strategy {
public:
  /// Prices every treaty from its moments.
  static Strategy build(const MarketModel& mm, std::vector<TreatyCurve> treaties, const QuadratureSpec& q = {}) {
    mm.validate();
    if (treaties.size() != mm.size()) throw DomainError("one treaty per risk is required");
    Strategy s;
    for (std::size_t i = 0; i < treaties.size(); ++i) {
      s.moments_.push_back(moments(treaties[i], mm.marginals[i], mm.principles[i].order(), q));
      s.premiums_.push_back(mm.principles[i].premium(s.moments_.back()));
    }
    s.treaties_ = std::move(treaties);
    return s;
  }

  const std::vector<TreatyCurve>& treaties() const { return treaties_; }
  const TreatyCurve& treaty(std::size_t i) const { return treaties_[i]; }
  const std::vector<double>& premiums() const { return premiums_; }
  const std::vector<MomentVector>& ceded_moments() const { return moments_; }
  double total_premium() const {
    double s = 0.0;
    for (double p : premiums_) s += p;
    return s;
  }

private:
  std::vector<TreatyCurve> treaties_;
  std::vector<double> premiums_;
  std::vector<MomentVector> moments_;
};

/// Net profit after reinsurance for the loss vector x.
inline double net_profit(const MarketModel& mm, const Strategy& s, std::span<const double> x) {
  double out = mm.income;
  for (std::size_t i = 0; i < mm.size(); ++i) out -= s.premiums()[i] + x[i] - s.treaty(i).eval(x[i]);
  return out;
}

namespace detail {

inline bool all_full(const Strategy& s) {
  return std::all_of(s.treaties().begin(), s.treaties().end(),
                     [](const TreatyCurve& t) { return t.shape() == TreatyCurve::Shape::Full; });
}

/// E U(L) or, with `marginal`, E U'(L).
inline double expected_utility_once(const MarketModel& mm, const Strategy& s, const QuadratureSpec& q,
                                    bool marginal) {
  const std::size_t n = mm.size();
  auto util = [&](double w) { return marginal ? mm.utility.prime(w) : mm.utility.value(w); };
  if (n == 1) {
    return integrate_marginal([&](double x) { return util(mm.income - s.premiums()[0] - x + s.treaty(0).eval(x)); },
                              mm.marginals[0], q);
  }
  const auto rate = mm.utility.exponential_rate();
  if (mm.copula.is_independence() && rate) {
    // -e^{-Rc} prod_i e^{R P_i} E e^{R (X_i - Z_i(X_i))}
    double log_sum = -*rate * mm.income;
    for (std::size_t i = 0; i < n; ++i) {
      const double f = integrate_marginal(
          [&](double x) { return std::exp(*rate * (x - s.treaty(i).eval(x))); }, mm.marginals[i], q);
      log_sum += *rate * s.premiums()[i] + std::log(f);
    }
    return marginal ? *rate * std::exp(log_sum) : -std::exp(log_sum);
  }
  if (n == 2) {
    const auto d = Discretization::build(mm, q);
    double total = 0.0;
    std::vector<double> rows(d.size(0));
    parallel_for(d.size(0), [&](std::size_t a) {
      double acc = 0.0;
      const double xa = d.nodes(0)[a];
      const double wa = mm.income - s.premiums()[0] - s.premiums()[1] - xa + s.treaty(0).eval(xa);
      for (std::size_t b = 0; b < d.size(1); ++b) {
        const double xb = d.nodes(1)[b];
        acc += d.joint(a, b) * util(wa - xb + s.treaty(1).eval(xb));
      }
      rows[a] = acc;
    });
    for (double r : rows) total += r;
    return total;
  }
  throw UnsupportedOperation("expected utility of this portfolio needs the Monte Carlo path");
}

inline double expect_utility(const MarketModel& mm, const Strategy& s, const QuadratureSpec& q, bool marginal) {
  mm.validate();
  q.validate();
  auto util = [&](double w) { return marginal ? mm.utility.prime(w) : mm.utility.value(w); };
  if (all_full(s)) return util(mm.income - s.total_premium());
  if (mm.size() > 2 && !mm.utility.exponential_rate()) {
    // Plain Monte Carlo over the independent portfolio.
    const std::size_t n = mm.size();
    UniformStream stream(q.rng_seed, 0);
    double sum = 0.0;
    std::vector<double> x(n);
    for (int k = 0; k < q.mc_samples; ++k) {
      for (std::size_t i = 0; i < n; ++i) x[i] = mm.marginals[i].quantile(stream());
      sum += util(net_profit(mm, s, x));
    }
    return sum / q.mc_samples;
  }
  const double base = expected_utility_once(mm, s, q, marginal);
  if (!std::isfinite(base)) throw IntegrabilityError("expected utility is not finite");
  if (mm.size() == 2 && !(mm.copula.is_independence() && mm.utility.exponential_rate())) {
    QuadratureSpec deep = q;
    deep.truncation_prob = 1.0 - (1.0 - q.truncation_prob) / 100.0;
    const double check = expected_utility_once(mm, s, deep, marginal);
    if (!std::isfinite(check) || std::abs(check - base) > 1e-3 * std::abs(base))
      throw IntegrabilityError("expected utility changes from " + std::to_string(base) + " to " +
                               std::to_string(check) + " when the truncation is relaxed");
  }
  return base;
}

} // namespace detail

/// E U(net profit). Two dependent risks use the tensor mesh of the joint law;
/// the result is compared with a run whose truncation level is pushed 100x
/// further into the tail, and a relative change above 1e-3 is reported as a
/// divergent integral.
inline double expected_utility(const MarketModel& mm, const Strategy& s, const QuadratureSpec& q = {}) {
  return detail::expect_utility(mm, s, q, false);
}

/// E U'(net profit), computed like expected_utility.
inline double expected_marginal_utility(const MarketModel& mm, const Strategy& s, const QuadratureSpec& q = {}) {
  return detail::expect_utility(mm, s, q, true);
}

/// Writes `x,ceded,retained` rows for the given abscissae.
inline void write_treaty_csv(std::ostream& os, const TreatyCurve& t, const std::vector<double>& grid) {
  os << "x,ceded,retained\n";
  char buf[128];
  for (double x : grid) {
    const double z = t.eval(x);
    std::snprintf(buf, sizeof buf, "%.12g,%.12g,%.12g\n", x, z, x - z);
    os << buf;
  }
}

} // namespace retrocede
