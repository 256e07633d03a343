#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "retrocede/error.hpp"

namespace retrocede {

using MomentVector = std::vector<double>;

/// Tolerance used when deciding whether a moment vector lies in the closure
/// of the moment manifold m1 <= m2^(1/2) <= ... <= mk^(1/k).
inline constexpr double kMomentTolerance = 1e-9;

/// True when `m` lies (within `tol`) in the closure of the moment manifold.
inline bool in_moment_closure(const MomentVector& m, double tol = kMomentTolerance) {
  double prev = 0.0;
  for (std::size_t j = 0; j < m.size(); ++j) {
    if (!std::isfinite(m[j]) || m[j] < -tol) return false;
    const double mean = std::pow(std::max(m[j], 0.0), 1.0 / static_cast<double>(j + 1));
    if (mean + tol * (1.0 + mean) < prev) return false;
    prev = mean;
  }
  return true;
}

/// Premium principle priced from the first k raw moments of the ceded risk.
class PremiumPrinciple {
public:
  struct ExpectedValue {
    double theta;
  };
  struct StdDev {
    double theta;
  };
  /// P = E Z + g(Var Z), with g and its first two derivatives.
  struct Variance {
    std::string label;
    std::function<double(double)> g, dg, d2g;
  };
  struct GeneralMoment {
    std::string label;
    int order;
    std::function<double(const MomentVector&)> psi;
    std::function<MomentVector(const MomentVector&)> gradient;
    std::function<std::vector<MomentVector>(const MomentVector&)> hessian;
  };
  using Kind = std::variant<ExpectedValue, StdDev, Variance, GeneralMoment>;

  static PremiumPrinciple expected_value(double theta) {
    check_loading(theta);
    return PremiumPrinciple(ExpectedValue{theta});
  }
  static PremiumPrinciple std_dev(double theta) {
    check_loading(theta);
    return PremiumPrinciple(StdDev{theta});
  }
  /// Variance principle with linear loading g(v) = theta v.
  static PremiumPrinciple variance(double theta) {
    check_loading(theta);
    std::ostringstream os;
    os << "variance(theta=" << theta << ")";
    return PremiumPrinciple(Variance{os.str(), [theta](double v) { return theta * v; },
                                     [theta](double) { return theta; }, [](double) { return 0.0; }});
  }
  static PremiumPrinciple variance(std::string label, std::function<double(double)> g,
                                   std::function<double(double)> dg, std::function<double(double)> d2g) {
    return PremiumPrinciple(Variance{std::move(label), std::move(g), std::move(dg), std::move(d2g)});
  }
  static PremiumPrinciple general(GeneralMoment gm) {
    if (gm.order < 1) throw DomainError("premium moment order must be >= 1");
    return PremiumPrinciple(std::move(gm));
  }

  const Kind& kind() const { return kind_; }

  int order() const {
    return std::visit(
        [](const auto& k) -> int {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, ExpectedValue>) return 1;
          else if constexpr (std::is_same_v<T, GeneralMoment>) return k.order;
          else return 2;
        },
        kind_);
  }

  std::string name() const {
    return std::visit(
        [](const auto& k) -> std::string {
          using T = std::decay_t<decltype(k)>;
          std::ostringstream os;
          if constexpr (std::is_same_v<T, ExpectedValue>) os << "expected_value(theta=" << k.theta << ")";
          else if constexpr (std::is_same_v<T, StdDev>) os << "std_dev(theta=" << k.theta << ")";
          else os << k.label;
          return os.str();
        },
        kind_);
  }

  /// "expected_value" or "variance_related" when a closed-form optimality
  /// corollary applies, "general" otherwise.
  std::string condition_family() const {
    if (std::holds_alternative<ExpectedValue>(kind_)) return "expected_value";
    if (std::holds_alternative<GeneralMoment>(kind_)) return "general";
    return "variance_related";
  }

  double premium(const MomentVector& m) const {
    check_moments(m);
    return std::visit(
        [&m](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, ExpectedValue>) {
            return (1.0 + k.theta) * m[0];
          } else if constexpr (std::is_same_v<T, StdDev>) {
            return m[0] + k.theta * std::sqrt(variance_of(m));
          } else if constexpr (std::is_same_v<T, Variance>) {
            return m[0] + k.g(variance_of(m));
          } else {
            return k.psi(m);
          }
        },
        kind_);
  }

  MomentVector gradient(const MomentVector& m) const {
    check_moments(m);
    return std::visit(
        [&m](const auto& k) -> MomentVector {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, ExpectedValue>) {
            return {1.0 + k.theta};
          } else if constexpr (std::is_same_v<T, StdDev>) {
            const double s = std::sqrt(nondegenerate_variance(m));
            return {1.0 - k.theta * m[0] / s, 0.5 * k.theta / s};
          } else if constexpr (std::is_same_v<T, Variance>) {
            const double d = k.dg(variance_of(m));
            return {1.0 - 2.0 * m[0] * d, d};
          } else {
            return k.gradient(m);
          }
        },
        kind_);
  }

  /// Second derivatives of the premium with respect to the moments.
  std::vector<MomentVector> hessian(const MomentVector& m) const {
    check_moments(m);
    return std::visit(
        [&m](const auto& k) -> std::vector<MomentVector> {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, ExpectedValue>) {
            return {{0.0}};
          } else if constexpr (std::is_same_v<T, StdDev>) {
            const double v = nondegenerate_variance(m);
            const double s = std::sqrt(v);
            const double v32 = v * s;
            const double h11 = -k.theta / s - k.theta * m[0] * m[0] / v32;
            const double h12 = 0.5 * k.theta * m[0] / v32;
            const double h22 = -0.25 * k.theta / v32;
            return {{h11, h12}, {h12, h22}};
          } else if constexpr (std::is_same_v<T, Variance>) {
            const double v = variance_of(m);
            const double d1 = k.dg(v), d2 = k.d2g(v);
            return {{-2.0 * d1 + 4.0 * m[0] * m[0] * d2, -2.0 * m[0] * d2}, {-2.0 * m[0] * d2, d2}};
          } else {
            return k.hessian(m);
          }
        },
        kind_);
  }

private:
  explicit PremiumPrinciple(Kind k) : kind_(std::move(k)) {}

  static void check_loading(double theta) {
    if (!(theta >= 0.0) || !std::isfinite(theta))
      throw DomainError("premium loading must be finite and >= 0, got " + std::to_string(theta));
  }

  void check_moments(const MomentVector& m) const {
    if (static_cast<int>(m.size()) != order())
      throw DomainError("premium expects " + std::to_string(order()) + " moments, got " +
                        std::to_string(m.size()));
    if (!in_moment_closure(m)) {
      std::ostringstream os;
      os << "moment vector outside the admissible set:";
      for (double v : m) os << ' ' << v;
      throw InvalidMoment(os.str());
    }
  }

  static double variance_of(const MomentVector& m) { return std::max(0.0, m[1] - m[0] * m[0]); }

  static double nondegenerate_variance(const MomentVector& m) {
    const double v = m[1] - m[0] * m[0];
    if (!(v >= 1e-12)) throw DomainError("premium gradient undefined at degenerate variance");
    return v;
  }

  Kind kind_;
};

/// Concave nondecreasing utility of net profit.
class UtilityModel {
public:
  struct Exponential {
    double risk_aversion;
  };
  struct GeneralConcave {
    std::function<double(double)> u, du, d2u;
    double upper_bound;
  };
  using Kind = std::variant<Exponential, GeneralConcave>;

  static UtilityModel exponential(double risk_aversion) {
    if (!(risk_aversion > 0.0) || !std::isfinite(risk_aversion))
      throw DomainError("risk aversion must be positive, got " + std::to_string(risk_aversion));
    return UtilityModel(Exponential{risk_aversion});
  }

  /// Derivatives are supplied by the caller; they are never approximated.
  static UtilityModel general(std::function<double(double)> u, std::function<double(double)> du,
                              std::function<double(double)> d2u, double upper_bound) {
    return UtilityModel(GeneralConcave{std::move(u), std::move(du), std::move(d2u), upper_bound});
  }

  const Kind& kind() const { return kind_; }

  /// R when U(x) = -exp(-R x); the solver exploits U'(w + z) = U'(w) e^{-R z}.
  std::optional<double> exponential_rate() const {
    if (const auto* e = std::get_if<Exponential>(&kind_)) return e->risk_aversion;
    return std::nullopt;
  }

  std::string name() const {
    if (const auto* e = std::get_if<Exponential>(&kind_)) {
      std::ostringstream os;
      os << "exponential(R=" << e->risk_aversion << ")";
      return os.str();
    }
    return "general_concave";
  }

  double value(double x) const {
    if (const auto* e = std::get_if<Exponential>(&kind_)) {
      const double a = -e->risk_aversion * x;
      return a > kLogOverflow ? -std::numeric_limits<double>::infinity() : -std::exp(a);
    }
    const auto& g = std::get<GeneralConcave>(kind_);
    check_domain(g, x);
    return g.u(x);
  }

  double prime(double x) const {
    if (const auto* e = std::get_if<Exponential>(&kind_)) {
      const double a = -e->risk_aversion * x;
      return a > kLogOverflow ? std::numeric_limits<double>::infinity() : e->risk_aversion * std::exp(a);
    }
    const auto& g = std::get<GeneralConcave>(kind_);
    check_domain(g, x);
    return g.du(x);
  }

  double double_prime(double x) const {
    if (const auto* e = std::get_if<Exponential>(&kind_)) {
      const double a = -e->risk_aversion * x;
      const double r = e->risk_aversion;
      return a > kLogOverflow ? -std::numeric_limits<double>::infinity() : -r * r * std::exp(a);
    }
    const auto& g = std::get<GeneralConcave>(kind_);
    check_domain(g, x);
    return g.d2u(x);
  }

  /// Absolute risk aversion -U''/U'.
  double risk_aversion(double x) const { return -double_prime(x) / prime(x); }

private:
  explicit UtilityModel(Kind k) : kind_(std::move(k)) {}

  static constexpr double kLogOverflow = 700.0;

  static void check_domain(const GeneralConcave& g, double x) {
    if (x > g.upper_bound * (1.0 + 1e-12) + 1e-12)
      throw DomainError("utility evaluated above its domain bound");
  }

  Kind kind_;
};

} // namespace retrocede
