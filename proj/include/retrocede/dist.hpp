#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "retrocede/error.hpp"

namespace retrocede {

/// Marginal law of one risk's aggregate loss on [0, inf).
///
/// Pareto uses the Lomax form F(x) = 1 - (scale / (scale + x))^shape, so
/// its support starts at zero like the exponential.
class MarginalModel {
public:
  struct Exponential {
    double rate;
  };
  struct Pareto {
    double scale;
    double shape;
  };
  struct Empirical {
    std::vector<double> sorted;
  };
  using Kind = std::variant<Exponential, Pareto, Empirical>;

  static MarginalModel exponential(double rate) {
    if (!(rate > 0.0) || !std::isfinite(rate))
      throw DomainError("exponential rate must be positive, got " + std::to_string(rate));
    return MarginalModel(Exponential{rate});
  }

  static MarginalModel pareto(double scale, double shape) {
    if (!(scale > 0.0) || !std::isfinite(scale))
      throw DomainError("pareto scale must be positive, got " + std::to_string(scale));
    if (!(shape > 1.0) || !std::isfinite(shape))
      throw DomainError("pareto shape must exceed 1, got " + std::to_string(shape));
    return MarginalModel(Pareto{scale, shape});
  }

  static MarginalModel empirical(std::vector<double> sample) {
    if (sample.empty())
      throw DomainError("empirical marginal needs at least one observation");
    for (double v : sample)
      if (!(v >= 0.0) || !std::isfinite(v))
        throw DomainError("empirical losses must be finite and nonnegative");
    std::sort(sample.begin(), sample.end());
    return MarginalModel(Empirical{std::move(sample)});
  }

  const Kind& kind() const { return kind_; }

  bool has_density() const { return !std::holds_alternative<Empirical>(kind_); }

  std::string name() const {
    return std::visit(
        [](const auto& k) -> std::string {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Exponential>)
            return "exponential(rate=" + fmt(k.rate) + ")";
          else if constexpr (std::is_same_v<T, Pareto>)
            return "pareto(scale=" + fmt(k.scale) + ", shape=" + fmt(k.shape) + ")";
          else
            return "empirical(n=" + std::to_string(k.sorted.size()) + ")";
        },
        kind_);
  }

  double cdf(double x) const {
    if (x < 0.0) return 0.0;
    return std::visit(
        [x](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Exponential>) {
            return -std::expm1(-k.rate * x);
          } else if constexpr (std::is_same_v<T, Pareto>) {
            return -std::expm1(-k.shape * std::log1p(x / k.scale));
          } else {
            auto it = std::upper_bound(k.sorted.begin(), k.sorted.end(), x);
            return static_cast<double>(it - k.sorted.begin()) / static_cast<double>(k.sorted.size());
          }
        },
        kind_);
  }

  /// 1 - cdf(x), computed without cancellation in the tail.
  double survival(double x) const {
    if (x < 0.0) return 1.0;
    return std::visit(
        [x, this](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Exponential>)
            return std::exp(-k.rate * x);
          else if constexpr (std::is_same_v<T, Pareto>)
            return std::exp(-k.shape * std::log1p(x / k.scale));
          else
            return 1.0 - cdf(x);
        },
        kind_);
  }

  double pdf(double x) const {
    return std::visit(
        [x](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Exponential>) {
            return x < 0.0 ? 0.0 : k.rate * std::exp(-k.rate * x);
          } else if constexpr (std::is_same_v<T, Pareto>) {
            if (x < 0.0) return 0.0;
            return k.shape / k.scale * std::exp(-(k.shape + 1.0) * std::log1p(x / k.scale));
          } else {
            throw UnsupportedOperation("empirical marginal has no density");
          }
        },
        kind_);
  }

  /// Smallest x with cdf(x) >= p. Unbounded supports reject p = 1.
  double quantile(double p) const {
    if (!(p >= 0.0) || p > 1.0)
      throw DomainError("quantile probability outside [0,1]: " + std::to_string(p));
    if (p == 0.0) return 0.0;
    return std::visit(
        [p](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Exponential>) {
            if (p >= 1.0) throw DomainError("quantile(1) is infinite for the exponential law");
            return -std::log1p(-p) / k.rate;
          } else if constexpr (std::is_same_v<T, Pareto>) {
            if (p >= 1.0) throw DomainError("quantile(1) is infinite for the pareto law");
            return k.scale * std::expm1(-std::log1p(-p) / k.shape);
          } else {
            const auto n = static_cast<double>(k.sorted.size());
            auto idx = static_cast<std::size_t>(std::ceil(p * n - 1e-12));
            idx = std::clamp<std::size_t>(idx, 1, k.sorted.size());
            return k.sorted[idx - 1];
          }
        },
        kind_);
  }

  /// E[X^order]. Pareto moments exist only for order < shape.
  double raw_moment(int order) const {
    if (order < 1) throw DomainError("moment order must be >= 1");
    return std::visit(
        [order](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Exponential>) {
            return std::exp(std::lgamma(order + 1.0) - order * std::log(k.rate));
          } else if constexpr (std::is_same_v<T, Pareto>) {
            if (!(order < k.shape))
              throw DomainError("pareto moment of order " + std::to_string(order) +
                                " does not exist for shape " + std::to_string(k.shape));
            // scale^k k! Gamma(a-k) / Gamma(a)
            return std::exp(order * std::log(k.scale) + std::lgamma(order + 1.0) +
                            std::lgamma(k.shape - order) - std::lgamma(k.shape));
          } else {
            double s = 0.0;
            for (double v : k.sorted) s += std::pow(v, order);
            return s / static_cast<double>(k.sorted.size());
          }
        },
        kind_);
  }

  /// Largest finite moment order, or a large sentinel when all exist.
  double moment_order_bound() const {
    if (const auto* p = std::get_if<Pareto>(&kind_)) return p->shape;
    return 1e300;
  }

private:
  explicit MarginalModel(Kind k) : kind_(std::move(k)) {}

  static std::string fmt(double v) {
    std::string s = std::to_string(v);
    s.erase(s.find_last_not_of('0') + 1);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
  }

  Kind kind_;
};

} // namespace retrocede
