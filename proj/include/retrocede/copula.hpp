#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "retrocede/error.hpp"

namespace retrocede {

/// Bivariate copula C(u, v). The first argument belongs to risk 1 and the
/// second to risk 2; conditional functions condition on the first argument.
class CopulaModel {
public:
  struct Independence {};
  struct Frank {
    double alpha;
  };
  struct FGM {
    double alpha;
  };
  /// Copula values on the uniform grid {0, 1/G, ..., 1}^2, row-major with the
  /// row index running over u. Inside each cell the mass is spread uniformly.
  struct Checkerboard {
    std::size_t cells;
    std::vector<double> grid;
    double at(std::size_t a, std::size_t b) const { return grid[a * (cells + 1) + b]; }
  };
  using Kind = std::variant<Independence, Frank, FGM, Checkerboard>;

  static CopulaModel independence() { return CopulaModel(Independence{}); }

  static CopulaModel frank(double alpha) {
    if (!std::isfinite(alpha) || alpha == 0.0)
      throw DomainError("frank parameter must be finite and nonzero (use independence for 0)");
    return CopulaModel(Frank{alpha});
  }

  static CopulaModel fgm(double alpha) {
    if (!(alpha >= -1.0 && alpha <= 1.0))
      throw DomainError("fgm parameter must lie in [-1, 1], got " + std::to_string(alpha));
    return CopulaModel(FGM{alpha});
  }

  /// Validates groundedness, uniform margins and 2-increasingness; the error
  /// message names the first failing rectangle.
  static CopulaModel checkerboard(std::vector<double> grid, double tol = 1e-10) {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(grid.size()))));
    if (side < 2 || side * side != grid.size())
      throw DomainError("checkerboard grid must hold (G+1)^2 values with G >= 1, got " +
                        std::to_string(grid.size()));
    const std::size_t g = side - 1;
    Checkerboard cb{g, std::move(grid)};
    for (double v : cb.grid)
      if (!(v >= -tol && v <= 1.0 + tol))
        throw DomainError("checkerboard values must lie in [0,1]");
    for (std::size_t k = 0; k <= g; ++k) {
      const double t = static_cast<double>(k) / static_cast<double>(g);
      if (std::abs(cb.at(0, k)) > tol || std::abs(cb.at(k, 0)) > tol)
        throw DomainError("checkerboard grid is not grounded at index " + std::to_string(k));
      if (std::abs(cb.at(g, k) - t) > tol || std::abs(cb.at(k, g) - t) > tol)
        throw DomainError("checkerboard grid margins are not uniform at index " + std::to_string(k));
    }
    for (std::size_t a = 0; a < g; ++a)
      for (std::size_t b = 0; b < g; ++b) {
        const double mass = cb.at(a + 1, b + 1) - cb.at(a, b + 1) - cb.at(a + 1, b) + cb.at(a, b);
        if (mass < -tol) {
          std::ostringstream os;
          os << "checkerboard grid is not 2-increasing on rectangle [" << static_cast<double>(a) / g << ","
             << static_cast<double>(a + 1) / g << "]x[" << static_cast<double>(b) / g << ","
             << static_cast<double>(b + 1) / g << "] (mass " << mass << ")";
          throw DomainError(os.str());
        }
      }
    return CopulaModel(std::move(cb));
  }

  const Kind& kind() const { return kind_; }
  bool is_independence() const { return std::holds_alternative<Independence>(kind_); }

  std::string name() const {
    return std::visit(
        [](const auto& k) -> std::string {
          using T = std::decay_t<decltype(k)>;
          std::ostringstream os;
          if constexpr (std::is_same_v<T, Independence>)
            os << "independence";
          else if constexpr (std::is_same_v<T, Frank>)
            os << "frank(alpha=" << k.alpha << ")";
          else if constexpr (std::is_same_v<T, FGM>)
            os << "fgm(alpha=" << k.alpha << ")";
          else
            os << "checkerboard(G=" << k.cells << ")";
          return os.str();
        },
        kind_);
  }

  /// Cell boundaries k/G of a checkerboard (interior only); empty otherwise.
  std::vector<double> breakpoints() const {
    std::vector<double> out;
    if (const auto* cb = std::get_if<Checkerboard>(&kind_))
      for (std::size_t k = 1; k < cb->cells; ++k) out.push_back(static_cast<double>(k) / cb->cells);
    return out;
  }

  /// Same dependence with the two arguments swapped.
  CopulaModel transposed() const {
    if (const auto* cb = std::get_if<Checkerboard>(&kind_)) {
      Checkerboard t{cb->cells, cb->grid};
      for (std::size_t a = 0; a <= cb->cells; ++a)
        for (std::size_t b = 0; b <= cb->cells; ++b) t.grid[b * (cb->cells + 1) + a] = cb->at(a, b);
      return CopulaModel(std::move(t));
    }
    return *this;
  }

  double cdf(double u, double v) const {
    u = clamp01(u);
    v = clamp01(v);
    return std::visit(
        [u, v](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Independence>) {
            return u * v;
          } else if constexpr (std::is_same_v<T, Frank>) {
            if (u == 0.0 || v == 0.0) return 0.0;
            const double a = k.alpha;
            const double d = std::expm1(-a);
            const double eu = std::expm1(-a * u);
            const double ev = std::expm1(-a * v);
            return -std::log1p(eu * ev / d) / a;
          } else if constexpr (std::is_same_v<T, FGM>) {
            return u * v * (1.0 + k.alpha * (1.0 - u) * (1.0 - v));
          } else {
            const auto [a, tu] = locate(u, k.cells);
            const auto [b, tv] = locate(v, k.cells);
            return (1 - tu) * (1 - tv) * k.at(a, b) + tu * (1 - tv) * k.at(a + 1, b) +
                   (1 - tu) * tv * k.at(a, b + 1) + tu * tv * k.at(a + 1, b + 1);
          }
        },
        kind_);
  }

  /// Mixed partial d^2 C / du dv. Checkerboard cells are half-open on the
  /// right: a point on a cell boundary takes the value of the cell above it.
  double density(double u, double v) const {
    return std::visit(
        [u, v](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Independence>) {
            return 1.0;
          } else if constexpr (std::is_same_v<T, Frank>) {
            const double a = k.alpha;
            const double d = std::expm1(-a);
            const double den = d + std::expm1(-a * u) * std::expm1(-a * v);
            return -a * d * std::exp(-a * (u + v)) / (den * den);
          } else if constexpr (std::is_same_v<T, FGM>) {
            return 1.0 + k.alpha * (2.0 * u - 1.0) * (2.0 * v - 1.0);
          } else {
            const auto a = locate(clamp01(u), k.cells).first;
            const auto b = locate(clamp01(v), k.cells).first;
            const double g = static_cast<double>(k.cells);
            return cell_mass(k, a, b) * g * g;
          }
        },
        kind_);
  }

  /// h(v | u) = dC/du (u, v): conditional cdf of the second coordinate.
  double cond_cdf(double u, double v) const {
    if (v <= 0.0) return 0.0;
    if (v >= 1.0) return 1.0;
    return std::visit(
        [u, v](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Independence>) {
            return v;
          } else if constexpr (std::is_same_v<T, Frank>) {
            const double a = k.alpha;
            const double ev = std::expm1(-a * v);
            const double h = std::exp(-a * u) * ev / (std::expm1(-a) + std::expm1(-a * u) * ev);
            return std::clamp(h, 0.0, 1.0);
          } else if constexpr (std::is_same_v<T, FGM>) {
            return v + k.alpha * v * (v - 1.0) * (2.0 * u - 1.0);
          } else {
            const auto a = locate(clamp01(u), k.cells).first;
            const auto [b, tv] = locate(v, k.cells);
            const double g = static_cast<double>(k.cells);
            const double lo = k.at(a + 1, b) - k.at(a, b);
            const double hi = k.at(a + 1, b + 1) - k.at(a, b + 1);
            return std::clamp(g * ((1 - tv) * lo + tv * hi), 0.0, 1.0);
          }
        },
        kind_);
  }

  /// Inverse of v -> h(v | u): safeguarded Newton with bisection fallback.
  double cond_quantile(double u, double p) const {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("conditional quantile probability outside [0,1]");
    if (p == 0.0) return 0.0;
    if (p == 1.0) return 1.0;
    if (is_independence()) return p;
    double lo = 0.0, hi = 1.0, v = p;
    for (int it = 0; it < 200; ++it) {
      const double r = cond_cdf(u, v) - p;
      if (std::abs(r) <= 1e-13) return v;
      if (r > 0.0) hi = v; else lo = v;
      if (hi - lo <= 1e-15) return 0.5 * (lo + hi);
      const double c = density(u, v);
      double next = c > 0.0 ? v - r / c : 0.5 * (lo + hi);
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      v = next;
    }
    throw NumericError("conditional quantile did not converge within 200 iterations");
  }

  /// d^3 C / du^2 dv for the FGM family: 2 (2v - 1) alpha, free of u.
  double fgm_d3(double /*u*/, double v) const {
    const auto* f = std::get_if<FGM>(&kind_);
    if (!f) throw UnsupportedOperation("third mixed derivative is only implemented for FGM");
    return 2.0 * (2.0 * v - 1.0) * f->alpha;
  }

  /// Draws (u, v) by inverting the conditional cdf. `uniform` returns U(0,1).
  template <class Uniform>
  std::pair<double, double> sample(Uniform&& uniform) const {
    const double u = uniform();
    const double p = uniform();
    return {u, cond_quantile(u, p)};
  }

private:
  explicit CopulaModel(Kind k) : kind_(std::move(k)) {}

  static double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

  /// Cell index and fractional position; the top edge belongs to the last cell.
  static std::pair<std::size_t, double> locate(double t, std::size_t cells) {
    const double s = t * static_cast<double>(cells);
    auto a = static_cast<std::size_t>(std::floor(s));
    if (a >= cells) a = cells - 1;
    return {a, s - static_cast<double>(a)};
  }

  static double cell_mass(const Checkerboard& k, std::size_t a, std::size_t b) {
    return k.at(a + 1, b + 1) - k.at(a, b + 1) - k.at(a + 1, b) + k.at(a, b);
  }

  Kind kind_;
};

} // namespace retrocede
