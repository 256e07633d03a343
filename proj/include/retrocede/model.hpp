#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "retrocede/copula.hpp"
#include "retrocede/dist.hpp"
#include "retrocede/error.hpp"
#include "retrocede/market.hpp"

namespace retrocede {

/// Portfolio, dependence, pricing and preferences of the cedent.
///
/// The copula is bivariate: its first argument is risk 0 and its second is
/// risk 1. Portfolios with more than two risks must be independent.
struct MarketModel {
  std::vector<MarginalModel> marginals;
  CopulaModel copula = CopulaModel::independence();
  std::vector<PremiumPrinciple> principles;
  UtilityModel utility = UtilityModel::exponential(1.0);
  /// Aggregate premium income of the portfolio.
  double income = 0.0;

  std::size_t size() const { return marginals.size(); }

  void validate() const {
    if (marginals.empty()) throw ConfigError("market needs at least one risk");
    if (principles.size() != marginals.size())
      throw ConfigError("one premium principle per risk is required");
    if (!std::isfinite(income)) throw ConfigError("aggregate premium income must be finite");
    if (marginals.size() != 2 && !copula.is_independence())
      throw ConfigError("dependent copulas are bivariate; " + std::to_string(marginals.size()) +
                        " risks require the independence copula");
    for (std::size_t i = 0; i < marginals.size(); ++i) {
      const int k = principles[i].order();
      if (!(static_cast<double>(k) < marginals[i].moment_order_bound()))
        throw ConfigError("risk " + std::to_string(i + 1) + ": marginal lacks the moment of order " +
                          std::to_string(k) + " required by its premium principle");
    }
  }

  /// Density of the copula at the uniforms of risks i and j (i != j).
  double copula_density(std::size_t i, double ui, double uj) const {
    return i == 0 ? copula.density(ui, uj) : copula.density(uj, ui);
  }
};

} // namespace retrocede
