#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "retrocede/error.hpp"
#include "retrocede/model.hpp"
#include "retrocede/quad.hpp"
#include "retrocede/solver.hpp"

namespace retrocede {

/// Line on which the value at each JSON pointer starts.
class LineIndex {
public:
  LineIndex() = default;

  /// The text must already be valid JSON.
  explicit LineIndex(const std::string& text) : text_(&text) {
    value("");
    text_ = nullptr;
  }

  /// Line of `pointer`, falling back to its closest recorded ancestor.
  int line(std::string pointer) const {
    for (;;) {
      if (auto it = lines_.find(pointer); it != lines_.end()) return it->second;
      if (pointer.empty()) return 0;
      pointer.erase(pointer.rfind('/'));
    }
  }

  static std::string escape(const std::string& key) {
    std::string out;
    for (char c : key) {
      if (c == '~') out += "~0";
      else if (c == '/') out += "~1";
      else out += c;
    }
    return out;
  }

private:
  void skip() {
    while (pos_ < text_->size()) {
      const char c = (*text_)[pos_];
      if (c == '\n') ++line_;
      else if (c != ' ' && c != '\t' && c != '\r') return;
      ++pos_;
    }
  }

  std::string string() {
    std::string out;
    ++pos_;
    while ((*text_)[pos_] != '"') {
      if ((*text_)[pos_] == '\\') out += (*text_)[pos_++];
      out += (*text_)[pos_++];
    }
    ++pos_;
    return out;
  }

  void value(const std::string& pointer) {
    skip();
    lines_[pointer] = line_;
    const char c = (*text_)[pos_];
    if (c == '{' || c == '[') {
      ++pos_;
      const char close = c == '{' ? '}' : ']';
      for (std::size_t idx = 0;; ++idx) {
        skip();
        if ((*text_)[pos_] == close) break;
        std::string child = pointer + "/";
        if (c == '{') {
          child += escape(string());
          skip();
          ++pos_;
        } else {
          child += std::to_string(idx);
        }
        value(child);
        skip();
        if ((*text_)[pos_] == ',') ++pos_;
      }
      ++pos_;
    } else if (c == '"') {
      string();
    } else {
      while (pos_ < text_->size() && std::string_view(",]} \t\r\n").find((*text_)[pos_]) == std::string_view::npos)
        ++pos_;
    }
  }

  const std::string* text_ = nullptr;
  std::size_t pos_ = 0;
  int line_ = 1;
  std::map<std::string, int> lines_;
};

/// One experiment: the market, solver and quadrature settings, and where
/// results go.
struct ExperimentConfig {
  std::string name;
  MarketModel model;
  SolverConfig solver;
  QuadratureSpec quadrature;
  /// Output directory; empty when the config names none.
  std::string outputs;
  /// Parsed document, kept so variants (other R, independence) can be rebuilt.
  nlohmann::json document;
  std::string origin;
};

namespace detail {

/// JSON node with its pointer, for diagnostics of the form
/// `origin:line: at /risks/0/premium/theta: message`.
class ConfigNode {
public:
  ConfigNode(const nlohmann::json& j, std::string pointer, const LineIndex& index, const std::string& origin)
      : j_(&j), pointer_(std::move(pointer)), index_(&index), origin_(&origin) {}

  [[noreturn]] void fail(const std::string& message) const {
    std::ostringstream os;
    os << *origin_ << ":" << index_->line(pointer_) << ": at " << (pointer_.empty() ? "/" : pointer_) << ": "
       << message;
    throw ConfigError(os.str());
  }

  const nlohmann::json& json() const { return *j_; }
  const std::string& pointer() const { return pointer_; }
  bool has(const std::string& key) const { return j_->contains(key); }

  ConfigNode at(const std::string& key) const {
    if (!j_->is_object()) fail("expected an object");
    if (!j_->contains(key)) fail("missing key '" + key + "'");
    return child(key);
  }

  ConfigNode at(std::size_t k) const { return {(*j_)[k], pointer_ + "/" + std::to_string(k), *index_, *origin_}; }

  std::size_t array_size() const {
    if (!j_->is_array()) fail("expected an array");
    return j_->size();
  }

  void only(std::initializer_list<const char*> allowed) const {
    if (!j_->is_object()) fail("expected an object");
    for (const auto& [key, _] : j_->items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (!ok) child(key).fail("unknown key '" + key + "'");
    }
  }

  double number() const {
    if (!j_->is_number()) fail("expected a number");
    return j_->get<double>();
  }

  long long integer() const {
    if (!j_->is_number_integer() && !j_->is_number_unsigned()) fail("expected an integer");
    return j_->get<long long>();
  }

  std::string string() const {
    if (!j_->is_string()) fail("expected a string");
    return j_->get<std::string>();
  }

  bool boolean() const {
    if (!j_->is_boolean()) fail("expected true or false");
    return j_->get<bool>();
  }

  std::vector<double> numbers() const {
    std::vector<double> out;
    for (std::size_t k = 0; k < array_size(); ++k) out.push_back(at(k).number());
    return out;
  }

  /// Runs `build`, reporting library domain errors at this node.
  template <class F>
  auto guard(F&& build) const {
    try {
      return build();
    } catch (const ConfigError& e) {
      fail(e.what());
    } catch (const DomainError& e) {
      fail(e.what());
    }
  }

private:
  ConfigNode child(const std::string& key) const {
    return {(*j_)[key], pointer_ + "/" + LineIndex::escape(key), *index_, *origin_};
  }

  const nlohmann::json* j_;
  std::string pointer_;
  const LineIndex* index_;
  const std::string* origin_;
};

inline MarginalModel parse_marginal(const ConfigNode& n) {
  const std::string kind = n.at("kind").string();
  if (kind == "exponential") {
    n.only({"kind", "rate"});
    return n.guard([&] { return MarginalModel::exponential(n.at("rate").number()); });
  }
  if (kind == "pareto") {
    n.only({"kind", "scale", "shape"});
    return n.guard([&] { return MarginalModel::pareto(n.at("scale").number(), n.at("shape").number()); });
  }
  if (kind == "empirical") {
    n.only({"kind", "sample"});
    return n.guard([&] { return MarginalModel::empirical(n.at("sample").numbers()); });
  }
  n.at("kind").fail("unknown marginal kind '" + kind + "' (exponential, pareto, empirical)");
}

inline PremiumPrinciple parse_premium(const ConfigNode& n) {
  const std::string kind = n.at("kind").string();
  n.only({"kind", "theta"});
  const ConfigNode theta = n.at("theta");
  const double t = theta.number();
  if (kind == "expected_value") return theta.guard([&] { return PremiumPrinciple::expected_value(t); });
  if (kind == "std_dev") return theta.guard([&] { return PremiumPrinciple::std_dev(t); });
  if (kind == "variance") return theta.guard([&] { return PremiumPrinciple::variance(t); });
  n.at("kind").fail("unknown premium kind '" + kind + "' (expected_value, std_dev, variance)");
}

/// Checkerboard from copula values on the (G+1)^2 grid or from G^2 cell
/// masses summing to one.
inline CopulaModel parse_checkerboard(const ConfigNode& n) {
  n.only({"kind", "grid", "masses"});
  if (n.has("grid") == n.has("masses")) n.fail("checkerboard needs exactly one of 'grid' or 'masses'");
  const ConfigNode rows = n.has("grid") ? n.at("grid") : n.at("masses");
  const std::size_t side = rows.array_size();
  std::vector<double> values;
  for (std::size_t a = 0; a < side; ++a) {
    const auto row = rows.at(a).numbers();
    if (row.size() != side) rows.at(a).fail("checkerboard rows must all have " + std::to_string(side) + " entries");
    values.insert(values.end(), row.begin(), row.end());
  }
  if (n.has("masses")) {
    // C(a, b) = sum of the masses of cells below and left of grid point (a, b).
    std::vector<double> grid((side + 1) * (side + 1), 0.0);
    for (std::size_t a = 1; a <= side; ++a)
      for (std::size_t b = 1; b <= side; ++b)
        grid[a * (side + 1) + b] = values[(a - 1) * side + (b - 1)] + grid[(a - 1) * (side + 1) + b] +
                                   grid[a * (side + 1) + b - 1] - grid[(a - 1) * (side + 1) + b - 1];
    values = std::move(grid);
  }
  return rows.guard([&] { return CopulaModel::checkerboard(values, 1e-9); });
}

inline CopulaModel parse_copula(const ConfigNode& n) {
  const std::string kind = n.at("kind").string();
  if (kind == "independence") {
    n.only({"kind"});
    return CopulaModel::independence();
  }
  if (kind == "frank" || kind == "fgm") {
    n.only({"kind", "alpha"});
    const ConfigNode a = n.at("alpha");
    return a.guard([&] { return kind == "frank" ? CopulaModel::frank(a.number()) : CopulaModel::fgm(a.number()); });
  }
  if (kind == "checkerboard") return parse_checkerboard(n);
  n.at("kind").fail("unknown copula kind '" + kind + "' (independence, frank, fgm, checkerboard)");
}

inline UtilityModel parse_utility(const ConfigNode& n) {
  const std::string kind = n.at("kind").string();
  if (kind != "exponential") n.at("kind").fail("unknown utility kind '" + kind + "' (exponential)");
  n.only({"kind", "R"});
  const ConfigNode r = n.at("R");
  return r.guard([&] { return UtilityModel::exponential(r.number()); });
}

inline SolverConfig parse_solver(const ConfigNode& n) {
  n.only({"barrier_eps", "barrier_alpha", "newton_tol", "newton_max_iter", "newton_damping", "newton_max_halvings",
          "fallback_max_iter", "outer_tol", "outer_ceded_tol", "outer_max_cycles", "root_tol", "init",
          "treaty_knots", "treaty_upper_prob", "treaty_refine_tol", "treaty_refine_levels"});
  SolverConfig c;
  auto num = [&](const char* key, double& field) {
    if (n.has(key)) field = n.at(key).number();
  };
  auto integer = [&](const char* key, int& field) {
    if (n.has(key)) field = static_cast<int>(n.at(key).integer());
  };
  if (n.has("barrier_eps")) c.barrier_eps = n.at("barrier_eps").numbers();
  num("barrier_alpha", c.barrier_alpha);
  num("newton_tol", c.newton_tol);
  integer("newton_max_iter", c.newton_max_iter);
  num("newton_damping", c.newton_damping);
  integer("newton_max_halvings", c.newton_max_halvings);
  integer("fallback_max_iter", c.fallback_max_iter);
  num("outer_tol", c.outer_tol);
  num("outer_ceded_tol", c.outer_ceded_tol);
  integer("outer_max_cycles", c.outer_max_cycles);
  num("root_tol", c.root_tol);
  if (n.has("init")) {
    const auto v = n.at("init").string();
    if (v == "full") c.init = Initialization::Full;
    else if (v == "stop_loss_median") c.init = Initialization::StopLossMedian;
    else n.at("init").fail("unknown init '" + v + "' (full, stop_loss_median)");
  }
  integer("treaty_knots", c.treaty_knots);
  num("treaty_upper_prob", c.treaty_upper_prob);
  num("treaty_refine_tol", c.treaty_refine_tol);
  integer("treaty_refine_levels", c.treaty_refine_levels);
  n.guard([&] {
    c.validate();
    return 0;
  });
  return c;
}

inline QuadratureSpec parse_quadrature(const ConfigNode& n) {
  n.only({"mesh_points", "panel_order", "mc_samples", "rng_seed", "truncation_prob", "monte_carlo"});
  QuadratureSpec q;
  if (n.has("mesh_points")) q.mesh_points = static_cast<int>(n.at("mesh_points").integer());
  if (n.has("panel_order")) q.panel_order = static_cast<int>(n.at("panel_order").integer());
  if (n.has("mc_samples")) q.mc_samples = static_cast<int>(n.at("mc_samples").integer());
  if (n.has("rng_seed")) {
    const auto s = n.at("rng_seed").integer();
    if (s < 0) n.at("rng_seed").fail("seed must be >= 0");
    q.rng_seed = static_cast<std::uint64_t>(s);
  }
  if (n.has("truncation_prob")) q.truncation_prob = n.at("truncation_prob").number();
  if (n.has("monte_carlo")) q.monte_carlo = n.at("monte_carlo").boolean();
  n.guard([&] {
    q.validate();
    return 0;
  });
  return q;
}

} // namespace detail

/// Default risk aversion and premium income when a config omits them.
inline constexpr double kDefaultRiskAversion = 1.0;
inline constexpr double kDefaultIncome = 4.0;

/// Parses an experiment from JSON text. `origin` prefixes diagnostics.
inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(end), '\n');
    throw ConfigError(origin + ":" + std::to_string(line) + ": malformed JSON: " + e.what());
  }
  const LineIndex index(text);
  const detail::ConfigNode root(doc, "", index, origin);
  root.only({"name", "risks", "copula", "utility", "c", "solver", "quadrature", "outputs"});

  ExperimentConfig cfg;
  cfg.origin = origin;
  cfg.name = root.has("name") ? root.at("name").string() : std::filesystem::path(origin).stem().string();
  const auto risks = root.at("risks");
  if (risks.array_size() == 0) risks.fail("at least one risk is required");
  for (std::size_t i = 0; i < risks.array_size(); ++i) {
    const auto r = risks.at(i);
    r.only({"marginal", "premium"});
    cfg.model.marginals.push_back(detail::parse_marginal(r.at("marginal")));
    cfg.model.principles.push_back(detail::parse_premium(r.at("premium")));
  }
  if (root.has("copula")) cfg.model.copula = detail::parse_copula(root.at("copula"));
  cfg.model.utility = root.has("utility") ? detail::parse_utility(root.at("utility"))
                                          : UtilityModel::exponential(kDefaultRiskAversion);
  cfg.model.income = root.has("c") ? root.at("c").number() : kDefaultIncome;
  if (root.has("solver")) cfg.solver = detail::parse_solver(root.at("solver"));
  if (root.has("quadrature")) cfg.quadrature = detail::parse_quadrature(root.at("quadrature"));
  if (root.has("outputs")) cfg.outputs = root.at("outputs").string();
  root.guard([&] {
    cfg.model.validate();
    return 0;
  });
  cfg.document = std::move(doc);
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str(), path.string());
}

/// Same experiment with the document edited by `edit`, re-validated.
template <class Edit>
ExperimentConfig variant_of(const ExperimentConfig& base, const std::string& suffix, Edit&& edit) {
  nlohmann::json doc = base.document;
  edit(doc);
  doc["name"] = base.name + suffix;
  return parse_config(doc.dump(2), base.origin + " [" + suffix + "]");
}

} // namespace retrocede
