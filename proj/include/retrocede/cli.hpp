#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "retrocede/config.hpp"
#include "retrocede/error.hpp"
#include "retrocede/solver.hpp"
#include "retrocede/treaty.hpp"
#include "retrocede/verify.hpp"

namespace retrocede {

namespace fs = std::filesystem;

/// Process exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  /// `verify` found a violation above the tolerance.
  kExitViolation = 1,
  kExitStall = 2,
  kExitConfig = 3,
  /// Integrability, quadrature or other numerical failure.
  kExitNumeric = 4,
};

/// Residual tolerance relative to E U'(L) used by run and verify.
inline constexpr double kResidualTolerance = 1e-4;
/// Per-cycle utility may dip by this much and still count as monotone.
inline constexpr double kMonotoneSlack = 1e-9;

inline int exit_code_of(const std::exception& e) {
  if (dynamic_cast<const SolverStall*>(&e)) return kExitStall;
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  return kExitNumeric;
}

inline const char* status_name(int code) {
  switch (code) {
  case kExitOk: return "converged";
  case kExitViolation: return "violation";
  case kExitStall: return "stall";
  case kExitConfig: return "config_error";
  default: return "numeric_error";
  }
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

struct Series {
  std::string label;
  std::vector<double> x, y;
};

/// Standalone SVG line chart with linear axes.
inline std::string svg_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                             const std::vector<Series>& series) {
  constexpr double W = 640, H = 420, L = 70, R = 150, T = 40, B = 50;
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  bool first = true;
  for (const auto& s : series)
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.x[k]) || !std::isfinite(s.y[k])) continue;
      if (first) {
        x0 = x1 = s.x[k];
        y0 = y1 = s.y[k];
        first = false;
      }
      x0 = std::min(x0, s.x[k]);
      x1 = std::max(x1, s.x[k]);
      y0 = std::min(y0, s.y[k]);
      y1 = std::max(y1, s.y[k]);
    }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << format_number(xv)
       << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << format_number(yv)
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < series[s].x.size(); ++k)
      if (std::isfinite(series[s].y[k]))
        os << format_number(px(series[s].x[k])) << "," << format_number(py(series[s].y[k])) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * s + 10 << "\" fill=\"" << color << "\">"
       << series[s].label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Reads a treaty CSV with header `x,ceded,retained` into a curve.
inline TreatyCurve read_treaty_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("x,ceded", 0) != 0) throw ConfigError(path.string() + ": expected header x,ceded,retained");
  std::vector<double> x, z;
  for (int row = 2; std::getline(in, line); ++row) {
    if (line.empty()) continue;
    double a = 0, b = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf", &a, &b) != 2)
      throw ConfigError(path.string() + ":" + std::to_string(row) + ": malformed row");
    x.push_back(a);
    z.push_back(b);
  }
  try {
    return TreatyCurve::piecewise(std::move(x), std::move(z));
  } catch (const DomainError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_curve_csv(const fs::path& path, const TreatyCurve& t) {
  std::ostringstream os;
  write_treaty_csv(os, t, t.knots());
  write_text(path, os.str());
}

inline void write_residual_csv(const fs::path& path, const RiskResidual& r) {
  std::ostringstream os;
  os << "x,ceded,side,lhs,rhs,violation\n";
  for (std::size_t k = 0; k < r.x.size(); ++k)
    os << format_number(r.x[k]) << "," << format_number(r.ceded[k]) << "," << side_name(r.side[k]) << ","
       << format_number(r.lhs[k]) << "," << format_number(r.rhs[k]) << "," << format_number(r.violation[k]) << "\n";
  write_text(path, os.str());
}

inline nlohmann::json residual_json(const ResidualReport& rep) {
  nlohmann::json j;
  j["m0"] = rep.m0;
  j["max_violation"] = rep.max_violation;
  j["relative_violation"] = rep.max_violation / rep.m0;
  j["tolerance"] = kResidualTolerance;
  j["risks"] = nlohmann::json::array();
  for (const auto& r : rep.risks) {
    std::size_t counts[3] = {0, 0, 0};
    for (auto s : r.side) ++counts[static_cast<int>(s)];
    j["risks"].push_back({{"max_violation", r.max_violation},
                          {"points", r.x.size()},
                          {"at_zero", counts[0]},
                          {"interior", counts[1]},
                          {"at_x", counts[2]}});
  }
  return j;
}

inline nlohmann::json model_json(const ExperimentConfig& cfg) {
  nlohmann::json risks = nlohmann::json::array();
  for (std::size_t i = 0; i < cfg.model.size(); ++i)
    risks.push_back({{"marginal", cfg.model.marginals[i].name()}, {"premium", cfg.model.principles[i].name()}});
  return {{"risks", risks},
          {"copula", cfg.model.copula.name()},
          {"utility", cfg.model.utility.name()},
          {"c", cfg.model.income}};
}

inline nlohmann::json cycles_json(const std::vector<CycleRecord>& cycles) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : cycles) {
    nlohmann::json fallback = nlohmann::json::array();
    for (bool b : c.used_fallback) fallback.push_back(b);
    nlohmann::json rho = nlohmann::json::array();
    for (double r : c.spectral_radius) rho.push_back(std::isfinite(r) ? nlohmann::json(r) : nlohmann::json());
    out.push_back({{"cycle", c.cycle},
                   {"expected_utility", c.expected_utility},
                   {"m0", c.m0},
                   {"premiums", c.premiums},
                   {"newton_iterations", c.newton_iterations},
                   {"fixed_point_residual", c.fixed_point_residual},
                   {"spectral_radius", rho},
                   {"used_fallback", fallback},
                   {"max_ceded_change", c.max_ceded_change}});
  }
  return out;
}

inline bool monotone(const std::vector<CycleRecord>& cycles, double slack = kMonotoneSlack) {
  for (std::size_t k = 1; k < cycles.size(); ++k)
    if (cycles[k].expected_utility < cycles[k - 1].expected_utility - slack) return false;
  return true;
}

/// Summary of one run, as listed in suite tables.
struct RunOutcome {
  std::string name;
  int exit_code = kExitOk;
  std::string message;
  double expected_utility = std::nan("");
  double relative_violation = std::nan("");
  int cycles = 0;
  bool monotone = false;
  /// Converged curves, empty on failure.
  std::vector<TreatyCurve> treaties;
};

struct RunOptions {
  bool compare_independence = false;
  bool plots = true;
};

inline nlohmann::json outcome_json(const RunOutcome& o) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  return {{"name", o.name},
          {"status", status_name(o.exit_code)},
          {"exit_code", o.exit_code},
          {"message", o.message},
          {"expected_utility", num(o.expected_utility)},
          {"relative_violation", num(o.relative_violation)},
          {"cycles", o.cycles},
          {"monotone", o.monotone}};
}

/// Treaty grid of every risk, where residuals are evaluated.
inline std::vector<std::vector<double>> residual_grids(const ExperimentConfig& cfg) {
  std::vector<std::vector<double>> g;
  for (const auto& m : cfg.model.marginals)
    g.push_back(treaty_grid(m, cfg.solver.treaty_knots, cfg.solver.treaty_upper_prob));
  return g;
}

namespace detail {

inline RunOutcome run_single(const ExperimentConfig& cfg, const fs::path& out, bool plots) {
  using clock = std::chrono::steady_clock;
  fs::create_directories(out);
  RunOutcome o;
  o.name = cfg.name;
  nlohmann::json report;
  report["name"] = cfg.name;
  report["seed"] = cfg.quadrature.rng_seed;
  report["model"] = model_json(cfg);
  nlohmann::json timing;
  const auto t0 = clock::now();
  try {
    const auto res = optimize(cfg.model, cfg.solver, cfg.quadrature);
    const auto t1 = clock::now();
    const auto rep = optimality_residual(cfg.model, res.strategy, cfg.quadrature, residual_grids(cfg));
    const auto t2 = clock::now();
    o.expected_utility = expected_utility(cfg.model, res.strategy, cfg.quadrature);
    o.relative_violation = rep.max_violation / rep.m0;
    o.cycles = static_cast<int>(res.discrete.cycles.size()) - 1;
    o.monotone = monotone(res.discrete.cycles);
    o.treaties = res.strategy.treaties();
    report["cycles"] = cycles_json(res.discrete.cycles);
    report["monotone"] = o.monotone;
    report["expected_utility"] = o.expected_utility;
    report["expected_utility_discrete"] = res.discrete.expected_utility;
    nlohmann::json risks = nlohmann::json::array();
    for (std::size_t i = 0; i < cfg.model.size(); ++i) {
      const auto& t = res.strategy.treaty(i);
      risks.push_back({{"premium", res.strategy.premiums()[i]},
                       {"moments", res.strategy.ceded_moments()[i]},
                       {"knots", t.knots().size()}});
      const std::string tag = std::to_string(i + 1);
      write_curve_csv(out / ("treaty_" + tag + ".csv"), t);
      write_residual_csv(out / ("residuals_" + tag + ".csv"), rep.risks[i]);
      if (plots) {
        Series ceded{"ceded", rep.risks[i].x, rep.risks[i].ceded}, retained{"retained", rep.risks[i].x, {}};
        for (std::size_t k = 0; k < ceded.x.size(); ++k) retained.y.push_back(ceded.x[k] - ceded.y[k]);
        write_text(out / ("treaty_" + tag + ".svg"),
                   svg_chart(cfg.name + ": risk " + tag, "claim x", "amount", {ceded, retained}));
      }
    }
    report["risks"] = risks;
    report["residual"] = residual_json(rep);
    timing["optimize_seconds"] = std::chrono::duration<double>(t1 - t0).count();
    timing["verify_seconds"] = std::chrono::duration<double>(t2 - t1).count();
  } catch (const std::exception& e) {
    o.exit_code = exit_code_of(e);
    o.message = e.what();
  }
  timing["total_seconds"] = std::chrono::duration<double>(clock::now() - t0).count();
  report["status"] = status_name(o.exit_code);
  if (!o.message.empty()) report["error"] = o.message;
  write_json(out / "report.json", report);
  write_json(out / "timing.json", timing);
  return o;
}

} // namespace detail

/// Runs one experiment into `out`: treaty_<i>.csv (every curve knot),
/// residuals_<i>.csv, report.json, timing.json and treaty_<i>.svg. With
/// compare_independence the same market is rerun under independence into
/// out/independence and delta_<i>.csv holds the difference of the curves on
/// the treaty grid.
inline RunOutcome run_experiment(const ExperimentConfig& cfg, const fs::path& out, const RunOptions& opt = {}) {
  RunOutcome o = detail::run_single(cfg, out, opt.plots);
  if (!opt.compare_independence || o.exit_code != kExitOk) return o;
  const auto base = variant_of(cfg, "_independence",
                               [](nlohmann::json& d) { d["copula"] = {{"kind", "independence"}}; });
  const RunOutcome ind = detail::run_single(base, out / "independence", opt.plots);
  if (ind.exit_code != kExitOk) {
    o.exit_code = ind.exit_code;
    o.message = "independence baseline: " + ind.message;
    return o;
  }
  for (std::size_t i = 0; i < cfg.model.size(); ++i) {
    std::ostringstream os;
    os << "x,ceded,ceded_independence,delta\n";
    for (double x : treaty_grid(cfg.model.marginals[i], cfg.solver.treaty_knots, cfg.solver.treaty_upper_prob)) {
      const double a = o.treaties[i].eval(x), b = ind.treaties[i].eval(x);
      os << format_number(x) << "," << format_number(a) << "," << format_number(b) << "," << format_number(a - b)
         << "\n";
    }
    write_text(out / ("delta_" + std::to_string(i + 1) + ".csv"), os.str());
  }
  return o;
}

/// Parses `R=0.5,1,2` into risk-aversion values.
inline std::vector<double> parse_scan(const std::string& spec) {
  if (spec.rfind("R=", 0) != 0) throw ConfigError("--scan expects R=v1,v2,..., got '" + spec + "'");
  std::vector<double> out;
  std::stringstream ss(spec.substr(2));
  for (std::string item; std::getline(ss, item, ',');) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || *end != '\0' || !(v > 0.0)) throw ConfigError("--scan value '" + item + "' is not a positive number");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--scan needs at least one value");
  return out;
}

/// One run per risk aversion into out/R_<value>, plus scan.json; returns the
/// worst exit code.
inline int run_scan(const ExperimentConfig& cfg, const fs::path& out, const std::vector<double>& values,
                    const RunOptions& opt = {}) {
  nlohmann::json summary = nlohmann::json::array();
  int worst = kExitOk;
  for (double r : values) {
    const std::string tag = "R_" + format_number(r);
    const auto v = variant_of(cfg, "_" + tag, [&](nlohmann::json& d) { d["utility"] = {{"kind", "exponential"}, {"R", r}}; });
    const auto o = run_experiment(v, out / tag, opt);
    auto j = outcome_json(o);
    j["R"] = r;
    summary.push_back(j);
    worst = std::max(worst, o.exit_code);
  }
  fs::create_directories(out);
  write_json(out / "scan.json", summary);
  return worst;
}

struct SuiteEntry {
  fs::path config;
  std::string outputs;
  bool compare_independence = false;
};

struct Suite {
  std::string name;
  fs::path outputs;
  std::vector<SuiteEntry> runs;
};

/// Suite file: {"name", "outputs", "runs": [path | {"config", "outputs",
/// "compare_independence"}]}. Paths are relative to the suite file.
inline Suite load_suite(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open suite");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const std::string origin = path.string();
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin + ": malformed JSON: " + e.what());
  }
  const LineIndex index(text);
  const detail::ConfigNode root(doc, "", index, origin);
  root.only({"name", "outputs", "runs"});
  Suite s;
  s.name = root.has("name") ? root.at("name").string() : path.stem().string();
  const fs::path dir = path.parent_path();
  s.outputs = root.has("outputs") ? fs::path(root.at("outputs").string()) : fs::path("out") / s.name;
  const auto runs = root.at("runs");
  if (runs.array_size() == 0) runs.fail("suite lists no runs");
  for (std::size_t k = 0; k < runs.array_size(); ++k) {
    const auto r = runs.at(k);
    SuiteEntry e;
    if (r.json().is_string()) {
      e.config = dir / r.string();
    } else {
      r.only({"config", "outputs", "compare_independence"});
      e.config = dir / r.at("config").string();
      if (r.has("outputs")) e.outputs = r.at("outputs").string();
      if (r.has("compare_independence")) e.compare_independence = r.at("compare_independence").boolean();
    }
    s.runs.push_back(std::move(e));
  }
  return s;
}

/// Runs every entry into outputs/<run name>, writes summary.json and
/// summary.csv, and returns the worst exit code.
inline int run_suite(const Suite& suite, const fs::path& outputs, const RunOptions& opt = {}) {
  fs::create_directories(outputs);
  nlohmann::json runs = nlohmann::json::array();
  std::ostringstream csv;
  csv << "name,status,exit_code,expected_utility,relative_violation,cycles,monotone\n";
  int worst = kExitOk;
  for (const auto& e : suite.runs) {
    RunOutcome o;
    try {
      const auto cfg = load_config(e.config);
      o.name = cfg.name;
      RunOptions ro = opt;
      ro.compare_independence = ro.compare_independence || e.compare_independence;
      o = run_experiment(cfg, outputs / (e.outputs.empty() ? cfg.name : e.outputs), ro);
    } catch (const std::exception& ex) {
      if (o.name.empty()) o.name = e.config.stem().string();
      o.exit_code = exit_code_of(ex);
      o.message = ex.what();
    }
    auto j = outcome_json(o);
    j["config"] = e.config.filename().string();
    runs.push_back(j);
    csv << o.name << "," << status_name(o.exit_code) << "," << o.exit_code << ","
        << format_number(o.expected_utility) << "," << format_number(o.relative_violation) << "," << o.cycles << ","
        << (o.monotone ? "true" : "false") << "\n";
    worst = std::max(worst, o.exit_code);
  }
  write_json(outputs / "summary.json", {{"name", suite.name}, {"runs", runs}, {"worst_exit_code", worst}});
  write_text(outputs / "summary.csv", csv.str());
  return worst;
}

/// Recomputes the optimality residuals of stored treaty_<i>.csv files.
inline ResidualReport verify_outputs(const ExperimentConfig& cfg, const fs::path& dir) {
  std::vector<TreatyCurve> curves;
  for (std::size_t i = 0; i < cfg.model.size(); ++i)
    curves.push_back(read_treaty_csv(dir / ("treaty_" + std::to_string(i + 1) + ".csv")));
  const auto s = Strategy::build(cfg.model, std::move(curves), cfg.quadrature);
  return optimality_residual(cfg.model, s, cfg.quadrature, residual_grids(cfg));
}

} // namespace retrocede
