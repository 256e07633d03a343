// Command-line experiment runner. Exit codes: 0 converged, 1 verify found a
// residual above tolerance, 2 solver stall, 3 config error, 4 numerical error.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "retrocede/cli.hpp"

namespace {

using namespace retrocede;

fs::path output_dir(const std::string& flag, const ExperimentConfig& cfg) {
  if (!flag.empty()) return flag;
  if (!cfg.outputs.empty()) return cfg.outputs;
  return fs::path("out") / cfg.name;
}

int report(const RunOutcome& o, const fs::path& out) {
  if (o.exit_code == kExitOk)
    std::cout << o.name << ": converged in " << o.cycles << " cycles, E U = " << format_number(o.expected_utility)
              << ", residual/m0 = " << format_number(o.relative_violation) << ", outputs in " << out.string() << "\n";
  else
    std::cerr << o.name << ": " << status_name(o.exit_code) << ": " << o.message << "\n";
  return o.exit_code;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimal reinsurance treaties for dependent risks"};
  app.require_subcommand(1);

  std::string config_path, out_flag, scan, suite_path, treaty_dir;
  bool compare = false, no_plots = false;

  auto* run = app.add_subcommand("run", "Optimize one experiment config");
  run->add_option("config", config_path, "Experiment JSON")->required();
  run->add_option("--out", out_flag, "Output directory (default: config 'outputs' or out/<name>)");
  run->add_flag("--compare-independence", compare, "Also solve under independence and write delta_<i>.csv");
  run->add_option("--scan", scan, "Risk-aversion sweep, e.g. R=0.5,1,2");
  run->add_flag("--no-plots", no_plots, "Skip SVG output");

  auto* suite = app.add_subcommand("suite", "Run every config listed in a suite file");
  suite->add_option("suite", suite_path, "Suite JSON")->required();
  suite->add_option("--out", out_flag, "Output directory (default: suite 'outputs')");
  suite->add_flag("--no-plots", no_plots, "Skip SVG output");

  auto* verify = app.add_subcommand("verify", "Recompute optimality residuals of stored treaties");
  verify->add_option("config", config_path, "Experiment JSON")->required();
  verify->add_option("treaty_dir", treaty_dir, "Directory holding treaty_<i>.csv")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    RunOptions opt;
    opt.compare_independence = compare;
    opt.plots = !no_plots;
    if (*run) {
      const auto cfg = load_config(config_path);
      const fs::path out = output_dir(out_flag, cfg);
      if (!scan.empty()) {
        const int code = run_scan(cfg, out, parse_scan(scan), opt);
        std::cout << "scan written to " << (out / "scan.json").string() << " (worst status "
                  << status_name(code) << ")\n";
        return code;
      }
      return report(run_experiment(cfg, out, opt), out);
    }
    if (*suite) {
      const auto s = load_suite(suite_path);
      const fs::path out = out_flag.empty() ? s.outputs : fs::path(out_flag);
      const int code = run_suite(s, out, opt);
      std::cout << s.name << ": " << s.runs.size() << " runs, worst status " << status_name(code) << ", summary in "
                << (out / "summary.json").string() << "\n";
      return code;
    }
    const auto cfg = load_config(config_path);
    const auto rep = verify_outputs(cfg, treaty_dir);
    std::cout << residual_json(rep).dump(2) << "\n";
    return rep.max_violation <= kResidualTolerance * rep.m0 ? kExitOk : kExitViolation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_of(e);
  }
}
