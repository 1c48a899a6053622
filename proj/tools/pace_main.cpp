// pace: simulate | fit | benchmark | verify
//
// Exit codes: 0 success, 1 failed checks or estimation errors, 2 usage or
// configuration errors. Output goes to --out, else $PACE_OUTPUT_DIR, else
// ./pace_out.

#include "pace/benchmark.hpp"
#include "pace/config.hpp"
#include "pace/debias.hpp"
#include "pace/error.hpp"
#include "pace/synthetic.hpp"
#include "pace/verify.hpp"
#include "pace/version.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pace;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

class Stopwatch {
 public:
  explicit Stopwatch(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return enabled_ ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count() : 0.0;
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

fs::path output_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("PACE_OUTPUT_DIR"); env && *env) return env;
  return "pace_out";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Output paths relative to the manifest so manifests do not depend on where
// the run was written.
std::vector<std::string> path_strings(const std::vector<fs::path>& ps) {
  std::vector<std::string> out;
  for (const auto& p : ps) out.push_back(p.filename().string());
  return out;
}

json manifest(const std::string& command, json config, const std::vector<fs::path>& outputs, json extra) {
  json m = {{"command", command},
            {"version", kVersion},
            {"config", std::move(config)},
            {"outputs", path_strings(outputs)}};
  for (auto& [k, v] : extra.items()) m[k] = v;
  return m;
}

// --- simulate --------------------------------------------------------------------

struct SimulateArgs {
  std::string config;
  std::string out;
  bool no_timing = false;
};

int run_simulate(const SimulateArgs& a) {
  Stopwatch clock(!a.no_timing);
  const SimulateConfig cfg = load_simulate_config(a.config);
  std::optional<Panel> base;
  if (cfg.baseline) base = load_panel_csv(*cfg.baseline);
  const Instance inst = generate_instance(cfg.generator, base ? &*base : nullptr);

  const fs::path dir = output_dir(a.out);
  fs::create_directories(dir);
  std::vector<fs::path> outputs;
  const CsvPanelPaths written = write_panel_csv(inst.panel, dir, "panel");
  outputs.push_back(written.outcomes);
  outputs.insert(outputs.end(), written.covariates.begin(), written.covariates.end());
  outputs.insert(outputs.end(), written.treatments.begin(), written.treatments.end());

  auto truth_file = [&](const std::string& name, const Matrix& m) {
    const fs::path p = dir / ("truth_" + name + ".csv");
    write_long_csv(p, m, inst.panel.unit_ids, inst.panel.time_ids);
    outputs.push_back(p);
  };
  truth_file("baseline", inst.truth.baseline);
  for (std::size_t i = 0; i < inst.truth.effect.size(); ++i) truth_file("effect_" + std::to_string(i), inst.truth.effect[i]);
  if (inst.truth.low_rank) truth_file("low_rank", *inst.truth.low_rank);
  if (inst.truth.noise) truth_file("noise", *inst.truth.noise);

  const fs::path mpath = dir / "manifest.json";
  outputs.push_back(mpath);
  write_json(mpath, manifest("simulate", cfg.generator.to_json(), outputs,
                             {{"seed", cfg.generator.seed},
                              {"effect", inst.spec.to_json()},
                              {"effect_scale", inst.effect_scale},
                              {"panel", panel_metadata_json(inst.panel)},
                              {"wall_time", clock.seconds()}}));
  std::cout << "wrote instance (" << inst.panel.units() << " x " << inst.panel.periods() << ") to " << dir.string() << "\n";
  return 0;
}

// --- fit ---------------------------------------------------------------------------

struct FitArgs {
  std::string outcomes;
  std::vector<std::string> covariates;
  std::vector<std::string> treatments;
  int leaves = 40;
  int rank = 6;
  double alpha_reg = 0.1;
  std::optional<double> fair_split_pi;
  int min_treated = 1;
  bool time_covariate = false;
  std::string out;
  bool no_timing = false;
};

int run_fit(const FitArgs& a) {
  Stopwatch clock(!a.no_timing);
  CsvPanelPaths paths;
  paths.outcomes = a.outcomes;
  for (const auto& c : a.covariates) paths.covariates.emplace_back(c);
  for (const auto& t : a.treatments) paths.treatments.emplace_back(t);
  Panel panel = load_panel_csv(paths);
  if (a.time_covariate) panel = append_time_covariate(panel);

  EstimateOptions opt;
  opt.build.max_leaves = a.leaves;
  opt.build.target_rank = a.rank;
  opt.build.constraints.alpha = a.alpha_reg;
  opt.build.constraints.min_treated_per_side = a.min_treated;
  opt.build.constraints.fair_split_pi = a.fair_split_pi;
  try {
    opt.build.constraints.check();
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, e.what());
  }
  const EffectEstimate est = estimate_effects(panel, opt);

  const fs::path dir = output_dir(a.out);
  fs::create_directories(dir);
  std::vector<fs::path> outputs;
  json estimate = est.to_json();
  estimate["kkt"] = kkt_residuals(est.solution, panel.outcomes, est.masks.basis()).to_json();
  outputs.push_back(dir / "estimate.json");
  write_json(outputs.back(), estimate);
  for (std::size_t i = 0; i < panel.num_treatments(); ++i) {
    outputs.push_back(dir / ("effect_" + std::to_string(i) + ".csv"));
    write_long_csv(outputs.back(), effect_matrix(est, i), panel.unit_ids, panel.time_ids);
  }
  outputs.push_back(dir / "tree.txt");
  write_text(outputs.back(), forest_to_text(est.forest));
  outputs.push_back(dir / "trace.csv");
  write_trace_csv(outputs.back(), est.trace);

  json config = {{"outcomes", a.outcomes},
                 {"covariates", a.covariates},
                 {"treatments", a.treatments},
                 {"leaves", a.leaves},
                 {"rank", a.rank},
                 {"time_covariate", a.time_covariate},
                 {"constraints", opt.build.constraints.to_json()},
                 {"solver", opt.build.solver.to_json()}};
  outputs.push_back(dir / "manifest.json");
  write_json(outputs.back(), manifest("fit", config, outputs,
                                      {{"solver", {{"lambda", est.solution.lambda},
                                                   {"rank", est.solution.rank()},
                                                   {"iterations", est.solution.iterations},
                                                   {"converged", est.solution.converged}}},
                                       {"wall_time", clock.seconds()}}));
  std::cout << forest_to_text(est.forest);
  for (const auto& [key, tau] : est.tau_d_by_leaf) {
    std::cout << "treatment " << key.first << " leaf " << key.second << ": tau_d = " << tau << "\n";
  }
  return 0;
}

// --- benchmark ------------------------------------------------------------------------

struct BenchmarkArgs {
  std::string config;
  bool paper_grid = false;
  int jobs = 1;
  int instances = 0;
  std::string methods;
  std::string external;
  std::string out;
  bool no_timing = false;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int run_benchmark_cmd(const BenchmarkArgs& a, bool methods_given) {
  Stopwatch clock(!a.no_timing);
  BenchmarkConfig cfg;
  if (!a.config.empty()) {
    cfg = load_benchmark_config(a.config);
  } else {
    cfg.grid.fully_synthetic = FullySyntheticConfig{};
  }
  if (a.paper_grid) {
    const BenchmarkGrid paper = BenchmarkGrid::paper();
    cfg.grid.alphas = paper.alphas;
    cfg.grid.adaptive = paper.adaptive;
    cfg.grid.effect_ops = paper.effect_ops;
    cfg.grid.instances_per_cell = paper.instances_per_cell;
  }
  if (a.instances > 0) cfg.grid.instances_per_cell = a.instances;
  if (methods_given) cfg.grid.methods = split_list(a.methods);
  if (!a.external.empty()) cfg.external = a.external;
  cfg.grid.check();

  std::optional<Panel> base;
  if (cfg.baseline) base = load_panel_csv(*cfg.baseline);
  BenchmarkOptions opt;
  opt.jobs = a.jobs;
  opt.timing = !a.no_timing;
  opt.baseline = base ? &*base : nullptr;
  std::vector<BenchmarkRecord> records = run_benchmark(cfg.grid, opt);
  std::size_t dropped = 0;
  if (cfg.external) dropped = merge_external(records, read_results_csv(*cfg.external));

  const fs::path dir = output_dir(a.out);
  fs::create_directories(dir);
  std::vector<fs::path> outputs{dir / "results.csv", dir / "aggregate.json", dir / "manifest.json"};
  write_results_csv(outputs[0], records);
  json agg = aggregate(records);
  if (cfg.external) agg["external_rows_dropped"] = dropped;
  write_json(outputs[1], agg);
  std::size_t failures = 0;
  for (const auto& r : records) failures += r.error.empty() ? 0 : 1;
  write_json(outputs[2], manifest("benchmark", cfg.grid.to_json(), outputs,
                                  {{"seed", cfg.grid.master_seed},
                                   {"records", records.size()},
                                   {"failed_records", failures},
                                   {"wall_time", clock.seconds()}}));
  std::cout << records.size() << " records (" << failures << " failed) written to " << dir.string() << "\n";
  return 0;
}

// --- verify ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string suite = "all";
  int jobs = 1;
  std::string out;
};

int run_verify_cmd(const VerifyArgs& a) {
  const auto start = std::chrono::steady_clock::now();
  const VerifyReport report = run_verify(a.suite, a.jobs);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const fs::path dir = output_dir(a.out);
  fs::create_directories(dir);
  json j = report.to_json();
  j["seconds"] = seconds;
  write_json(dir / "verify_report.json", j);
  std::cout << report.summary_table();
  if (a.suite == "all" && seconds > 15 * 60) {
    std::cerr << "warning: verify took " << seconds << " s (budget 900 s)\n";
  }
  if (!report.passed()) {
    std::cerr << "failing checks:";
    for (const auto& name : report.failing_checks()) std::cerr << ' ' << name;
    std::cerr << "\n";
    return kExitFailure;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Panel clustering estimator for heterogeneous treatment effects"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic or semi-synthetic instance");
  simulate->add_option("--config", sim.config, "JSON config file")->required()->check(CLI::ExistingFile);
  simulate->add_option("--out", sim.out, "Output directory");
  simulate->add_flag("--no-timing", sim.no_timing, "Write zero wall times");

  FitArgs fit;
  auto* fitc = app.add_subcommand("fit", "Estimate heterogeneous effects on a panel");
  fitc->add_option("--outcomes", fit.outcomes, "unit,time,value CSV")->required()->check(CLI::ExistingFile);
  fitc->add_option("--covariates", fit.covariates, "Covariate CSV(s)")->required()->check(CLI::ExistingFile);
  fitc->add_option("--treatments", fit.treatments, "Treatment mask CSV(s)")->required()->check(CLI::ExistingFile);
  fitc->add_option("--leaves", fit.leaves, "Maximum leaves per tree")->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--rank", fit.rank, "Target rank for lambda tuning")->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_option("--alpha-reg", fit.alpha_reg, "Minimum side share of a split, in (0, 0.5)")->capture_default_str();
  fitc->add_option("--fair-split-pi", fit.fair_split_pi, "Fair-split parameter pi > 1 (off by default)");
  fitc->add_option("--min-treated", fit.min_treated, "Treated entries required per side")->capture_default_str()->check(CLI::PositiveNumber);
  fitc->add_flag("--time-covariate", fit.time_covariate, "Append the time index as a covariate");
  fitc->add_option("--out", fit.out, "Output directory");
  fitc->add_flag("--no-timing", fit.no_timing, "Write zero wall times");

  BenchmarkArgs bench;
  auto* benchc = app.add_subcommand("benchmark", "Run PaCE and MCNNM over a generator grid");
  benchc->add_option("--config", bench.config, "JSON config file")->check(CLI::ExistingFile);
  benchc->add_flag("--paper-grid", bench.paper_grid, "alpha x adaptive x effect-op grid with 200 instances per cell");
  benchc->add_option("--jobs", bench.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  benchc->add_option("--instances", bench.instances, "Override instances per cell")->check(CLI::PositiveNumber);
  auto* methods_opt = benchc->add_option("--methods", bench.methods, "Comma-separated subset of pace,mcnnm");
  benchc->add_option("--external", bench.external, "CSV of external baseline scores to merge")->check(CLI::ExistingFile);
  benchc->add_option("--out", bench.out, "Output directory");
  benchc->add_flag("--no-timing", bench.no_timing, "Write zero wall times so results compare byte for byte");

  VerifyArgs ver;
  auto* verifyc = app.add_subcommand("verify", "Run the empirical theory checks");
  std::vector<std::string> suites = verify_suite_names();
  suites.push_back("all");
  verifyc->add_option("--suite", ver.suite, "Suite to run")->capture_default_str()->check(CLI::IsMember(suites));
  verifyc->add_option("--jobs", ver.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  verifyc->add_option("--out", ver.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*simulate) return run_simulate(sim);
    if (*fitc) return run_fit(fit);
    if (*benchc) return run_benchmark_cmd(bench, methods_opt->count() > 0);
    return run_verify_cmd(ver);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.code()) {
      case ErrorCode::ConfigError:
      case ErrorCode::IoError:
      case ErrorCode::ParseError:
      case ErrorCode::MissingEntry:
      case ErrorCode::DuplicateEntry:
        return kExitUsage;
      default:
        return kExitFailure;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
