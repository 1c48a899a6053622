#pragma once

#include "pace/benchmark.hpp"
#include "pace/panel.hpp"
#include "pace/synthetic.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>

namespace pace {

/// JSON config files. Unknown keys, missing required keys and bad values
/// throw ConfigError naming the key path, e.g. "generator.alpha".
///
/// simulate:
///   { "generator": { "alpha": 0.25, "adaptive": false, "effect_op": "random",
///                    "effect_sign": "added", "target_ratio": 0.2, "seed": 7,
///                    "fully_synthetic": { "n": 50, "T": 50, "p": 2, "rank_star": 2,
///                                         "noise_sigma": 0.1, "covariate_scheme": "iid" } },
///     "baseline": { "outcomes": "o.csv", "covariates": ["x.csv"], "treatments": [] } }
///
/// benchmark:
///   { "grid": { "alpha": [0.25], "adaptive": [false, true], "effect_op": ["add"],
///               "effect_sign": "added", "target_ratio": 0.2, "instances_per_cell": 5,
///               "seed": 0, "fully_synthetic": { ... } },
///     "methods": ["pace", "mcnnm"],
///     "estimator": { "max_leaves": 40, "target_rank": 6, "alpha_reg": 0.1,
///                    "fair_split_pi": 0.5, "min_treated_per_side": 1 },
///     "baseline": { ... }, "external": "scores.csv" }
///
/// Relative paths resolve against the config file's directory.
struct SimulateConfig {
  GeneratorConfig generator;
  std::optional<CsvPanelPaths> baseline;
};

struct BenchmarkConfig {
  BenchmarkGrid grid;
  std::optional<CsvPanelPaths> baseline;
  std::optional<std::filesystem::path> external;
};

nlohmann::json read_json_file(const std::filesystem::path& path);

SimulateConfig parse_simulate_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
BenchmarkConfig parse_benchmark_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

SimulateConfig load_simulate_config(const std::filesystem::path& path);
BenchmarkConfig load_benchmark_config(const std::filesystem::path& path);

}  // namespace pace
