#pragma once

#include "pace/synthetic.hpp"
#include "pace/tree.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pace {

/// Cartesian grid of generator settings. Fully synthetic when
/// `fully_synthetic` is set; otherwise the caller supplies a baseline panel.
struct BenchmarkGrid {
  std::vector<double> alphas{0.25};
  std::vector<bool> adaptive{false};
  std::vector<EffectOp> effect_ops{EffectOp::Random};
  EffectSign effect_sign = EffectSign::Added;
  double target_ratio = 0.2;
  std::optional<FullySyntheticConfig> fully_synthetic;
  int instances_per_cell = 5;
  std::uint64_t master_seed = 0;
  std::vector<std::string> methods{"pace", "mcnnm"};

  int max_leaves = 40;
  int target_rank = 6;
  SplitConstraints constraints;

  void check() const;
  nlohmann::json to_json() const;

  /// alpha in {0.05, 0.25, 0.5, 0.75, 1.0} x {non-adaptive, adaptive} x {add, multiply}.
  static BenchmarkGrid paper();
};

struct BenchmarkCell {
  std::size_t index = 0;
  double alpha = 0.0;
  bool adaptive = false;
  EffectOp effect_op = EffectOp::Random;
};

/// Cells in alpha-major, then adaptive, then effect-op order.
std::vector<BenchmarkCell> expand_grid(const BenchmarkGrid& grid);

std::string instance_id(std::size_t cell, int index);

struct BenchmarkRecord {
  std::string instance_id;
  std::string method;
  double alpha = 0.0;
  bool adaptive = false;
  std::string effect_op;
  std::uint64_t seed = 0;
  double nmae_all = 0.0;      // NaN when the method has no all-entry estimate
  double nmae_treated = 0.0;
  double wall_time = 0.0;
  std::string error;          // empty on success
};

struct BenchmarkOptions {
  int jobs = 1;
  /// When false wall_time is written as 0 so result files compare byte for byte.
  bool timing = true;
  const Panel* baseline = nullptr;
};

/// Runs every method on every instance of every cell. Instances are scheduled
/// over `jobs` OpenMP threads; seeds come from derive_seed(master, cell, i), so
/// the records (returned in canonical order) do not depend on `jobs`.
/// Per-instance failures become NaN rows carrying the error code.
std::vector<BenchmarkRecord> run_benchmark(const BenchmarkGrid& grid, const BenchmarkOptions& options = {});

/// Sorts by (instance_id, method).
void sort_records(std::vector<BenchmarkRecord>& records);

void write_results_csv(const std::filesystem::path& path, const std::vector<BenchmarkRecord>& records);
std::string results_csv(const std::vector<BenchmarkRecord>& records);

/// Reads a results CSV. External files need instance_id, method and at least
/// one of nmae_all / nmae_treated; other columns are optional.
std::vector<BenchmarkRecord> read_results_csv(const std::filesystem::path& path);

/// Appends external rows whose instance_id occurs in `records`, copying the
/// generator fields from the matching instance. Returns the number of
/// external rows dropped for lack of a match.
std::size_t merge_external(std::vector<BenchmarkRecord>& records, const std::vector<BenchmarkRecord>& external);

/// Per cell (alpha, adaptive, effect_op): instance count, mean/std of each
/// metric per method over finite values, and winner proportions per metric
/// (lowest finite score wins, ties split equally).
nlohmann::json aggregate(const std::vector<BenchmarkRecord>& records);

}  // namespace pace
