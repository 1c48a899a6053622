#pragma once

#include "pace/linalg.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pace {

/// Outcomes, covariates and treatment masks for an n x T panel.
///
/// Rows are units, columns are time periods. `covariates[c](z, t)` is the
/// c-th covariate of unit z at time t. Immutable once validated; share by
/// const reference across workers.
struct Panel {
  Matrix outcomes;
  std::vector<Matrix> covariates;
  std::vector<Matrix> treatments;
  std::vector<std::string> unit_ids;
  std::vector<std::string> time_ids;

  Eigen::Index units() const { return outcomes.rows(); }
  Eigen::Index periods() const { return outcomes.cols(); }
  std::size_t num_covariates() const { return covariates.size(); }
  std::size_t num_treatments() const { return treatments.size(); }

  /// Covariate vector X^{zt}.
  Vector covariate_vector(Eigen::Index unit, Eigen::Index time) const;

  /// Throws ShapeMismatch / InvalidTreatment when the panel invariants fail.
  void check() const;
};

/// Ground truth attached to simulated instances. `effect[i]` is the signed
/// effect of treatment i evaluated at every (z, t), not only treated entries.
struct GroundTruth {
  Matrix baseline;
  std::vector<Matrix> effect;
  std::optional<Matrix> noise;
  std::optional<Matrix> low_rank;

  /// effect[i] restricted to the support of `mask`.
  Matrix masked_effect(std::size_t treatment, const Matrix& mask) const;
};

/// Per-covariate min-max map to [0, 1]; constant covariates map to 0.
struct CovariateScaling {
  std::vector<double> lo;
  std::vector<double> hi;

  static CovariateScaling fit(const Panel& panel);
  double to_unit(std::size_t covariate, double value) const;
  double to_original(std::size_t covariate, double unit_value) const;
};

std::vector<Matrix> normalized_covariates(const Panel& panel, const CovariateScaling& scaling);

/// Copy of `panel` with the time index (0..T-1) appended as a covariate.
Panel append_time_covariate(const Panel& panel);

struct CsvPanelPaths {
  std::filesystem::path outcomes;
  /// Either one `unit,time,value` file per covariate, or a single file with
  /// header `unit,time,<name1>,<name2>,...`.
  std::vector<std::filesystem::path> covariates;
  std::vector<std::filesystem::path> treatments;
};

Panel load_panel_csv(const CsvPanelPaths& paths);

/// Writes long-format CSVs with round-trip precision. Returns the paths.
CsvPanelPaths write_panel_csv(const Panel& panel, const std::filesystem::path& dir,
                              const std::string& prefix = "panel");

/// Writes one long-format `unit,time,value` file for a single n x T matrix.
void write_long_csv(const std::filesystem::path& path, const Matrix& values,
                    const std::vector<std::string>& unit_ids,
                    const std::vector<std::string>& time_ids);

struct ValidationCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct ValidationReport {
  std::vector<ValidationCheck> checks;
  std::vector<long> treated_counts;
  /// overlap[i][j] = |supp(W_i) ∩ supp(W_j)|.
  std::vector<std::vector<long>> overlap;
  std::vector<std::pair<double, double>> covariate_ranges;

  bool ok() const;
};

ValidationReport validate_panel(const Panel& panel);

nlohmann::json panel_metadata_json(const Panel& panel);

}  // namespace pace
