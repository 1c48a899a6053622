#pragma once

#include "pace/debias.hpp"
#include "pace/synthetic.hpp"

#include <json.hpp>

#include <vector>

namespace pace {

// --- covariate density ----------------------------------------------------------

struct DensityReport {
  int samples = 0;
  /// Rectangles with volume >= margin_M; the constants are fitted on these.
  int informative = 0;
  int violations_lower = 0;
  int violations_upper = 0;
  double fitted_cbar = 0.0;
  double fitted_cunder = 0.0;
  double margin_M = 0.0;
  /// fitted_cunder == 0: some informative rectangle holds no observation.
  bool degenerate = false;

  nlohmann::json to_json() const;
};

/// sqrt(ln(nT) (p + 1) / min(n, T)).
double density_margin(Eigen::Index n, Eigen::Index T, std::size_t p);

/// Share of observations whose covariate vector lies in the closed box [lo, hi].
double rectangle_fraction(const std::vector<Matrix>& covariates, const Vector& lo, const Vector& hi);

/// Samples num_rectangles boxes with uniform corners in [0,1]^p (the full cube
/// is always sample 0). On boxes with volume V >= M the empirical fraction f is
/// bracketed by c_under V <= f <= c_bar V; violations count every sample with
/// f < c_under V - M or f > c_bar V + M. Covariates must lie in [0,1].
DensityReport check_density(const std::vector<Matrix>& covariates, int num_rectangles, Rng& rng);

// --- leaf diameters ---------------------------------------------------------------

struct DiameterReport {
  std::vector<int> leaves;
  std::vector<double> diameters;  // sqrt(sum of squared coordinate ranges) per leaf
  std::vector<long> sizes;
  std::vector<int> depths;
  double max_diameter = 0.0;
  /// (leaf count, max diameter) pairs, filled by diameter_curve().
  std::vector<std::pair<int, double>> bound_curve;

  nlohmann::json to_json() const;
};

/// Diameters over the covariates as stored in the panel; leaves without
/// observations get 0.
DiameterReport leaf_diameters(const TreatmentForest& forest, const Panel& panel, std::size_t treatment);

/// Grows one forest up to max(sizes) leaves and records the largest leaf
/// diameter each time the tree of `treatment` reaches a size in `sizes`.
DiameterReport diameter_curve(const Panel& panel, std::size_t treatment, const std::vector<int>& sizes,
                              const BuildOptions& options);

// --- error decomposition -------------------------------------------------------------

struct DecompositionReport {
  double residual = 0.0;
  Vector tau_star;        // normalized scale
  Vector tau_tilde_star;  // average true effect per cluster
  Vector delta1, delta2, delta3;
  /// max_i |<Z_i, delta>|; zero when the clusters carry their exact averages.
  double delta_alignment = 0.0;
  double kkt_residual = 0.0;
  bool kkt_passed = false;

  nlohmann::json to_json() const;
};

/// Checks D(tau_hat - tau*) = Delta1 + Delta2 + Delta3 on an instance with
/// known low-rank part. Throws NoGroundTruth when it is missing.
DecompositionReport decomposition_report(const Instance& instance, const EffectEstimate& est,
                                         double kkt_tol = 1e-5);
double decomposition_residual(const Instance& instance, const EffectEstimate& est);

/// tau~* per cluster of `est`, in the order of est.masks.
Vector cluster_average_truth(const Instance& instance, const EffectEstimate& est);

/// Identification diagnostics on the true tangent space: D*, lambda <Z_i, U*V*^T>
/// and the share ||P_T*(Z_i)||_F of each mask inside it. No thresholds.
nlohmann::json identification_diagnostics(const Instance& instance, const EffectEstimate& est);

// --- convergence trend ------------------------------------------------------------------

struct ConvergenceOptions {
  FullySyntheticConfig base;  // n and T are overwritten by each size
  double alpha = 0.25;
  bool homogeneous = true;    // constant effect; otherwise a two-covariate effect
  EffectOp effect_op = EffectOp::Add;
  double target_ratio = 0.2;
  int seeds = 20;
  std::uint64_t master_seed = 0;
  int target_rank = 6;
  int jobs = 1;
};

struct ConvergenceRow {
  Eigen::Index n = 0;
  double mean_abs_error = 0.0;
  double max_abs_error = 0.0;
  int runs = 0;
  int failures = 0;
};

struct ConvergenceTable {
  std::vector<ConvergenceRow> rows;
  /// Strictly decreasing mean error from each size to the next.
  bool decreasing = false;

  nlohmann::json to_json() const;
};

/// Single-leaf PaCE on fully synthetic panels with T = n; error |tau^d - tau~*|.
ConvergenceTable convergence_trend(const std::vector<Eigen::Index>& sizes, const ConvergenceOptions& options);

/// The panel used by convergence_trend() for (size, seed index).
Instance convergence_instance(Eigen::Index n, int seed_index, const ConvergenceOptions& options);

}  // namespace pace
