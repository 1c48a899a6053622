#pragma once

#include "pace/panel.hpp"
#include "pace/solver.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace pace {

/// Validity rules for a candidate split.
struct SplitConstraints {
  /// Each side keeps at least alpha * (node size) observations.
  double alpha = 0.1;
  /// Each side keeps at least this many treated entries of the split treatment.
  int min_treated_per_side = 1;
  /// When set, a covariate unused in the last ceil(pi * p) ancestor splits
  /// must be used next.
  std::optional<double> fair_split_pi;
  /// Relative est-MSE improvement required to accept a split.
  double min_mse_gain = 1e-9;
  /// Cap on threshold candidates per (leaf, covariate); quantile-spaced above it.
  int max_candidates = 64;

  void check() const;
  nlohmann::json to_json() const;
};

struct SplitCandidate {
  std::size_t treatment = 0;
  int cluster = 0;
  std::size_t covariate = 0;
  double threshold = 0.0;
  double est_mse = 0.0;
};

struct TreeNode {
  int covariate = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int leaf = -1;  // leaf id when covariate == -1
  int parent = -1;
  int depth = 0;
};

/// Binary tree over covariate space; X <= threshold goes left. Leaf ids
/// follow the clustering order: splitting leaf j keeps id j for the left
/// child and gives the right child the next free id.
class TreatmentTree {
 public:
  TreatmentTree();

  int leaf_count() const { return static_cast<int>(leaf_nodes_.size()); }
  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& leaf_node(int leaf) const { return nodes_[static_cast<std::size_t>(leaf_nodes_.at(static_cast<std::size_t>(leaf)))]; }

  int assign(const Vector& covariates) const;
  int split(int leaf, std::size_t covariate, double threshold);
  /// Covariates used by the ancestors of `leaf`, nearest first.
  std::vector<std::size_t> ancestor_covariates(int leaf) const;
  int depth(int leaf) const { return leaf_node(leaf).depth; }

 private:
  std::vector<TreeNode> nodes_;
  std::vector<int> leaf_nodes_;
};

/// One tree per treatment plus the cluster assignment of every (z, t).
struct TreatmentForest {
  std::vector<TreatmentTree> trees;
  std::vector<Eigen::MatrixXi> assignment;  // assignment[i](z, t) = leaf id
  SplitConstraints constraints;

  static TreatmentForest single_leaf(const Panel& panel, const SplitConstraints& constraints = {});

  std::size_t num_treatments() const { return trees.size(); }
  int leaf_count(std::size_t treatment) const { return trees[treatment].leaf_count(); }
  /// Binary C^i_j.
  Matrix cluster_mask(std::size_t treatment, int leaf) const;
  void apply_split(const Panel& panel, const SplitCandidate& split);
};

/// W_i ∘ C^i_j for every nonempty cluster-treatment pair, ordered by (i, j).
struct ClusterMasks {
  MaskList masks;
  std::vector<std::pair<std::size_t, int>> origin;
};
ClusterMasks cluster_treatment_masks(const Panel& panel, const TreatmentForest& forest);

/// min_tau ||residual - sum tau_i mask_i||_F^2 with residual = O - M - m1^T.
double estimated_mse(const Matrix& residual, const MaskList& masks);
double estimated_mse(const Panel& panel, const Matrix& m_hat_matrix, const Vector& m_hat, const MaskList& masks);

struct SplitSearchResult {
  std::optional<SplitCandidate> best;
  double current_mse = 0.0;
  std::size_t num_evaluated = 0;
  /// Every valid candidate, filled only when requested.
  std::vector<SplitCandidate> evaluated;
};

/// Best valid split for one treatment. (leaf, covariate) pairs are scanned in
/// parallel with OpenMP using incremental sufficient statistics; the result
/// does not depend on the thread count.
SplitSearchResult find_best_split(const Panel& panel, const Matrix& m_hat_matrix, const Vector& m_hat,
                                  const TreatmentForest& forest, std::size_t treatment,
                                  const SplitConstraints& constraints, bool record_candidates = false);

/// Serial reference: rebuilds the full mask set and calls estimated_mse()
/// for every candidate. Same candidates, same tie-breaking.
SplitSearchResult find_best_split_reference(const Panel& panel, const Matrix& m_hat_matrix, const Vector& m_hat,
                                            const TreatmentForest& forest, std::size_t treatment,
                                            const SplitConstraints& constraints, bool record_candidates = false);

/// Threshold candidates for one (leaf, covariate): midpoints between
/// consecutive distinct values, quantile-subsampled above max_candidates.
std::vector<double> candidate_thresholds(std::vector<double> values, int max_candidates);

struct TraceRow {
  int iteration = 0;
  std::size_t treatment = 0;
  bool split = false;
  int cluster = -1;
  int covariate = -1;
  double threshold = 0.0;
  double est_mse = 0.0;
  double current_mse = 0.0;
  double lambda = 0.0;
  int rank = 0;
  double objective = 0.0;
};

struct BuildOptions {
  int max_leaves = 40;
  int target_rank = 6;
  SplitConstraints constraints;
  SolverOptions solver;
  /// Skip lambda tuning and use this value at every iteration.
  std::optional<double> fixed_lambda;
  /// Called after each outer iteration with the updated forest.
  std::function<void(const TreatmentForest&, int)> observer;
};

struct ForestBuild {
  TreatmentForest forest;
  std::vector<TraceRow> trace;
};

ForestBuild build_forest(const Panel& panel, const BuildOptions& options);

int assign_leaf(const TreatmentForest& forest, std::size_t treatment, const Vector& covariates);

nlohmann::json forest_to_json(const TreatmentForest& forest);
std::string forest_to_text(const TreatmentForest& forest);
void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

}  // namespace pace
