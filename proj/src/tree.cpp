#include "pace/tree.hpp"
#include "pace/error.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace pace {

void SplitConstraints::check() const {
  if (!(alpha > 0.0 && alpha < 0.5)) throw Error(ErrorCode::PreconditionViolation, "split alpha must lie in (0, 0.5)");
  if (min_treated_per_side < 1) throw Error(ErrorCode::PreconditionViolation, "min_treated_per_side must be >= 1");
  if (fair_split_pi && !(*fair_split_pi > 1.0)) {
    throw Error(ErrorCode::PreconditionViolation, "fair_split_pi must exceed 1");
  }
  if (min_mse_gain < 0.0) throw Error(ErrorCode::PreconditionViolation, "min_mse_gain must be nonnegative");
  if (max_candidates < 1) throw Error(ErrorCode::PreconditionViolation, "max_candidates must be positive");
}

nlohmann::json SplitConstraints::to_json() const {
  nlohmann::json j = {{"alpha", alpha},
                      {"min_treated_per_side", min_treated_per_side},
                      {"min_mse_gain", min_mse_gain},
                      {"max_candidates", max_candidates}};
  j["fair_split_pi"] = fair_split_pi ? nlohmann::json(*fair_split_pi) : nlohmann::json(nullptr);
  return j;
}

// --- tree --------------------------------------------------------------------

TreatmentTree::TreatmentTree() {
  TreeNode root;
  root.leaf = 0;
  nodes_.push_back(root);
  leaf_nodes_.push_back(0);
}

int TreatmentTree::assign(const Vector& x) const {
  int node = 0;
  while (nodes_[static_cast<std::size_t>(node)].covariate >= 0) {
    const TreeNode& nd = nodes_[static_cast<std::size_t>(node)];
    node = x(nd.covariate) <= nd.threshold ? nd.left : nd.right;
  }
  return nodes_[static_cast<std::size_t>(node)].leaf;
}

int TreatmentTree::split(int leaf, std::size_t covariate, double threshold) {
  const int node_index = leaf_nodes_.at(static_cast<std::size_t>(leaf));
  const int new_leaf = leaf_count();
  TreeNode left;
  left.leaf = leaf;
  left.parent = node_index;
  left.depth = nodes_[static_cast<std::size_t>(node_index)].depth + 1;
  TreeNode right = left;
  right.leaf = new_leaf;
  const int left_index = static_cast<int>(nodes_.size());
  nodes_.push_back(left);
  nodes_.push_back(right);
  TreeNode& parent = nodes_[static_cast<std::size_t>(node_index)];
  parent.covariate = static_cast<int>(covariate);
  parent.threshold = threshold;
  parent.left = left_index;
  parent.right = left_index + 1;
  parent.leaf = -1;
  leaf_nodes_[static_cast<std::size_t>(leaf)] = left_index;
  leaf_nodes_.push_back(left_index + 1);
  return new_leaf;
}

std::vector<std::size_t> TreatmentTree::ancestor_covariates(int leaf) const {
  std::vector<std::size_t> out;
  int node = nodes_[static_cast<std::size_t>(leaf_nodes_.at(static_cast<std::size_t>(leaf)))].parent;
  while (node >= 0) {
    out.push_back(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].covariate));
    node = nodes_[static_cast<std::size_t>(node)].parent;
  }
  return out;
}

// --- forest ------------------------------------------------------------------

TreatmentForest TreatmentForest::single_leaf(const Panel& panel, const SplitConstraints& constraints) {
  TreatmentForest f;
  f.constraints = constraints;
  f.trees.assign(panel.num_treatments(), TreatmentTree{});
  f.assignment.assign(panel.num_treatments(), Eigen::MatrixXi::Zero(panel.units(), panel.periods()));
  return f;
}

Matrix TreatmentForest::cluster_mask(std::size_t treatment, int leaf) const {
  return (assignment[treatment].array() == leaf).cast<double>();
}

void TreatmentForest::apply_split(const Panel& panel, const SplitCandidate& s) {
  const int new_leaf = trees[s.treatment].split(s.cluster, s.covariate, s.threshold);
  Eigen::MatrixXi& a = assignment[s.treatment];
  const Matrix& x = panel.covariates[s.covariate];
  for (Eigen::Index t = 0; t < a.cols(); ++t) {
    for (Eigen::Index z = 0; z < a.rows(); ++z) {
      if (a(z, t) == s.cluster && x(z, t) > s.threshold) a(z, t) = new_leaf;
    }
  }
}

ClusterMasks cluster_treatment_masks(const Panel& panel, const TreatmentForest& forest) {
  ClusterMasks out;
  for (std::size_t i = 0; i < forest.num_treatments(); ++i) {
    for (int j = 0; j < forest.leaf_count(i); ++j) {
      Matrix m = forest.cluster_mask(i, j).cwiseProduct(panel.treatments[i]);
      if (m.sum() > 0.0) {
        out.masks.push_back(std::move(m));
        out.origin.emplace_back(i, j);
      }
    }
  }
  return out;
}

int assign_leaf(const TreatmentForest& forest, std::size_t treatment, const Vector& covariates) {
  return forest.trees.at(treatment).assign(covariates);
}

// --- Algorithm driver -----------------------------------------------------------

ForestBuild build_forest(const Panel& panel, const BuildOptions& options) {
  if (options.max_leaves < 1) throw Error(ErrorCode::PreconditionViolation, "max_leaves must be >= 1");
  options.constraints.check();
  panel.check();

  ForestBuild out;
  out.forest = TreatmentForest::single_leaf(panel, options.constraints);
  for (int l = 1; l < options.max_leaves; ++l) {
    const ClusterMasks cm = cluster_treatment_masks(panel, out.forest);
    if (cm.masks.empty()) throw Error(ErrorCode::NoTreatedObservations, "no treated entries in any cluster");
    RegressorBasis basis{cm.masks, true};

    ConvexSolution sol;
    if (options.fixed_lambda) {
      sol = solve_regularized(panel.outcomes, basis, *options.fixed_lambda, options.solver);
    } else {
      sol = tune_lambda_best_effort(panel.outcomes, basis, options.target_rank, options.solver).solution;
    }

    bool any_split = false;
    for (std::size_t i = 0; i < panel.num_treatments(); ++i) {
      TraceRow row;
      row.iteration = l;
      row.treatment = i;
      row.lambda = sol.lambda;
      row.rank = static_cast<int>(sol.rank());
      row.objective = sol.objective;
      if (out.forest.leaf_count(i) < options.max_leaves) {
        const SplitSearchResult res =
            find_best_split(panel, sol.M_hat, sol.m_hat, out.forest, i, options.constraints);
        row.current_mse = res.current_mse;
        if (res.best) {
          out.forest.apply_split(panel, *res.best);
          row.split = true;
          row.cluster = res.best->cluster;
          row.covariate = static_cast<int>(res.best->covariate);
          row.threshold = res.best->threshold;
          row.est_mse = res.best->est_mse;
          any_split = true;
        }
      }
      out.trace.push_back(row);
    }
    if (options.observer) options.observer(out.forest, l);
    if (!any_split) break;
  }
  return out;
}

// --- serialization ---------------------------------------------------------------

namespace {

nlohmann::json node_json(const TreatmentTree& tree, int index) {
  const TreeNode& n = tree.nodes()[static_cast<std::size_t>(index)];
  if (n.covariate < 0) return {{"leaf_id", n.leaf}, {"depth", n.depth}};
  return {{"covariate", n.covariate},
          {"threshold", n.threshold},
          {"children", {node_json(tree, n.left), node_json(tree, n.right)}}};
}

void node_text(const TreatmentTree& tree, int index, int indent, std::ostringstream& os) {
  const TreeNode& n = tree.nodes()[static_cast<std::size_t>(index)];
  const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
  if (n.covariate < 0) {
    os << pad << "leaf " << n.leaf << "\n";
    return;
  }
  os << pad << "if x[" << n.covariate << "] <= " << n.threshold << ":\n";
  node_text(tree, n.left, indent + 1, os);
  os << pad << "else:\n";
  node_text(tree, n.right, indent + 1, os);
}

}  // namespace

nlohmann::json forest_to_json(const TreatmentForest& forest) {
  nlohmann::json trees = nlohmann::json::array();
  for (std::size_t i = 0; i < forest.trees.size(); ++i) {
    trees.push_back({{"treatment", i}, {"leaves", forest.trees[i].leaf_count()}, {"root", node_json(forest.trees[i], 0)}});
  }
  return {{"trees", trees}, {"constraints", forest.constraints.to_json()}};
}

std::string forest_to_text(const TreatmentForest& forest) {
  std::ostringstream os;
  os << std::setprecision(10);
  for (std::size_t i = 0; i < forest.trees.size(); ++i) {
    os << "treatment " << i << " (" << forest.trees[i].leaf_count() << " leaves)\n";
    node_text(forest.trees[i], 0, 1, os);
  }
  return os.str();
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "iteration,treatment,cluster,covariate,threshold,est_mse,lambda\n";
  for (const auto& r : trace) {
    if (!r.split) continue;
    out << r.iteration << ',' << r.treatment << ',' << r.cluster << ',' << r.covariate << ',' << r.threshold << ','
        << r.est_mse << ',' << r.lambda << '\n';
  }
}

}  // namespace pace
