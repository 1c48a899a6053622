#pragma once

#include "pace/panel.hpp"
#include "pace/solver.hpp"
#include "pace/tree.hpp"

#include <json.hpp>

#include <map>
#include <vector>

namespace pace {

/// Unit-Frobenius cluster-treatment masks Z_i = Z~_i / ||Z~_i||_F. Clusters
/// without treated entries are left out; origin[i] says where Z_i came from.
struct NormalizedMasks {
  MaskList Z;
  Vector frob_norms;
  Vector sum_norms;
  std::vector<std::pair<std::size_t, int>> origin;
  std::vector<std::pair<std::size_t, int>> dropped;

  std::size_t size() const { return Z.size(); }
  RegressorBasis basis() const { return RegressorBasis{Z, true}; }
};

NormalizedMasks normalize_masks(const TreatmentForest& forest, const Panel& panel);

/// (I - UU^T) A (I - rr^T/||r||^2) (I - VV^T) with r = (I - VV^T) 1: the
/// projection onto the complement of the tangent space plus row means.
Matrix tangent_projection_perp(const Matrix& a, const Matrix& U, const Matrix& V);

struct DebiasResult {
  Matrix D;
  Vector delta1;
  Vector tau_hat;  // normalized scale
  Vector tau_d;    // original scale
  double cond_D = 0.0;
  bool pseudo_inverse_used = false;

  nlohmann::json to_json() const;
};

DebiasResult debias(const ConvexSolution& sol, const NormalizedMasks& masks);

struct EstimateOptions {
  BuildOptions build;
  /// Rank targeted by the final solve; defaults to build.target_rank.
  std::optional<int> final_rank;
};

struct EffectEstimate {
  TreatmentForest forest;
  std::vector<TraceRow> trace;
  NormalizedMasks masks;
  ConvexSolution solution;
  DebiasResult debias;
  double lambda0 = 0.0;
  bool rank_reached = false;
  std::map<std::pair<std::size_t, int>, double> tau_d_by_leaf;
  /// Leaves with no treated entries; they predict 0.
  std::vector<std::pair<std::size_t, int>> empty_leaves;

  nlohmann::json to_json() const;
};

EffectEstimate estimate_effects(const Panel& panel, const EstimateOptions& options);
EffectEstimate estimate_effects(const Panel& panel, int max_leaves, int target_rank,
                                const SplitConstraints& constraints = {});

double predict_effect(const EffectEstimate& est, std::size_t treatment, const Vector& covariates);

/// T^_i(X^{zt}) at every in-sample (z, t), treated or not.
Matrix effect_matrix(const EffectEstimate& est, std::size_t treatment);

}  // namespace pace
