#include "pace/debias.hpp"
#include "pace/error.hpp"

#include <cmath>

namespace pace {

NormalizedMasks normalize_masks(const TreatmentForest& forest, const Panel& panel) {
  if (forest.num_treatments() != panel.num_treatments()) {
    throw Error(ErrorCode::ShapeMismatch, "forest and panel disagree on the number of treatments");
  }
  NormalizedMasks out;
  std::vector<double> frob, sum;
  for (std::size_t i = 0; i < forest.num_treatments(); ++i) {
    for (int j = 0; j < forest.leaf_count(i); ++j) {
      Matrix z = forest.cluster_mask(i, j).cwiseProduct(panel.treatments[i]);
      const double f = z.norm();
      if (f == 0.0) {
        out.dropped.emplace_back(i, j);
        continue;
      }
      sum.push_back(z.cwiseAbs().sum());
      frob.push_back(f);
      out.Z.push_back(z / f);
      out.origin.emplace_back(i, j);
    }
  }
  if (out.Z.empty()) throw Error(ErrorCode::NoTreatedObservations, "every cluster-treatment mask is zero");
  out.frob_norms = Eigen::Map<Vector>(frob.data(), static_cast<Eigen::Index>(frob.size()));
  out.sum_norms = Eigen::Map<Vector>(sum.data(), static_cast<Eigen::Index>(sum.size()));
  return out;
}

namespace {

void require_orthonormal(const Matrix& q, const char* name) {
  if (q.cols() == 0) return;
  const double err = (q.transpose() * q - Matrix::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
  if (!(err <= 1e-8)) {
    throw Error(ErrorCode::NotOrthonormal, std::string(name) + " columns are not orthonormal (error " +
                                               std::to_string(err) + ")");
  }
}

}  // namespace

Matrix tangent_projection_perp(const Matrix& a, const Matrix& U, const Matrix& V) {
  if (U.rows() != a.rows() || V.rows() != a.cols() || U.cols() != V.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "projection factors do not match the matrix shape");
  }
  require_orthonormal(U, "U");
  require_orthonormal(V, "V");
  const Eigen::Index T = a.cols();

  Matrix b = a - U * (U.transpose() * a);
  Vector r = Vector::Ones(T) - V * V.transpose().rowwise().sum();
  if (r.norm() >= 1e-12 * std::sqrt(static_cast<double>(T))) {
    b -= (b * r) * (r.transpose() / r.squaredNorm());
  }
  b -= (b * V) * V.transpose();
  return b;
}

nlohmann::json DebiasResult::to_json() const {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"delta1", vec(delta1)},
          {"tau_hat", vec(tau_hat)},
          {"tau_d", vec(tau_d)},
          {"cond_D", std::isfinite(cond_D) ? nlohmann::json(cond_D) : nlohmann::json("inf")},
          {"pseudo_inverse_used", pseudo_inverse_used}};
}

DebiasResult debias(const ConvexSolution& sol, const NormalizedMasks& masks) {
  const auto k = static_cast<Eigen::Index>(masks.size());
  if (sol.tau_hat.size() != k) throw Error(ErrorCode::ShapeMismatch, "solution and masks disagree on k");
  const Matrix& U = sol.svd.U;
  const Matrix& V = sol.svd.V;

  MaskList projected;
  projected.reserve(masks.size());
  for (const auto& z : masks.Z) projected.push_back(tangent_projection_perp(z, U, V));

  DebiasResult out;
  out.tau_hat = sol.tau_hat;
  out.D.resize(k, k);
  out.delta1.resize(k);
  const Matrix uv = U * V.transpose();
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = a; b < k; ++b) {
      out.D(a, b) = out.D(b, a) = inner(projected[static_cast<std::size_t>(a)], projected[static_cast<std::size_t>(b)]);
    }
    out.delta1(a) = U.cols() == 0 ? 0.0 : sol.lambda * inner(masks.Z[static_cast<std::size_t>(a)], uv);
  }

  if (!(out.D.trace() > 1e-12)) {
    throw Error(ErrorCode::DegenerateIdentification, "every mask lies in the estimated tangent space");
  }
  out.cond_D = condition_number_psd(out.D);
  Vector correction;
  if (out.cond_D > 1e12) {
    out.pseudo_inverse_used = true;
    correction = pinv_solve_psd(out.D, out.delta1);
  } else {
    correction = out.D.ldlt().solve(out.delta1);
  }
  out.tau_d = (out.tau_hat - correction).cwiseQuotient(masks.frob_norms);
  return out;
}

EffectEstimate estimate_effects(const Panel& panel, const EstimateOptions& options) {
  panel.check();
  double treated = 0.0;
  for (const auto& w : panel.treatments) treated += w.sum();
  if (treated == 0.0) throw Error(ErrorCode::NoTreatedObservations, "panel has no treated entries");

  EffectEstimate est;
  ForestBuild built = build_forest(panel, options.build);
  est.forest = std::move(built.forest);
  est.trace = std::move(built.trace);
  est.masks = normalize_masks(est.forest, panel);

  const int rank = options.final_rank.value_or(options.build.target_rank);
  TuneResult tuned = tune_lambda_best_effort(panel.outcomes, est.masks.basis(), rank, options.build.solver);
  est.solution = std::move(tuned.solution);
  est.lambda0 = tuned.lambda0;
  est.rank_reached = tuned.rank_reached;
  est.debias = debias(est.solution, est.masks);

  for (std::size_t a = 0; a < est.masks.size(); ++a) {
    est.tau_d_by_leaf[est.masks.origin[a]] = est.debias.tau_d(static_cast<Eigen::Index>(a));
  }
  for (const auto& key : est.masks.dropped) {
    est.tau_d_by_leaf[key] = 0.0;
    est.empty_leaves.push_back(key);
  }
  return est;
}

EffectEstimate estimate_effects(const Panel& panel, int max_leaves, int target_rank,
                                const SplitConstraints& constraints) {
  EstimateOptions opt;
  opt.build.max_leaves = max_leaves;
  opt.build.target_rank = target_rank;
  opt.build.constraints = constraints;
  return estimate_effects(panel, opt);
}

double predict_effect(const EffectEstimate& est, std::size_t treatment, const Vector& covariates) {
  const int leaf = assign_leaf(est.forest, treatment, covariates);
  auto it = est.tau_d_by_leaf.find({treatment, leaf});
  return it == est.tau_d_by_leaf.end() ? 0.0 : it->second;
}

Matrix effect_matrix(const EffectEstimate& est, std::size_t treatment) {
  const Eigen::MatrixXi& a = est.forest.assignment.at(treatment);
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index t = 0; t < a.cols(); ++t) {
    for (Eigen::Index z = 0; z < a.rows(); ++z) {
      auto it = est.tau_d_by_leaf.find({treatment, a(z, t)});
      out(z, t) = it == est.tau_d_by_leaf.end() ? 0.0 : it->second;
    }
  }
  return out;
}

nlohmann::json EffectEstimate::to_json() const {
  nlohmann::json leaves = nlohmann::json::array();
  for (const auto& [key, value] : tau_d_by_leaf) {
    bool empty = false;
    for (const auto& e : empty_leaves) empty = empty || e == key;
    leaves.push_back({{"treatment", key.first}, {"leaf", key.second}, {"tau_d", value}, {"empty", empty}});
  }
  nlohmann::json j;
  j["forest"] = forest_to_json(forest);
  j["leaves"] = leaves;
  j["lambda"] = solution.lambda;
  j["lambda0"] = lambda0;
  j["rank"] = solution.rank();
  j["rank_reached"] = rank_reached;
  j["solver_converged"] = solution.converged;
  j["solver_iterations"] = solution.iterations;
  j["debias"] = debias.to_json();
  j["flags"] = {{"ill_conditioned_D", debias.pseudo_inverse_used},
                {"empty_leaves", empty_leaves.size()},
                {"rank_unreached", !rank_reached}};
  return j;
}

}  // namespace pace
