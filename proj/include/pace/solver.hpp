#pragma once

#include "pace/linalg.hpp"

#include <json.hpp>

#include <optional>

namespace pace {

/// Regressors of the convex program: masks Z_i plus (optionally) the
/// unpenalized row-mean subspace {m 1^T}.
struct RegressorBasis {
  MaskList masks;
  bool include_row_means = true;

  std::size_t size() const { return masks.size(); }
};

struct SolverOptions {
  int max_iters = 500;
  double obj_tol = 1e-7;
  double kkt_tol = 1e-5;
  double rank_threshold = 1e-8;
  double lambda_shrink = 0.8;
  /// tune_lambda gives up once lambda < lambda_floor * lambda_0.
  double lambda_floor = 1e-10;

  nlohmann::json to_json() const;
};

/// Thin SVD of the retained (nonzero) part of a low-rank matrix.
struct LowRankFactors {
  Matrix U;  // n x r
  Vector S;  // r, descending, positive
  Matrix V;  // T x r

  Eigen::Index rank() const { return S.size(); }
  Matrix product() const { return U * S.asDiagonal() * V.transpose(); }
};

struct ConvexSolution {
  Matrix M_hat;
  Vector tau_hat;
  Vector m_hat;
  LowRankFactors svd;
  double lambda = 0.0;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> objective_history;

  Eigen::Index rank() const { return svd.rank(); }
};

/// Singular-value soft-thresholding: argmin_M 1/2||A - M||_F^2 + lambda ||M||_*.
Matrix svt(const Matrix& a, double lambda);

/// svt() returning the retained factors. A component is kept when its
/// thresholded value exceeds rank_threshold * max(sigma_1, 1).
LowRankFactors svt_factors(const Matrix& a, double lambda, double rank_threshold = 1e-8);

struct RegressorCoefficients {
  Vector tau;
  Vector m;
};

/// Exact least-squares fit of R on span{Z_i} (+ row means). Precomputes the
/// centered Gram pseudo-inverse so repeated fits cost one pass over the masks.
class RegressorFit {
 public:
  RegressorFit(const RegressorBasis& basis, Eigen::Index rows, Eigen::Index cols);

  RegressorCoefficients fit(const Matrix& r) const;
  /// sum_i tau_i Z_i + m 1^T
  Matrix fitted(const RegressorCoefficients& c) const;
  Matrix combination(const Vector& tau) const;

  Eigen::Index rows() const { return rows_; }
  Eigen::Index cols() const { return cols_; }
  std::size_t size() const { return static_cast<std::size_t>(flat_.rows()); }
  bool row_means() const { return row_means_; }

 private:
  Eigen::Index rows_;
  Eigen::Index cols_;
  bool row_means_;
  Matrix flat_;           // k x nT, raw masks
  Matrix centered_flat_;  // k x nT, row-centered masks (or raw)
  Matrix gram_pinv_;      // k x k
};

RegressorCoefficients fit_regressors(const Matrix& r, const RegressorBasis& basis);

/// 1/2||O - M - m1^T - sum tau_i Z_i||_F^2 + lambda ||M||_*
double regularized_objective(const Matrix& outcomes, const RegressorBasis& basis, const Matrix& m_hat_matrix,
                             const Vector& tau, const Vector& m, double nuclear_norm, double lambda);

/// Alternating minimization: M <- svt(O - m1^T - sum tau Z), (tau, m) <- exact
/// refit on O - M. Stops when the relative objective decrease drops below
/// obj_tol and the KKT residuals pass, or after max_iters (converged=false).
ConvexSolution solve_regularized(const Matrix& outcomes, const RegressorBasis& basis, double lambda,
                                 const SolverOptions& options = {}, const ConvexSolution* warm_start = nullptr);

struct TuneResult {
  double lambda = 0.0;
  double lambda0 = 0.0;
  int steps = 0;
  bool rank_reached = false;
  ConvexSolution solution;
};

/// Spectral norm of the residual after the (tau, m)-only fit: the smallest
/// lambda for which M = 0 is optimal.
double rank_zero_lambda(const Matrix& outcomes, const RegressorBasis& basis);

/// Shrinks lambda geometrically from rank_zero_lambda() until the retained
/// rank reaches target_rank. Throws RankUnreachable on lambda underflow.
TuneResult tune_lambda(const Matrix& outcomes, const RegressorBasis& basis, int target_rank,
                       const SolverOptions& options = {});

/// Same schedule, but returns the last solve instead of throwing when the
/// rank cannot be reached (e.g. noiseless panels fully explained by the
/// regressors).
TuneResult tune_lambda_best_effort(const Matrix& outcomes, const RegressorBasis& basis, int target_rank,
                                   const SolverOptions& options = {});

/// First-order optimality residuals of the regularized program.
struct KktReport {
  double tau_stationarity = 0.0;  // max_i |<Z_i, R>| / ||O||_F
  double w_left = 0.0;            // ||U^T W||_F
  double w_right = 0.0;           // ||W V||_F
  double w_spectral_excess = 0.0; // max(0, ||W||_2 - 1)
  double row_mean = 0.0;          // ||m - (O - M - sum tau Z)1/T||_inf / (||O||_F / sqrt(T))
  double v_ones = 0.0;            // max_j |1^T V_j|

  double max_residual() const;
  bool passes(double tol) const { return max_residual() <= tol; }
  nlohmann::json to_json() const;
};

KktReport kkt_residuals(const ConvexSolution& sol, const Matrix& outcomes, const RegressorBasis& basis);

}  // namespace pace
