#include "pace/solver.hpp"
#include "pace/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pace {

nlohmann::json SolverOptions::to_json() const {
  return {{"max_iters", max_iters},
          {"obj_tol", obj_tol},
          {"kkt_tol", kkt_tol},
          {"rank_threshold", rank_threshold},
          {"lambda_shrink", lambda_shrink},
          {"lambda_floor", lambda_floor}};
}

LowRankFactors svt_factors(const Matrix& a, double lambda, double rank_threshold) {
  if (!a.allFinite()) throw Error(ErrorCode::NonFiniteInput, "svt input has non-finite entries");
  if (lambda < 0.0) throw Error(ErrorCode::PreconditionViolation, "svt threshold must be nonnegative");
  LowRankFactors out;
  if (a.size() == 0) {
    out.U = Matrix::Zero(a.rows(), 0);
    out.V = Matrix::Zero(a.cols(), 0);
    return out;
  }
  Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sigma = svd.singularValues();
  Vector shrunk = (sigma.array() - lambda).cwiseMax(0.0);
  const double cutoff = rank_threshold * std::max(shrunk.size() > 0 ? shrunk(0) : 0.0, 1.0);
  Eigen::Index r = 0;
  while (r < shrunk.size() && shrunk(r) > cutoff) ++r;
  out.U = svd.matrixU().leftCols(r);
  out.S = shrunk.head(r);
  out.V = svd.matrixV().leftCols(r);
  return out;
}

Matrix svt(const Matrix& a, double lambda) {
  if (!a.allFinite()) throw Error(ErrorCode::NonFiniteInput, "svt input has non-finite entries");
  if (lambda == 0.0) return a;
  return svt_factors(a, lambda, 0.0).product();
}

// --- regressor fit -----------------------------------------------------------

RegressorFit::RegressorFit(const RegressorBasis& basis, Eigen::Index rows, Eigen::Index cols)
    : rows_(rows), cols_(cols), row_means_(basis.include_row_means) {
  const auto k = static_cast<Eigen::Index>(basis.masks.size());
  flat_.resize(k, rows * cols);
  centered_flat_.resize(k, rows * cols);
  for (Eigen::Index i = 0; i < k; ++i) {
    const Matrix& z = basis.masks[static_cast<std::size_t>(i)];
    if (z.rows() != rows || z.cols() != cols) throw Error(ErrorCode::ShapeMismatch, "regressor mask has wrong shape");
    if (!z.allFinite()) throw Error(ErrorCode::NonFiniteInput, "regressor mask has non-finite entries");
    flat_.row(i) = Eigen::Map<const Eigen::RowVectorXd>(z.data(), z.size());
    Matrix c = row_means_ ? row_center(z) : z;
    centered_flat_.row(i) = Eigen::Map<const Eigen::RowVectorXd>(c.data(), c.size());
  }
  gram_pinv_ = pinv_psd(centered_flat_ * centered_flat_.transpose());
}

RegressorCoefficients RegressorFit::fit(const Matrix& r) const {
  RegressorCoefficients c;
  const Eigen::Map<const Vector> rv(r.data(), r.size());
  // <Zc_i, R> equals <Zc_i, R(I - 11^T/T)> because Zc_i is row-centered.
  c.tau = gram_pinv_ * (centered_flat_ * rv);
  if (row_means_) {
    c.m = (r - combination(c.tau)).rowwise().mean();
  } else {
    c.m = Vector::Zero(rows_);
  }
  return c;
}

Matrix RegressorFit::combination(const Vector& tau) const {
  Matrix out(rows_, cols_);
  Eigen::Map<Vector> ov(out.data(), out.size());
  if (tau.size() == 0) {
    ov.setZero();
  } else {
    ov.noalias() = flat_.transpose() * tau;
  }
  return out;
}

Matrix RegressorFit::fitted(const RegressorCoefficients& c) const {
  Matrix out = combination(c.tau);
  out.colwise() += c.m;
  return out;
}

RegressorCoefficients fit_regressors(const Matrix& r, const RegressorBasis& basis) {
  if (!r.allFinite()) throw Error(ErrorCode::NonFiniteInput, "fit_regressors input has non-finite entries");
  return RegressorFit(basis, r.rows(), r.cols()).fit(r);
}

double regularized_objective(const Matrix& outcomes, const RegressorBasis& basis, const Matrix& m_hat_matrix,
                             const Vector& tau, const Vector& m, double nuclear_norm, double lambda) {
  Matrix resid = outcomes - m_hat_matrix;
  resid.colwise() -= m;
  for (std::size_t i = 0; i < basis.masks.size(); ++i) resid -= tau(static_cast<Eigen::Index>(i)) * basis.masks[i];
  return 0.5 * resid.squaredNorm() + lambda * nuclear_norm;
}

// --- alternating minimization ------------------------------------------------

namespace {

KktReport kkt_from_parts(const Matrix& resid, const LowRankFactors& f, const RegressorBasis& basis,
                         const Matrix& outcomes, double lambda) {
  KktReport rep;
  const double scale = std::max(outcomes.norm(), std::numeric_limits<double>::min());
  for (const auto& z : basis.masks) rep.tau_stationarity = std::max(rep.tau_stationarity, std::abs(inner(z, resid)));
  rep.tau_stationarity /= scale;

  Matrix w = resid / lambda;
  if (f.rank() > 0) w -= f.U * f.V.transpose();
  rep.w_left = f.rank() > 0 ? (f.U.transpose() * w).norm() : 0.0;
  rep.w_right = f.rank() > 0 ? (w * f.V).norm() : 0.0;
  rep.w_spectral_excess = std::max(0.0, spectral_norm(w) - 1.0);

  if (basis.include_row_means) {
    // resid = O - M - m1^T - sum tau Z, so (O - M - sum tau Z)1/T - m = resid 1 / T.
    const double row_scale = scale / std::sqrt(static_cast<double>(outcomes.cols()));
    rep.row_mean = resid.rowwise().mean().cwiseAbs().maxCoeff() / row_scale;
  }
  if (f.rank() > 0) rep.v_ones = f.V.colwise().sum().cwiseAbs().maxCoeff();
  return rep;
}

}  // namespace

double KktReport::max_residual() const {
  return std::max({tau_stationarity, w_left, w_right, w_spectral_excess, row_mean});
}

nlohmann::json KktReport::to_json() const {
  return {{"tau_stationarity", tau_stationarity}, {"w_left", w_left},     {"w_right", w_right},
          {"w_spectral_excess", w_spectral_excess}, {"row_mean", row_mean}, {"v_ones", v_ones}};
}

ConvexSolution solve_regularized(const Matrix& outcomes, const RegressorBasis& basis, double lambda,
                                 const SolverOptions& options, const ConvexSolution* warm_start) {
  if (!(lambda > 0.0)) throw Error(ErrorCode::PreconditionViolation, "lambda must be positive");
  if (!outcomes.allFinite()) throw Error(ErrorCode::NonFiniteInput, "outcomes have non-finite entries");
  const RegressorFit fitter(basis, outcomes.rows(), outcomes.cols());

  ConvexSolution sol;
  sol.lambda = lambda;
  if (warm_start != nullptr && warm_start->M_hat.rows() == outcomes.rows() &&
      warm_start->M_hat.cols() == outcomes.cols()) {
    sol.M_hat = warm_start->M_hat;
    sol.svd = warm_start->svd;
  } else {
    sol.M_hat = Matrix::Zero(outcomes.rows(), outcomes.cols());
    sol.svd.U = Matrix::Zero(outcomes.rows(), 0);
    sol.svd.V = Matrix::Zero(outcomes.cols(), 0);
  }
  RegressorCoefficients coef = fitter.fit(outcomes - sol.M_hat);
  Matrix fitted = fitter.fitted(coef);
  double obj = 0.5 * (outcomes - sol.M_hat - fitted).squaredNorm() + lambda * sol.svd.S.sum();
  sol.objective_history.push_back(obj);

  int it = 0;
  for (; it < options.max_iters; ++it) {
    const Matrix target = outcomes - fitted;
    sol.svd = svt_factors(target, lambda, options.rank_threshold);
    sol.M_hat = sol.svd.product();
    coef = fitter.fit(outcomes - sol.M_hat);
    fitted = fitter.fitted(coef);
    const Matrix resid = outcomes - sol.M_hat - fitted;
    const double next = 0.5 * resid.squaredNorm() + lambda * sol.svd.S.sum();
    if (!std::isfinite(next)) throw Error(ErrorCode::NumericalBreakdown, "objective became non-finite");
    sol.objective_history.push_back(next);
    const double rel = (obj - next) / std::max(std::abs(obj), std::numeric_limits<double>::min());
    obj = next;
    if (rel < options.obj_tol) {
      const KktReport rep = kkt_from_parts(resid, sol.svd, basis, outcomes, lambda);
      if (rep.passes(options.kkt_tol)) {
        sol.converged = true;
        ++it;
        break;
      }
    }
  }
  sol.iterations = it;
  sol.tau_hat = coef.tau;
  sol.m_hat = coef.m;
  sol.objective = obj;
  return sol;
}

KktReport kkt_residuals(const ConvexSolution& sol, const Matrix& outcomes, const RegressorBasis& basis) {
  Matrix resid = outcomes - sol.M_hat;
  resid.colwise() -= sol.m_hat;
  for (std::size_t i = 0; i < basis.masks.size(); ++i) resid -= sol.tau_hat(static_cast<Eigen::Index>(i)) * basis.masks[i];
  return kkt_from_parts(resid, sol.svd, basis, outcomes, sol.lambda);
}

// --- lambda tuning -------------------------------------------------------------

double rank_zero_lambda(const Matrix& outcomes, const RegressorBasis& basis) {
  const RegressorFit fitter(basis, outcomes.rows(), outcomes.cols());
  const Matrix resid = outcomes - fitter.fitted(fitter.fit(outcomes));
  return spectral_norm(resid);
}

namespace {

TuneResult tune_impl(const Matrix& outcomes, const RegressorBasis& basis, int target_rank, const SolverOptions& options) {
  if (target_rank < 1 || target_rank > std::min(outcomes.rows(), outcomes.cols())) {
    throw Error(ErrorCode::PreconditionViolation, "target rank must lie in [1, min(n, T)]");
  }
  if (!(options.lambda_shrink > 0.0 && options.lambda_shrink < 1.0)) {
    throw Error(ErrorCode::PreconditionViolation, "lambda_shrink must lie in (0, 1)");
  }
  TuneResult out;
  out.lambda0 = rank_zero_lambda(outcomes, basis);
  const double floor_abs = 1e-12 * std::max(outcomes.norm(), 1e-300);
  if (out.lambda0 <= floor_abs) {
    // Residual after the regressor fit is numerically zero: M = 0 is optimal
    // for every lambda and no positive rank can be reached.
    out.lambda = std::max(out.lambda0, std::max(floor_abs, std::numeric_limits<double>::min()));
    out.solution = solve_regularized(outcomes, basis, out.lambda, options);
    out.steps = 1;
    return out;
  }
  double lambda = out.lambda0;
  const ConvexSolution* warm = nullptr;
  ConvexSolution previous;
  while (true) {
    ConvexSolution sol = solve_regularized(outcomes, basis, lambda, options, warm);
    ++out.steps;
    out.lambda = lambda;
    if (sol.rank() >= target_rank) {
      out.rank_reached = true;
      out.solution = std::move(sol);
      return out;
    }
    const double next = lambda * options.lambda_shrink;
    if (next < options.lambda_floor * out.lambda0) {
      out.solution = std::move(sol);
      return out;
    }
    previous = std::move(sol);
    warm = &previous;
    lambda = next;
  }
}

}  // namespace

TuneResult tune_lambda(const Matrix& outcomes, const RegressorBasis& basis, int target_rank, const SolverOptions& options) {
  TuneResult r = tune_impl(outcomes, basis, target_rank, options);
  if (!r.rank_reached) {
    throw Error(ErrorCode::RankUnreachable, "retained rank " + std::to_string(r.solution.rank()) +
                                                " never reached target " + std::to_string(target_rank));
  }
  return r;
}

TuneResult tune_lambda_best_effort(const Matrix& outcomes, const RegressorBasis& basis, int target_rank,
                                   const SolverOptions& options) {
  return tune_impl(outcomes, basis, target_rank, options);
}

}  // namespace pace
