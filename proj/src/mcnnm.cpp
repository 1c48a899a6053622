#include "pace/error.hpp"
#include "pace/synthetic.hpp"

#include <cmath>

namespace pace {

namespace {

struct ImputeState {
  Matrix M;
  Vector m;
  Eigen::Index rank = 0;
  int iterations = 0;
};

/// Row means over observed entries; rows with none observed get the global
/// observed mean.
Vector observed_row_means(const Matrix& o, const Matrix& observed) {
  const double global = o.cwiseProduct(observed).sum() / observed.sum();
  Vector m(o.rows());
  for (Eigen::Index z = 0; z < o.rows(); ++z) {
    const double cnt = observed.row(z).sum();
    m(z) = cnt > 0.0 ? o.row(z).dot(observed.row(z)) / cnt : global;
  }
  return m;
}

/// Soft-impute iterations at fixed lambda, warm-started from `state`. Each
/// step solves the fully observed problem exactly: row means of the filled
/// matrix, then SVT of its row-centred part. Stops on the relative change of
/// the completed matrix.
void soft_impute(const Matrix& o, const Matrix& observed, double lambda, const McnnmOptions& opt, ImputeState& state) {
  const Matrix missing = Matrix::Ones(o.rows(), o.cols()) - observed;
  Matrix fill = state.M;
  fill.colwise() += state.m;
  for (int it = 0; it < opt.max_iters; ++it) {
    const Matrix f = o.cwiseProduct(observed) + fill.cwiseProduct(missing);
    state.m = f.rowwise().mean();
    const LowRankFactors lr = svt_factors(row_center(f), lambda, opt.rank_threshold);
    state.M = lr.product();
    state.rank = lr.rank();
    ++state.iterations;
    Matrix next = state.M;
    next.colwise() += state.m;
    const double change = (next - fill).norm();
    fill = std::move(next);
    if (change <= opt.tol * std::max(fill.norm(), 1e-300)) break;
  }
}

}  // namespace

McnnmResult mcnnm(const Matrix& outcomes, const Matrix& treated_mask, const McnnmOptions& options) {
  if (outcomes.rows() != treated_mask.rows() || outcomes.cols() != treated_mask.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "outcomes and treated mask differ in shape");
  }
  if (!all_finite(outcomes)) throw Error(ErrorCode::NonFiniteInput, "outcomes contain non-finite values");
  const double treated = treated_mask.sum();
  if (treated == 0.0) throw Error(ErrorCode::NoTreatedObservations, "no treated entries");
  if (treated == static_cast<double>(treated_mask.size())) {
    throw Error(ErrorCode::NoControlEntries, "every entry is treated; nothing to complete from");
  }
  if (options.target_rank < 1 || options.target_rank > std::min(outcomes.rows(), outcomes.cols())) {
    throw Error(ErrorCode::PreconditionViolation, "target rank must lie in [1, min(n, T)]");
  }
  const Matrix observed = Matrix::Ones(outcomes.rows(), outcomes.cols()) - treated_mask;

  ImputeState state;
  state.m = observed_row_means(outcomes, observed);
  state.M = Matrix::Zero(outcomes.rows(), outcomes.cols());
  Matrix r0 = outcomes;
  r0.colwise() -= state.m;
  const double lambda0 = spectral_norm(r0.cwiseProduct(observed));

  McnnmResult out;
  double lambda = lambda0;
  if (lambda0 > 1e-12 * outcomes.norm()) {
    while (true) {
      lambda *= options.lambda_shrink;
      soft_impute(outcomes, observed, lambda, options, state);
      if (state.rank >= options.target_rank) {
        out.rank_reached = true;
        break;
      }
      if (lambda < options.lambda_floor * lambda0) break;
    }
  }
  out.lambda = lambda;
  out.rank = state.rank;
  out.iterations = state.iterations;
  out.completed = state.M;
  out.completed.colwise() += state.m;
  out.effect = (outcomes - out.completed).cwiseProduct(treated_mask);
  return out;
}

}  // namespace pace
