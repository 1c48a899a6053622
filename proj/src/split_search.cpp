#include "pace/error.hpp"
#include "pace/tree.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace pace {

double estimated_mse(const Matrix& residual, const MaskList& masks) {
  if (masks.empty()) return residual.squaredNorm();
  const auto k = static_cast<Eigen::Index>(masks.size());
  Matrix flat(k, residual.size());
  for (Eigen::Index i = 0; i < k; ++i) {
    flat.row(i) = Eigen::Map<const Eigen::RowVectorXd>(masks[static_cast<std::size_t>(i)].data(), residual.size());
  }
  const Eigen::Map<const Vector> r(residual.data(), residual.size());
  const Vector tau = pinv_solve_psd(flat * flat.transpose(), flat * r);
  return (r - flat.transpose() * tau).squaredNorm();
}

double estimated_mse(const Panel& panel, const Matrix& m_hat_matrix, const Vector& m_hat, const MaskList& masks) {
  Matrix resid = panel.outcomes - m_hat_matrix;
  resid.colwise() -= m_hat;
  return estimated_mse(resid, masks);
}

namespace {

/// Boundary positions b in a sorted value list (s[b-1] < s[b]) eligible as
/// split points, quantile-subsampled when there are more than max_candidates.
std::vector<Eigen::Index> candidate_boundaries(const std::vector<double>& sorted, int max_candidates) {
  std::vector<Eigen::Index> all;
  for (std::size_t b = 1; b < sorted.size(); ++b) {
    if (sorted[b - 1] < sorted[b]) all.push_back(static_cast<Eigen::Index>(b));
  }
  if (static_cast<int>(all.size()) <= max_candidates) return all;
  std::vector<Eigen::Index> picked;
  const double n = static_cast<double>(sorted.size());
  for (int g = 1; g <= max_candidates; ++g) {
    const double target = g * n / (max_candidates + 1);
    auto it = std::lower_bound(all.begin(), all.end(), target,
                               [](Eigen::Index b, double v) { return static_cast<double>(b) < v; });
    if (it == all.end()) --it;
    if (picked.empty() || picked.back() != *it) picked.push_back(*it);
  }
  return picked;
}

struct Task {
  int leaf;
  std::size_t covariate;
};

/// Observations (flat indices) of one leaf of the split treatment.
struct LeafData {
  int leaf = 0;
  std::vector<Eigen::Index> entries;  // flat (column-major) indices
  long treated = 0;
};

struct Context {
  const Panel& panel;
  const TreatmentForest& forest;
  std::size_t treatment;
  const SplitConstraints& constraints;
  Matrix residual;
  ClusterMasks current;
  std::vector<LeafData> leaves;
  std::vector<Task> tasks;
};

std::vector<std::size_t> allowed_covariates(const TreatmentTree& tree, int leaf, std::size_t p,
                                            const SplitConstraints& c) {
  std::vector<std::size_t> all(p);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (!c.fair_split_pi) return all;
  const auto window = static_cast<std::size_t>(std::ceil(*c.fair_split_pi * static_cast<double>(p)));
  const auto ancestors = tree.ancestor_covariates(leaf);
  if (ancestors.size() < window) return all;
  std::vector<bool> used(p, false);
  for (std::size_t a = 0; a < window; ++a) used[ancestors[a]] = true;
  std::vector<std::size_t> forced;
  for (std::size_t j = 0; j < p; ++j) {
    if (!used[j]) forced.push_back(j);
  }
  return forced.empty() ? all : forced;
}

Context make_context(const Panel& panel, const Matrix& m_hat_matrix, const Vector& m_hat,
                     const TreatmentForest& forest, std::size_t treatment, const SplitConstraints& constraints) {
  constraints.check();
  if (treatment >= forest.num_treatments()) throw Error(ErrorCode::PreconditionViolation, "treatment index out of range");
  Context ctx{panel, forest, treatment, constraints, panel.outcomes - m_hat_matrix, {}, {}, {}};
  ctx.residual.colwise() -= m_hat;
  ctx.current = cluster_treatment_masks(panel, forest);

  const Eigen::MatrixXi& assign = forest.assignment[treatment];
  const Matrix& w = panel.treatments[treatment];
  const int leaves = forest.leaf_count(treatment);
  ctx.leaves.resize(static_cast<std::size_t>(leaves));
  for (int j = 0; j < leaves; ++j) ctx.leaves[static_cast<std::size_t>(j)].leaf = j;
  for (Eigen::Index idx = 0; idx < assign.size(); ++idx) {
    LeafData& ld = ctx.leaves[static_cast<std::size_t>(assign(idx))];
    ld.entries.push_back(idx);
    if (w(idx) == 1.0) ++ld.treated;
  }
  for (int j = 0; j < leaves; ++j) {
    if (ctx.leaves[static_cast<std::size_t>(j)].treated < 2L * constraints.min_treated_per_side) continue;
    for (std::size_t c : allowed_covariates(forest.trees[treatment], j, panel.num_covariates(), constraints)) {
      ctx.tasks.push_back({j, c});
    }
  }
  return ctx;
}

/// Sorted entries of a leaf by covariate value and the valid boundaries.
struct Sweep {
  std::vector<Eigen::Index> order;
  std::vector<double> sorted;
  std::vector<Eigen::Index> valid;      // subsampled boundary positions passing validity
  std::vector<Eigen::Index> all_valid;  // every valid boundary position
};

Sweep prepare_sweep(const Context& ctx, const Task& task) {
  const LeafData& ld = ctx.leaves[static_cast<std::size_t>(task.leaf)];
  const Matrix& x = ctx.panel.covariates[task.covariate];
  const Matrix& w = ctx.panel.treatments[ctx.treatment];
  Sweep s;
  s.order = ld.entries;
  std::stable_sort(s.order.begin(), s.order.end(), [&](Eigen::Index a, Eigen::Index b) { return x(a) < x(b); });
  s.sorted.reserve(s.order.size());
  for (auto idx : s.order) s.sorted.push_back(x(idx));

  std::vector<long> treated_prefix(s.order.size() + 1, 0);
  for (std::size_t i = 0; i < s.order.size(); ++i) {
    treated_prefix[i + 1] = treated_prefix[i] + (w(s.order[i]) == 1.0 ? 1 : 0);
  }
  const double n = static_cast<double>(s.order.size());
  const double min_side = ctx.constraints.alpha * n;
  auto is_valid = [&](Eigen::Index b) {
    const double left = static_cast<double>(b);
    const long tl = treated_prefix[static_cast<std::size_t>(b)];
    const long tr = treated_prefix.back() - tl;
    if (left < min_side || n - left < min_side) return false;
    return tl >= ctx.constraints.min_treated_per_side && tr >= ctx.constraints.min_treated_per_side;
  };
  for (Eigen::Index b : candidate_boundaries(s.sorted, ctx.constraints.max_candidates)) {
    if (is_valid(b)) s.valid.push_back(b);
  }
  for (Eigen::Index b : candidate_boundaries(s.sorted, std::numeric_limits<int>::max())) {
    if (is_valid(b)) s.all_valid.push_back(b);
  }
  return s;
}

/// Valid boundaries strictly between the coarse neighbours of `best` that
/// the coarse pass skipped.
std::vector<Eigen::Index> refinement_window(const Sweep& s, Eigen::Index best) {
  if (s.all_valid.size() == s.valid.size()) return {};
  auto it = std::lower_bound(s.valid.begin(), s.valid.end(), best);
  const Eigen::Index lo = it == s.valid.begin() ? 0 : *std::prev(it);
  const Eigen::Index hi = std::next(it) == s.valid.end() ? std::numeric_limits<Eigen::Index>::max() : *std::next(it);
  std::vector<Eigen::Index> out;
  for (Eigen::Index b : s.all_valid) {
    if (b > lo && b < hi && b != best) out.push_back(b);
  }
  return out;
}

double threshold_at(const Sweep& s, Eigen::Index b) {
  return 0.5 * (s.sorted[static_cast<std::size_t>(b) - 1] + s.sorted[static_cast<std::size_t>(b)]);
}

bool enough_gain(double current, double best, double residual_sq, double min_gain) {
  // Gains at the round-off level of ||R||^2 never count as improvements.
  return current - best > min_gain * current + 1e-13 * residual_sq;
}

struct TaskResult {
  std::optional<SplitCandidate> best;
  std::size_t evaluated = 0;
  std::vector<SplitCandidate> recorded;
};

void offer(TaskResult& r, const SplitCandidate& c, bool record) {
  ++r.evaluated;
  if (record) r.recorded.push_back(c);
  if (!r.best || c.est_mse < r.best->est_mse || (c.est_mse == r.best->est_mse && c.threshold < r.best->threshold)) {
    r.best = c;
  }
}

SplitSearchResult reduce(const Context& ctx, std::vector<TaskResult>& results, bool record) {
  SplitSearchResult out;
  out.current_mse = estimated_mse(ctx.residual, ctx.current.masks);
  std::optional<SplitCandidate> best;
  for (auto& r : results) {
    out.num_evaluated += r.evaluated;
    if (record) {
      out.evaluated.insert(out.evaluated.end(), r.recorded.begin(), r.recorded.end());
    }
    if (r.best && (!best || r.best->est_mse < best->est_mse)) best = r.best;
  }
  if (best && enough_gain(out.current_mse, best->est_mse, ctx.residual.squaredNorm(), ctx.constraints.min_mse_gain)) {
    out.best = best;
  }
  return out;
}

int self_index(const Context& ctx, int leaf) {
  for (std::size_t m = 0; m < ctx.current.origin.size(); ++m) {
    if (ctx.current.origin[m].first == ctx.treatment && ctx.current.origin[m].second == leaf) return static_cast<int>(m);
  }
  return -1;
}

// --- incremental kernel -------------------------------------------------------

/// Projection data for the masks that stay fixed while one leaf is split.
struct OtherMasks {
  Matrix gram_pinv;
  Vector rhs;
  double projected = 0.0;  // rhs^T G^+ rhs
};

/// b^T G^+ b for a 2x2 symmetric PSD G; eigenvalues below tol are dropped.
double quadratic_pinv_2x2(double a, double b, double c, double u, double v, double tol) {
  const double mean = 0.5 * (a + c);
  const double half_diff = 0.5 * (a - c);
  const double rad = std::hypot(half_diff, b);
  const double l1 = mean + rad;
  const double l2 = mean - rad;
  double e1x = 1.0, e1y = 0.0;
  if (rad > 0.0) {
    // Eigenvector of l1: (b, l1 - a) or (l1 - c, b), whichever is better conditioned.
    if (half_diff >= 0.0) {
      e1x = l1 - c;
      e1y = b;
    } else {
      e1x = b;
      e1y = l1 - a;
    }
    const double norm = std::hypot(e1x, e1y);
    e1x /= norm;
    e1y /= norm;
  }
  const double e2x = -e1y;
  const double e2y = e1x;
  double out = 0.0;
  if (l1 > tol) out += std::pow(e1x * u + e1y * v, 2) / l1;
  if (l2 > tol) out += std::pow(e2x * u + e2y * v, 2) / l2;
  return out;
}

TaskResult run_task_fast(const Context& ctx, const Task& task, const OtherMasks& others,
                         const std::vector<std::vector<int>>& membership, bool record) {
  TaskResult result;
  const Sweep sweep = prepare_sweep(ctx, task);
  if (sweep.valid.empty()) return result;
  const Matrix& w = ctx.panel.treatments[ctx.treatment];
  const Eigen::Index ko = others.rhs.size();

  double n_total = 0.0, s_total = 0.0;
  Vector g_total = Vector::Zero(ko);
  for (auto idx : sweep.order) {
    if (w(idx) != 1.0) continue;
    n_total += 1.0;
    s_total += ctx.residual(idx);
    for (int o : membership[static_cast<std::size_t>(idx)]) g_total(o) += 1.0;
  }

  Vector u_left(ko), u_right(ko);
  const double resid_sq = ctx.residual.squaredNorm();
  std::optional<Eigen::Index> best_b;
  auto sweep_over = [&](const std::vector<Eigen::Index>& boundaries) {
    double n_left = 0.0, s_left = 0.0;
    Vector g_left = Vector::Zero(ko);
    std::size_t pos = 0;
    for (Eigen::Index b : boundaries) {
      for (; pos < static_cast<std::size_t>(b); ++pos) {
        const Eigen::Index idx = sweep.order[pos];
        if (w(idx) != 1.0) continue;
        n_left += 1.0;
        s_left += ctx.residual(idx);
        for (int o : membership[static_cast<std::size_t>(idx)]) g_left(o) += 1.0;
      }
      const double n_right = n_total - n_left;
      const double s_right = s_total - s_left;
      double a = n_left, c = n_right, off = 0.0, bl = s_left, br = s_right;
      if (ko > 0) {
        const Vector g_right = g_total - g_left;
        u_left.noalias() = others.gram_pinv * g_left;
        u_right.noalias() = others.gram_pinv * g_right;
        a -= g_left.dot(u_left);
        c -= g_right.dot(u_right);
        off = -g_left.dot(u_right);
        bl -= u_left.dot(others.rhs);
        br -= u_right.dot(others.rhs);
      }
      const double extra = quadratic_pinv_2x2(a, off, c, bl, br, 1e-10 * std::max(n_left, n_right));
      SplitCandidate cand;
      cand.treatment = ctx.treatment;
      cand.cluster = task.leaf;
      cand.covariate = task.covariate;
      cand.threshold = threshold_at(sweep, b);
      cand.est_mse = std::max(0.0, resid_sq - others.projected - extra);
      const auto before = result.best;
      offer(result, cand, record);
      if (!before || result.best->threshold != before->threshold) best_b = b;
    }
  };
  sweep_over(sweep.valid);
  if (best_b) sweep_over(refinement_window(sweep, *best_b));
  return result;
}

}  // namespace

std::vector<double> candidate_thresholds(std::vector<double> values, int max_candidates) {
  std::sort(values.begin(), values.end());
  std::vector<double> out;
  for (Eigen::Index b : candidate_boundaries(values, max_candidates)) {
    out.push_back(0.5 * (values[static_cast<std::size_t>(b) - 1] + values[static_cast<std::size_t>(b)]));
  }
  return out;
}

SplitSearchResult find_best_split(const Panel& panel, const Matrix& m_hat_matrix, const Vector& m_hat,
                                  const TreatmentForest& forest, std::size_t treatment,
                                  const SplitConstraints& constraints, bool record_candidates) {
  const Context ctx = make_context(panel, m_hat_matrix, m_hat, forest, treatment, constraints);
  const std::size_t k = ctx.current.masks.size();

  // Gram matrix and right-hand side of the current mask set.
  Matrix gram = Matrix::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  Vector rhs(static_cast<Eigen::Index>(k));
  for (std::size_t a = 0; a < k; ++a) {
    rhs(static_cast<Eigen::Index>(a)) = inner(ctx.current.masks[a], ctx.residual);
    for (std::size_t b = a; b < k; ++b) {
      const double g = inner(ctx.current.masks[a], ctx.current.masks[b]);
      gram(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = g;
      gram(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = g;
    }
  }

  // Current-mask membership of every treated entry through other treatments.
  std::map<std::pair<std::size_t, int>, int> lookup;
  for (std::size_t m = 0; m < k; ++m) lookup[ctx.current.origin[m]] = static_cast<int>(m);
  std::vector<std::vector<int>> full_membership(static_cast<std::size_t>(panel.outcomes.size()));
  for (std::size_t i = 0; i < panel.num_treatments(); ++i) {
    if (i == treatment) continue;
    const Matrix& wi = panel.treatments[i];
    for (Eigen::Index idx = 0; idx < wi.size(); ++idx) {
      if (wi(idx) == 1.0) full_membership[static_cast<std::size_t>(idx)].push_back(lookup.at({i, forest.assignment[i](idx)}));
    }
  }

  const int leaves = forest.leaf_count(treatment);
  std::vector<OtherMasks> others(static_cast<std::size_t>(leaves));
  std::vector<std::vector<std::vector<int>>> membership(static_cast<std::size_t>(leaves));
  std::vector<bool> needed(static_cast<std::size_t>(leaves), false);
  for (const Task& t : ctx.tasks) needed[static_cast<std::size_t>(t.leaf)] = true;
  for (int j = 0; j < leaves; ++j) {
    if (!needed[static_cast<std::size_t>(j)]) continue;
    const int self = self_index(ctx, j);
    std::vector<Eigen::Index> keep;
    for (std::size_t m = 0; m < k; ++m) {
      if (static_cast<int>(m) != self) keep.push_back(static_cast<Eigen::Index>(m));
    }
    OtherMasks& om = others[static_cast<std::size_t>(j)];
    const auto ko = static_cast<Eigen::Index>(keep.size());
    Matrix sub(ko, ko);
    om.rhs.resize(ko);
    for (Eigen::Index a = 0; a < ko; ++a) {
      om.rhs(a) = rhs(keep[static_cast<std::size_t>(a)]);
      for (Eigen::Index b = 0; b < ko; ++b) sub(a, b) = gram(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(b)]);
    }
    om.gram_pinv = pinv_psd(sub);
    om.projected = ko > 0 ? om.rhs.dot(om.gram_pinv * om.rhs) : 0.0;
    auto& mem = membership[static_cast<std::size_t>(j)];
    mem.resize(full_membership.size());
    for (Eigen::Index idx : ctx.leaves[static_cast<std::size_t>(j)].entries) {
      for (int m : full_membership[static_cast<std::size_t>(idx)]) {
        mem[static_cast<std::size_t>(idx)].push_back(self >= 0 && m > self ? m - 1 : m);
      }
    }
  }

  std::vector<TaskResult> results(ctx.tasks.size());
  const auto ntasks = static_cast<long>(ctx.tasks.size());
#pragma omp parallel for schedule(dynamic) if (ntasks > 1)
  for (long t = 0; t < ntasks; ++t) {
    const Task& task = ctx.tasks[static_cast<std::size_t>(t)];
    results[static_cast<std::size_t>(t)] = run_task_fast(ctx, task, others[static_cast<std::size_t>(task.leaf)],
                                                         membership[static_cast<std::size_t>(task.leaf)], record_candidates);
  }
  return reduce(ctx, results, record_candidates);
}

SplitSearchResult find_best_split_reference(const Panel& panel, const Matrix& m_hat_matrix, const Vector& m_hat,
                                            const TreatmentForest& forest, std::size_t treatment,
                                            const SplitConstraints& constraints, bool record_candidates) {
  const Context ctx = make_context(panel, m_hat_matrix, m_hat, forest, treatment, constraints);
  const Matrix& w = panel.treatments[treatment];
  std::vector<TaskResult> results(ctx.tasks.size());
  for (std::size_t t = 0; t < ctx.tasks.size(); ++t) {
    const Task& task = ctx.tasks[t];
    const Sweep sweep = prepare_sweep(ctx, task);
    const int self = self_index(ctx, task.leaf);
    MaskList base;
    for (std::size_t m = 0; m < ctx.current.masks.size(); ++m) {
      if (static_cast<int>(m) != self) base.push_back(ctx.current.masks[m]);
    }
    const Matrix cluster = forest.cluster_mask(treatment, task.leaf).cwiseProduct(w);
    const Matrix& x = panel.covariates[task.covariate];
    std::optional<Eigen::Index> best_b;
    auto evaluate = [&](const std::vector<Eigen::Index>& boundaries) {
      for (Eigen::Index b : boundaries) {
        const double thr = threshold_at(sweep, b);
        MaskList masks = base;
        masks.push_back(cluster.cwiseProduct((x.array() <= thr).cast<double>().matrix()));
        masks.push_back(cluster.cwiseProduct((x.array() > thr).cast<double>().matrix()));
        SplitCandidate cand;
        cand.treatment = treatment;
        cand.cluster = task.leaf;
        cand.covariate = task.covariate;
        cand.threshold = thr;
        cand.est_mse = estimated_mse(ctx.residual, masks);
        const auto before = results[t].best;
        offer(results[t], cand, record_candidates);
        if (!before || results[t].best->threshold != before->threshold) best_b = b;
      }
    };
    evaluate(sweep.valid);
    if (best_b) evaluate(refinement_window(sweep, *best_b));
  }
  return reduce(ctx, results, record_candidates);
}

}  // namespace pace
