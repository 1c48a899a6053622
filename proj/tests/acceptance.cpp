// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
// Usage: acceptance [criterion numbers...]   (default: all ten)

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pace/benchmark.hpp"
#include "pace/theory.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

using namespace pace;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

int hardware_jobs() { return std::max(1, omp_get_num_procs()); }

SolverOptions tight_solver() {
  SolverOptions s;
  s.obj_tol = 1e-14;
  s.kkt_tol = 1e-9;
  s.max_iters = 5000;
  return s;
}

// --- 1, 2: solver optimality and V^T 1 = 0 ---------------------------------------------

struct SolverRun {
  double kkt = 0.0;
  double objective_gap = 0.0;
  double colsum_over_sqrt_t = 0.0;
  double seconds = 0.0;
  int unconverged = 0;
  int instances = 0;
};

const SolverRun& solver_run() {
  static const SolverRun run = [] {
    SolverRun r;
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> dim(8, 40), masks(1, 4);
    double solver_seconds = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const Eigen::Index n = dim(rng), T = dim(rng);
      const int k = masks(rng);
      Matrix o = fixture::low_rank(rng, n, T, 2) + 0.3 * oracle::random_matrix(rng, n, T);
      RegressorBasis basis;
      for (int i = 0; i < k; ++i) {
        Matrix z = oracle::random_mask(rng, n, T, 0.3);
        z /= z.norm();
        o += (1.0 + i) * z;
        basis.masks.push_back(z);
      }
      const auto start = std::chrono::steady_clock::now();
      const ConvexSolution sol = tune_lambda_best_effort(o, basis, 3).solution;
      solver_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      ++r.instances;
      if (!sol.converged) ++r.unconverged;
      r.kkt = std::max(r.kkt, kkt_residuals(sol, o, basis).max_residual());
      const double reference = oracle::prox_gradient_objective(o, basis.masks, sol.lambda, 20000, 1e-12);
      r.objective_gap = std::max(r.objective_gap, std::abs(sol.objective - reference) / std::max(1.0, std::abs(reference)));
      if (sol.converged && sol.rank() > 0) {
        const double colsum = sol.svd.V.colwise().sum().cwiseAbs().maxCoeff();
        r.colsum_over_sqrt_t = std::max(r.colsum_over_sqrt_t, colsum / std::sqrt(static_cast<double>(T)));
      }
    }
    r.seconds = solver_seconds;
    return r;
  }();
  return run;
}

Outcome criterion_solver() {
  const SolverRun& r = solver_run();
  Outcome out;
  out.passed = r.kkt <= 1e-5 && r.objective_gap <= 1e-6 && r.unconverged == 0 && r.seconds <= 120.0;
  out.detail = std::to_string(r.instances) + " instances, max KKT " + fmt(r.kkt) + " (<= 1e-5), max objective gap " +
               fmt(r.objective_gap) + " (<= 1e-6), unconverged " + std::to_string(r.unconverged) + ", solver " +
               fmt(r.seconds) + " s (<= 120)";
  return out;
}

Outcome criterion_v_orthogonal() {
  const SolverRun& r = solver_run();
  Outcome out;
  out.passed = r.colsum_over_sqrt_t <= 1e-6;
  out.detail = "max |column sum of V| / sqrt(T) = " + fmt(r.colsum_over_sqrt_t) + " (<= 1e-6)";
  return out;
}

// --- 3: error decomposition identity -----------------------------------------------------

Outcome criterion_decomposition() {
  double worst = 0.0, control = std::numeric_limits<double>::infinity();
  int kkt_failures = 0, control_flagged = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    GeneratorConfig cfg;
    cfg.alpha = 0.3;
    cfg.seed = derive_seed(3, 0, static_cast<std::uint64_t>(trial));
    cfg.fully_synthetic = FullySyntheticConfig{};
    cfg.fully_synthetic->n = 30;
    cfg.fully_synthetic->T = 30;
    const Instance inst = generate_instance(cfg);
    EstimateOptions opt;
    opt.build.max_leaves = 2;
    opt.build.target_rank = 2;
    opt.build.solver = tight_solver();
    const EffectEstimate est = estimate_effects(inst.panel, opt);
    const DecompositionReport rep = decomposition_report(inst, est);
    if (!rep.kkt_passed) ++kkt_failures;
    worst = std::max(worst, rep.residual);

    SolverOptions rough;
    rough.max_iters = 1;
    EffectEstimate bad = est;
    bad.solution = solve_regularized(inst.panel.outcomes, est.masks.basis(), est.solution.lambda, rough);
    bad.debias = debias(bad.solution, bad.masks);
    const DecompositionReport ctl = decomposition_report(inst, bad);
    control = std::min(control, ctl.residual);
    if (!ctl.kkt_passed) ++control_flagged;
  }
  Outcome out;
  out.passed = worst <= 1e-5 && kkt_failures == 0 && control > 1e-3;
  out.detail = std::to_string(trials) + " instances, max residual " + fmt(worst) + " (<= 1e-5), KKT failures " +
               std::to_string(kkt_failures) + ", min unconverged-control residual " + fmt(control) +
               " (> 1e-3), controls failing KKT " + std::to_string(control_flagged) + "/" + std::to_string(trials);
  return out;
}

// --- 4: exact recovery and de-biasing -----------------------------------------------------

struct RecoveryTrial {
  double truth = 0.0;
  double debiased = 0.0;
  double raw = 0.0;
};

RecoveryTrial recovery_trial(std::uint64_t seed, double noise_fraction) {
  std::mt19937_64 rng(seed);
  const Eigen::Index n = 60, T = 60;
  const Matrix m_star = fixture::low_rank(rng, n, T, 2);
  const Matrix w = fixture::block_treatment(n, T);
  const double tau = 2.0;
  const double sigma = noise_fraction * m_star.norm() / std::sqrt(static_cast<double>(n * T));
  const Matrix o = m_star + tau * w + sigma * oracle::random_matrix(rng, n, T);
  const Panel panel = fixture::make_panel(o, {fixture::uniform(rng, n, T)}, {w});
  EstimateOptions opt;
  opt.build.max_leaves = 1;
  opt.build.target_rank = 2;
  opt.build.solver = tight_solver();
  const EffectEstimate est = estimate_effects(panel, opt);
  RecoveryTrial r;
  r.truth = tau;
  r.debiased = est.debias.tau_d(0);
  r.raw = est.solution.tau_hat(0) / est.masks.frob_norms(0);
  return r;
}

Outcome criterion_recovery() {
  const RecoveryTrial exact = recovery_trial(404, 0.0);
  const double rel = std::abs(exact.debiased - exact.truth) / std::abs(exact.truth);
  int wins = 0;
  const int seeds = 50;
  for (int s = 0; s < seeds; ++s) {
    const RecoveryTrial t = recovery_trial(derive_seed(4, 1, static_cast<std::uint64_t>(s)), 0.01);
    if (std::abs(t.debiased - t.truth) < std::abs(t.raw - t.truth)) ++wins;
  }
  Outcome out;
  out.passed = rel <= 1e-3 && wins >= 40;
  out.detail = "noiseless relative error " + fmt(rel) + " (<= 1e-3), de-biased beats raw on " + std::to_string(wins) +
               "/" + std::to_string(seeds) + " seeds at 1% noise (>= 40)";
  return out;
}

// --- 5: tree fidelity -----------------------------------------------------------------------

Panel step_panel(std::mt19937_64& rng, Eigen::Index n, Eigen::Index T, double a, double b) {
  const Matrix x0 = fixture::uniform(rng, n, T), x1 = fixture::uniform(rng, n, T);
  const Matrix w = fixture::block_treatment(n, T);
  const Matrix effect = (x0.array() <= 0.5).select(Matrix::Constant(n, T, a), Matrix::Constant(n, T, b));
  return fixture::make_panel(fixture::low_rank(rng, n, T, 1) + effect.cwiseProduct(w), {x0, x1}, {w});
}

Outcome criterion_tree() {
  std::mt19937_64 rng(505);
  const Panel step = step_panel(rng, 40, 40, 2.0, -1.0);
  const EffectEstimate est = estimate_effects(step, 2, 1);
  const TreatmentTree& tree = est.forest.trees[0];
  double threshold_err = std::numeric_limits<double>::infinity(), level_err = threshold_err;
  if (tree.leaf_count() == 2 && tree.nodes()[0].covariate == 0) {
    threshold_err = std::abs(tree.nodes()[0].threshold - 0.5);
    Vector lo(2), hi(2);
    lo << 0.1, 0.5;
    hi << 0.9, 0.5;
    level_err = std::max(std::abs(predict_effect(est, 0, lo) - 2.0), std::abs(predict_effect(est, 0, hi) + 1.0));
  }
  const Panel flat = step_panel(rng, 40, 40, 3.0, 3.0);
  const int flat_leaves = estimate_effects(flat, 4, 6).forest.leaf_count(0);
  Outcome out;
  out.passed = threshold_err <= 0.05 && level_err <= 1e-2 && flat_leaves == 1;
  out.detail = "threshold error " + fmt(threshold_err) + " (<= 0.05), leaf level error " + fmt(level_err) +
               " (<= 1e-2), homogeneous leaves " + std::to_string(flat_leaves) + " (== 1)";
  return out;
}

// --- 6: leaf diameters ----------------------------------------------------------------------------

Outcome criterion_diameters() {
  std::mt19937_64 rng(606);
  const Eigen::Index n = 100, T = 100;
  const Matrix x0 = fixture::uniform(rng, n, T), x1 = fixture::uniform(rng, n, T);
  const Matrix w = oracle::random_mask(rng, n, T, 0.5);
  const Matrix o = fixture::low_rank(rng, n, T, 1) + (4.0 * (x0 + x1)).cwiseProduct(w) + 0.1 * oracle::random_matrix(rng, n, T);
  const Panel panel = fixture::make_panel(o, {x0, x1}, {w});
  BuildOptions opt;
  opt.target_rank = 1;
  const std::vector<int> sizes{2, 4, 8, 16, 32};
  const DiameterReport rep = diameter_curve(panel, 0, sizes, opt);
  int inversions = 0;
  std::ostringstream curve;
  for (std::size_t k = 0; k < rep.bound_curve.size(); ++k) {
    curve << (k ? " " : "") << rep.bound_curve[k].first << ":" << fmt(rep.bound_curve[k].second);
    if (k > 0 && rep.bound_curve[k].second > rep.bound_curve[k - 1].second) ++inversions;
  }
  Outcome out;
  out.passed = rep.bound_curve.size() == sizes.size() && inversions <= 1;
  out.detail = "max diameter by leaves [" + curve.str() + "], inversions " + std::to_string(inversions) + " (<= 1)";
  return out;
}

// --- 7: convergence trend ----------------------------------------------------------------------------

Outcome criterion_convergence() {
  ConvergenceOptions opt;
  opt.master_seed = 707;
  opt.seeds = 20;
  opt.jobs = hardware_jobs();
  const auto start = std::chrono::steady_clock::now();
  const ConvergenceTable table = convergence_trend({40, 80, 160}, opt);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ostringstream rows;
  int failures = 0;
  for (const auto& r : table.rows) {
    rows << " n=" << r.n << ":" << fmt(r.mean_abs_error);
    failures += r.failures;
  }
  Outcome out;
  out.passed = table.decreasing && failures == 0 && seconds <= 300.0;
  out.detail = "mean |tau_d - tau~*|" + rows.str() + ", strictly decreasing " + (table.decreasing ? "yes" : "no") +
               ", failed runs " + std::to_string(failures) + ", " + fmt(seconds) + " s (<= 300)";
  return out;
}

// --- 8: generator contracts ----------------------------------------------------------------------------

Outcome criterion_generator() {
  int violations = 0;
  double worst_ratio = 0.0;
  std::mt19937_64 base(808);
  for (int trial = 0; trial < 40; ++trial) {
    const Eigen::Index n = 10 + static_cast<Eigen::Index>(base() % 40), T = 5 + static_cast<Eigen::Index>(base() % 40);
    const double alpha = 0.05 + 0.95 * fixture::uniform(base, 1, 1)(0, 0);

    Rng rng(base());
    const Matrix w = gen_nonadaptive_pattern(n, T, alpha, rng);
    const long expected_units = std::max(1L, std::lround(alpha * static_cast<double>(n)));
    long treated_units = 0;
    for (Eigen::Index z = 0; z < n; ++z) {
      int runs = 0;
      for (Eigen::Index t = 0; t < T; ++t)
        if (w(z, t) == 1.0 && (t == 0 || w(z, t - 1) == 0.0)) ++runs;
      if (runs > 1) ++violations;
      if (runs == 1) ++treated_units;
    }
    if (treated_units != expected_units) ++violations;

    const Matrix baseline = fixture::low_rank(base, n, T, 2).array() + 10.0;
    const Matrix raw = fixture::uniform(base, n, T) + fixture::uniform(base, n, T);
    const AdaptivePattern ap = gen_adaptive_pattern(baseline, raw, alpha);
    const long per_period = std::max(1L, std::lround(alpha / 2.0 * static_cast<double>(n)));
    for (Eigen::Index t = 0; t < T; ++t) {
      const long count = static_cast<long>(ap.W.col(t).sum());
      if (t < 2 ? count != 0 : count != per_period) ++violations;
    }

    for (EffectSign sign : {EffectSign::Added, EffectSign::Subtracted}) {
      const AppliedEffect e = apply_effect(baseline, w, raw, sign, 0.2);
      double treated_abs = 0.0;
      for (Eigen::Index t = 0; t < T; ++t)
        for (Eigen::Index z = 0; z < n; ++z)
          if (w(z, t) == 1.0) treated_abs += std::abs(e.effect(z, t));
      const double ratio = (treated_abs / w.sum()) / baseline.cwiseAbs().mean();
      worst_ratio = std::max(worst_ratio, std::abs(ratio - 0.2));
      const Matrix untreated = (e.outcomes - baseline).cwiseProduct((1.0 - w.array()).matrix());
      if (untreated.cwiseAbs().maxCoeff() != 0.0) ++violations;
    }
  }
  Outcome out;
  out.passed = violations == 0 && worst_ratio <= 1e-12;
  out.detail = "40 random shapes: contract violations " + std::to_string(violations) + ", max |ratio - 0.2| " +
               fmt(worst_ratio) + " (<= 1e-12)";
  return out;
}

// --- 9: PaCE vs MCNNM ---------------------------------------------------------------------------------

Outcome criterion_benchmark() {
  BenchmarkGrid grid;
  grid.alphas = {0.25};
  grid.adaptive = {false};
  grid.effect_ops = {EffectOp::Random};
  grid.instances_per_cell = 40;
  grid.master_seed = 909;
  grid.fully_synthetic = FullySyntheticConfig{};
  BenchmarkOptions opt;
  opt.jobs = hardware_jobs();
  const auto start = std::chrono::steady_clock::now();
  const auto records = run_benchmark(grid, opt);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::map<std::string, std::map<std::string, double>> score;
  for (const auto& r : records) score[r.instance_id][r.method] = r.nmae_treated;
  int wins = 0, compared = 0;
  for (const auto& [id, m] : score) {
    ++compared;
    const double pace = m.count("pace") ? m.at("pace") : std::nan("");
    const double mcnnm = m.count("mcnnm") ? m.at("mcnnm") : std::nan("");
    if (std::isfinite(pace) && (!std::isfinite(mcnnm) || pace < mcnnm)) ++wins;
  }
  Outcome out;
  out.passed = compared == 40 && wins >= 28 && seconds <= 600.0;
  out.detail = "PaCE lower treated nMAE on " + std::to_string(wins) + "/" + std::to_string(compared) +
               " instances (>= 28), " + fmt(seconds) + " s (<= 600)";
  return out;
}

// --- 10: determinism ------------------------------------------------------------------------------------

Outcome criterion_determinism() {
  BenchmarkGrid grid;
  grid.alphas = {0.25, 0.75};
  grid.adaptive = {false, true};
  grid.effect_ops = {EffectOp::Add, EffectOp::Multiply};
  grid.instances_per_cell = 3;
  grid.master_seed = 1010;
  FullySyntheticConfig f;
  f.n = 24;
  f.T = 24;
  grid.fully_synthetic = f;
  grid.max_leaves = 6;
  BenchmarkOptions one;
  one.timing = false;
  BenchmarkOptions eight = one;
  eight.jobs = 8;
  const std::string a = results_csv(run_benchmark(grid, one));
  const std::string b = results_csv(run_benchmark(grid, eight));
  Outcome out;
  out.passed = a == b;
  out.detail = "results CSV with --jobs 1 and --jobs 8 " + std::string(a == b ? "identical" : "differ") + " (" +
               std::to_string(std::count(a.begin(), a.end(), '\n') - 1) + " rows)";
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"solver optimality", criterion_solver},
      {"V^T 1 = 0", criterion_v_orthogonal},
      {"error decomposition identity", criterion_decomposition},
      {"exact recovery and de-biasing", criterion_recovery},
      {"tree fidelity", criterion_tree},
      {"leaf diameter trend", criterion_diameters},
      {"convergence trend", criterion_convergence},
      {"generator contracts", criterion_generator},
      {"PaCE beats MCNNM", criterion_benchmark},
      {"determinism across jobs", criterion_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o.detail = std::string("threw: ") + e.what();
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.passed) ++failed;
    std::printf("[%s] %2d %-30s %s  (%.1f s)\n", o.passed ? "PASS" : "FAIL", id, criteria[k].first.c_str(),
                o.detail.c_str(), seconds);
    std::fflush(stdout);
  }
  std::printf("%s\n", failed == 0 ? "all acceptance criteria passed" : "some acceptance criteria failed");
  return failed == 0 ? 0 : 1;
}
