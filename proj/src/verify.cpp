#include "pace/verify.hpp"

#include "pace/error.hpp"
#include "pace/theory.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace pace {

namespace {

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> nd;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

Matrix uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng);
  return m;
}

Matrix bernoulli(Rng& rng, Eigen::Index rows, Eigen::Index cols, double p) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng) < p ? 1.0 : 0.0;
  return m;
}

Panel make_panel(Matrix outcomes, std::vector<Matrix> covariates, std::vector<Matrix> treatments) {
  Panel p;
  for (Eigen::Index z = 0; z < outcomes.rows(); ++z) p.unit_ids.push_back("u" + std::to_string(z));
  for (Eigen::Index t = 0; t < outcomes.cols(); ++t) p.time_ids.push_back(std::to_string(t));
  p.outcomes = std::move(outcomes);
  p.covariates = std::move(covariates);
  p.treatments = std::move(treatments);
  return p;
}

CheckResult at_most(std::string name, double value, double threshold, std::string detail = {}) {
  return {std::move(name), value <= threshold, value, threshold, std::move(detail)};
}

CheckResult at_least(std::string name, double value, double threshold, std::string detail = {}) {
  return {std::move(name), value >= threshold, value, threshold, std::move(detail)};
}

SolverOptions tight_solver() {
  SolverOptions s;
  s.obj_tol = 1e-14;
  s.kkt_tol = 1e-9;
  s.max_iters = 5000;
  return s;
}

// Rank-r baseline, half-block treatment, effect a where X_0 <= 0.5 and b elsewhere.
Panel step_panel(Rng& rng, Eigen::Index n, Eigen::Index T, Eigen::Index r, double a, double b) {
  const Matrix x0 = uniform(rng, n, T), x1 = uniform(rng, n, T);
  Matrix w = Matrix::Zero(n, T);
  w.bottomRightCorner(n - n / 2, T - T / 2).setOnes();
  const Matrix effect = (x0.array() <= 0.5).select(Matrix::Constant(n, T, a), Matrix::Constant(n, T, b));
  const Matrix o = gaussian(rng, n, r) * gaussian(rng, T, r).transpose() + effect.cwiseProduct(w);
  return make_panel(o, {x0, x1}, {w});
}

SuiteResult suite_solver() {
  SuiteResult s{"solver", {}, 0.0};
  Rng rng(101);
  double worst_kkt = 0.0, worst_v1 = 0.0, worst_obj = 0.0;
  int unconverged = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Index n = 10 + static_cast<Eigen::Index>(uniform_below(rng, 21));
    const Eigen::Index T = 10 + static_cast<Eigen::Index>(uniform_below(rng, 21));
    const auto k = 1 + static_cast<std::size_t>(uniform_below(rng, 3));
    MaskList masks;
    Matrix o = gaussian(rng, n, 2) * gaussian(rng, T, 2).transpose() + 0.3 * gaussian(rng, n, T);
    for (std::size_t i = 0; i < k; ++i) {
      Matrix z = bernoulli(rng, n, T, 0.3);
      z(0, 0) = 1.0;
      z /= z.norm();
      o += (1.0 + static_cast<double>(i)) * z;
      masks.push_back(z);
    }
    const RegressorBasis basis{masks, true};
    const ConvexSolution sol = tune_lambda_best_effort(o, basis, 3).solution;
    if (!sol.converged) ++unconverged;
    worst_kkt = std::max(worst_kkt, kkt_residuals(sol, o, basis).max_residual());
    if (sol.rank() > 0) {
      const double v1 = (sol.svd.V.colwise().sum().cwiseAbs() / static_cast<double>(T)).maxCoeff();
      worst_v1 = std::max(worst_v1, v1 / std::sqrt(static_cast<double>(T)));
    }
    const double oracle = proximal_gradient_objective(o, masks, sol.lambda);
    worst_obj = std::max(worst_obj, std::abs(sol.objective - oracle) / std::max(1.0, std::abs(oracle)));
  }
  s.checks.push_back(at_most("kkt_residual_max", worst_kkt, 1e-5));
  s.checks.push_back(at_most("v_row_mean_over_sqrtT_max", worst_v1, 1e-6));
  s.checks.push_back(at_most("objective_gap_vs_prox_gradient", worst_obj, 1e-6));
  s.checks.push_back(at_most("unconverged_solves", unconverged, 0));
  return s;
}

SuiteResult suite_decomposition() {
  SuiteResult s{"decomposition", {}, 0.0};
  double worst = 0.0;
  int kkt_failures = 0;
  double control = std::numeric_limits<double>::infinity();
  int control_unflagged = 0;
  for (int trial = 0; trial < 4; ++trial) {
    GeneratorConfig cfg;
    cfg.alpha = 0.3;
    cfg.seed = derive_seed(202, 0, static_cast<std::uint64_t>(trial));
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

    // Negative control: one iteration from a cold start at the same lambda.
    SolverOptions rough;
    rough.max_iters = 1;
    EffectEstimate bad = est;
    bad.solution = solve_regularized(inst.panel.outcomes, est.masks.basis(), est.solution.lambda, rough);
    bad.debias = debias(bad.solution, bad.masks);
    const DecompositionReport ctl = decomposition_report(inst, bad);
    control = std::min(control, ctl.residual);
    if (ctl.kkt_passed) ++control_unflagged;
  }
  s.checks.push_back(at_most("identity_residual_max", worst, 1e-5));
  s.checks.push_back(at_most("kkt_failures", kkt_failures, 0));
  s.checks.push_back(at_least("unconverged_control_residual_min", control, 1e-3));
  s.checks.push_back(at_most("unconverged_control_unflagged", control_unflagged, 0));
  return s;
}

SuiteResult suite_tree() {
  SuiteResult s{"tree", {}, 0.0};
  Rng rng(303);
  const Panel step = step_panel(rng, 40, 40, 1, 2.0, -1.0);
  const EffectEstimate est = estimate_effects(step, 2, 1);
  const auto& tree = est.forest.trees[0];
  double threshold_err = 1.0;
  double level_err = 1.0;
  if (tree.leaf_count() == 2 && tree.nodes()[0].covariate == 0) {
    threshold_err = std::abs(tree.nodes()[0].threshold - 0.5);
    Vector lo(2), hi(2);
    lo << 0.1, 0.5;
    hi << 0.9, 0.5;
    level_err = std::max(std::abs(predict_effect(est, 0, lo) - 2.0), std::abs(predict_effect(est, 0, hi) + 1.0));
  }
  s.checks.push_back(at_most("split_threshold_error", threshold_err, 0.05));
  s.checks.push_back(at_most("leaf_level_error", level_err, 1e-2));

  const Panel flat = step_panel(rng, 40, 40, 1, 3.0, 3.0);
  const EffectEstimate hom = estimate_effects(flat, 4, 6);
  s.checks.push_back(at_most("homogeneous_leaf_count", hom.forest.leaf_count(0), 1));
  return s;
}

SuiteResult suite_density() {
  SuiteResult s{"density", {}, 0.0};
  Rng rng(404);
  const std::vector<Matrix> x{uniform(rng, 100, 100), uniform(rng, 100, 100)};
  const DensityReport rep = check_density(x, 500, rng);
  s.checks.push_back(at_most("violations", rep.violations_lower + rep.violations_upper, 0));
  s.checks.push_back(at_least("fitted_cunder", rep.fitted_cunder, 0.5));
  s.checks.push_back(at_most("fitted_cbar", rep.fitted_cbar, 2.0));
  Vector lo = Vector::Zero(2), hi = Vector::Ones(2);
  s.checks.push_back(at_least("full_cube_fraction", rectangle_fraction(x, lo, hi), 1.0));
  return s;
}

SuiteResult suite_convergence(int jobs) {
  SuiteResult s{"convergence", {}, 0.0};
  ConvergenceOptions opt;
  opt.master_seed = 505;
  opt.jobs = jobs;
  const ConvergenceTable table = convergence_trend({40, 80, 160}, opt);
  std::ostringstream detail;
  for (const auto& r : table.rows) detail << "n=" << r.n << ":" << r.mean_abs_error << " ";
  s.checks.push_back({"mean_error_decreasing", table.decreasing, table.decreasing ? 1.0 : 0.0, 1.0, detail.str()});

  opt.base.noise_sigma = 0.0;
  opt.seeds = 2;
  const ConvergenceTable exact = convergence_trend({40, 80, 160}, opt);
  double worst = 0.0;
  for (const auto& r : exact.rows) worst = std::max(worst, r.runs > 0 ? r.max_abs_error : 1.0);
  s.checks.push_back(at_most("noiseless_error_max", worst, 1e-6));
  return s;
}

}  // namespace

bool SuiteResult::passed() const {
  for (const auto& c : checks)
    if (!c.passed) return false;
  return true;
}

bool VerifyReport::passed() const {
  for (const auto& s : suites)
    if (!s.passed()) return false;
  return true;
}

std::vector<std::string> VerifyReport::failing_checks() const {
  std::vector<std::string> out;
  for (const auto& s : suites)
    for (const auto& c : s.checks)
      if (!c.passed) out.push_back(s.name + "." + c.name);
  return out;
}

nlohmann::json VerifyReport::to_json() const {
  nlohmann::json ss = nlohmann::json::array();
  for (const auto& s : suites) {
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : s.checks) {
      cs.push_back({{"name", c.name},
                    {"passed", c.passed},
                    {"value", std::isfinite(c.value) ? nlohmann::json(c.value) : nlohmann::json(nullptr)},
                    {"threshold", c.threshold},
                    {"detail", c.detail}});
    }
    ss.push_back({{"suite", s.name}, {"passed", s.passed()}, {"seconds", s.seconds}, {"checks", cs}});
  }
  return {{"passed", passed()}, {"suites", ss}, {"failing", failing_checks()}};
}

std::string VerifyReport::summary_table() const {
  std::ostringstream os;
  os << std::left << std::setw(15) << "suite" << std::setw(34) << "check" << std::setw(8) << "result"
     << std::setw(14) << "value" << "threshold\n";
  for (const auto& s : suites) {
    for (const auto& c : s.checks) {
      os << std::setw(15) << s.name << std::setw(34) << c.name << std::setw(8) << (c.passed ? "PASS" : "FAIL")
         << std::setw(14) << std::setprecision(4) << c.value << c.threshold << '\n';
    }
  }
  os << (passed() ? "all checks passed" : "some checks failed") << '\n';
  return os.str();
}

const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names{"solver", "decomposition", "tree", "density", "convergence"};
  return names;
}

VerifyReport run_verify(const std::string& suite, int jobs) {
  std::vector<std::string> selected;
  if (suite == "all") {
    selected = verify_suite_names();
  } else if (std::find(verify_suite_names().begin(), verify_suite_names().end(), suite) != verify_suite_names().end()) {
    selected = {suite};
  } else {
    throw Error(ErrorCode::ConfigError, "suite: unknown suite '" + suite + "'");
  }
  VerifyReport report;
  for (const auto& name : selected) {
    const auto start = std::chrono::steady_clock::now();
    SuiteResult r;
    if (name == "solver") r = suite_solver();
    else if (name == "decomposition") r = suite_decomposition();
    else if (name == "tree") r = suite_tree();
    else if (name == "density") r = suite_density();
    else r = suite_convergence(jobs);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.suites.push_back(std::move(r));
  }
  return report;
}

double proximal_gradient_objective(const Matrix& outcomes, const MaskList& masks, double lambda, int iterations) {
  const Eigen::Index n = outcomes.rows(), T = outcomes.cols();
  // Orthonormal basis of span{Z_i} + {m 1^T}.
  Matrix design(n * T, static_cast<Eigen::Index>(masks.size()) + n);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    design.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Vector>(masks[i].data(), n * T);
  }
  for (Eigen::Index z = 0; z < n; ++z) {
    Matrix ind = Matrix::Zero(n, T);
    ind.row(z).setOnes();
    design.col(static_cast<Eigen::Index>(masks.size()) + z) = Eigen::Map<const Vector>(ind.data(), n * T);
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  const Matrix q = qr.householderQ() * Matrix::Identity(n * T, qr.rank());
  auto perp = [&](const Matrix& a) {
    Vector v = Eigen::Map<const Vector>(a.data(), a.size());
    v -= q * (q.transpose() * v);
    return Matrix(Eigen::Map<Matrix>(v.data(), n, T));
  };
  auto objective = [&](const Matrix& m) {
    Eigen::BDCSVD<Matrix> svd(m);
    return 0.5 * perp(outcomes - m).squaredNorm() + lambda * svd.singularValues().sum();
  };
  Matrix m = Matrix::Zero(n, T), y = m;
  double t = 1.0;
  for (int it = 0; it < iterations; ++it) {
    const Matrix next = svt(y + perp(outcomes - y), lambda);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = next + ((t - 1.0) / t_next) * (next - m);
    const double change = (next - m).norm();
    m = next;
    t = t_next;
    if (change < 1e-13 * std::max(1.0, m.norm())) break;
  }
  return objective(m);
}

}  // namespace pace
