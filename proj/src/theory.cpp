#include "pace/theory.hpp"

#include "pace/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace pace {

namespace {

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json vec_json(const Vector& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(finite_or_null(v(i)));
  return a;
}

nlohmann::json mat_json(const Matrix& m) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vec_json(m.row(i).transpose()));
  return a;
}

Matrix treated_effect_sum(const Instance& instance) {
  const Panel& panel = instance.panel;
  Matrix sum = Matrix::Zero(panel.units(), panel.periods());
  for (std::size_t i = 0; i < panel.num_treatments(); ++i) sum += instance.truth.effect.at(i).cwiseProduct(panel.treatments[i]);
  return sum;
}

}  // namespace

// --- density ------------------------------------------------------------------------

nlohmann::json DensityReport::to_json() const {
  return {{"samples", samples},
          {"informative", informative},
          {"violations_lower", violations_lower},
          {"violations_upper", violations_upper},
          {"fitted_cbar", finite_or_null(fitted_cbar)},
          {"fitted_cunder", finite_or_null(fitted_cunder)},
          {"margin_M", margin_M},
          {"degenerate", degenerate}};
}

double density_margin(Eigen::Index n, Eigen::Index T, std::size_t p) {
  const double nt = static_cast<double>(n) * static_cast<double>(T);
  return std::sqrt(std::log(nt) * static_cast<double>(p + 1) / static_cast<double>(std::min(n, T)));
}

double rectangle_fraction(const std::vector<Matrix>& covariates, const Vector& lo, const Vector& hi) {
  const Eigen::Index n = covariates.front().rows(), T = covariates.front().cols();
  long inside = 0;
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index z = 0; z < n; ++z) {
      bool in = true;
      for (std::size_t c = 0; c < covariates.size() && in; ++c) {
        const double x = covariates[c](z, t);
        const auto ci = static_cast<Eigen::Index>(c);
        in = x >= lo(ci) && x <= hi(ci);
      }
      inside += in ? 1 : 0;
    }
  }
  return static_cast<double>(inside) / static_cast<double>(n * T);
}

DensityReport check_density(const std::vector<Matrix>& covariates, int num_rectangles, Rng& rng) {
  if (covariates.empty()) throw Error(ErrorCode::PreconditionViolation, "no covariates");
  for (const auto& x : covariates) {
    if (x.minCoeff() < 0.0 || x.maxCoeff() > 1.0) {
      throw Error(ErrorCode::PreconditionViolation, "covariates must be normalized to [0, 1]");
    }
  }
  const std::size_t p = covariates.size();
  const auto pi = static_cast<Eigen::Index>(p);
  DensityReport rep;
  rep.margin_M = density_margin(covariates.front().rows(), covariates.front().cols(), p);

  std::vector<double> fractions, volumes;
  for (int s = 0; s < std::max(1, num_rectangles); ++s) {
    Vector lo = Vector::Zero(pi), hi = Vector::Ones(pi);
    if (s > 0) {
      for (Eigen::Index c = 0; c < pi; ++c) {
        const double a = uniform01(rng), b = uniform01(rng);
        lo(c) = std::min(a, b);
        hi(c) = std::max(a, b);
      }
    }
    fractions.push_back(rectangle_fraction(covariates, lo, hi));
    volumes.push_back((hi - lo).prod());
  }
  rep.samples = static_cast<int>(fractions.size());

  double cbar = 0.0, cunder = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < fractions.size(); ++s) {
    if (volumes[s] < rep.margin_M || volumes[s] <= 0.0) continue;
    ++rep.informative;
    cbar = std::max(cbar, fractions[s] / volumes[s]);
    cunder = std::min(cunder, fractions[s] / volumes[s]);
  }
  if (rep.informative == 0) {
    rep.fitted_cbar = rep.fitted_cunder = std::numeric_limits<double>::quiet_NaN();
    return rep;
  }
  rep.fitted_cbar = cbar;
  rep.fitted_cunder = cunder;
  rep.degenerate = cunder == 0.0;
  for (std::size_t s = 0; s < fractions.size(); ++s) {
    if (fractions[s] < cunder * volumes[s] - rep.margin_M) ++rep.violations_lower;
    if (fractions[s] > cbar * volumes[s] + rep.margin_M) ++rep.violations_upper;
  }
  return rep;
}

// --- diameters ------------------------------------------------------------------------

nlohmann::json DiameterReport::to_json() const {
  nlohmann::json per_leaf = nlohmann::json::array();
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    per_leaf.push_back({{"leaf", leaves[k]}, {"diameter", diameters[k]}, {"size", sizes[k]}, {"depth", depths[k]}});
  }
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [l, d] : bound_curve) curve.push_back({{"leaves", l}, {"max_diameter", d}});
  return {{"leaves", per_leaf}, {"max_diameter", max_diameter}, {"bound_curve", curve}};
}

DiameterReport leaf_diameters(const TreatmentForest& forest, const Panel& panel, std::size_t treatment) {
  const int L = forest.leaf_count(treatment);
  const std::size_t p = panel.num_covariates();
  const auto& assign = forest.assignment.at(treatment);
  std::vector<Vector> lo(static_cast<std::size_t>(L), Vector::Constant(static_cast<Eigen::Index>(p), std::numeric_limits<double>::infinity()));
  std::vector<Vector> hi(static_cast<std::size_t>(L), Vector::Constant(static_cast<Eigen::Index>(p), -std::numeric_limits<double>::infinity()));
  std::vector<long> count(static_cast<std::size_t>(L), 0);
  for (Eigen::Index t = 0; t < panel.periods(); ++t) {
    for (Eigen::Index z = 0; z < panel.units(); ++z) {
      const auto leaf = static_cast<std::size_t>(assign(z, t));
      ++count[leaf];
      for (std::size_t c = 0; c < p; ++c) {
        const double x = panel.covariates[c](z, t);
        const auto ci = static_cast<Eigen::Index>(c);
        lo[leaf](ci) = std::min(lo[leaf](ci), x);
        hi[leaf](ci) = std::max(hi[leaf](ci), x);
      }
    }
  }
  DiameterReport rep;
  for (int leaf = 0; leaf < L; ++leaf) {
    const auto k = static_cast<std::size_t>(leaf);
    const double d = count[k] > 0 ? (hi[k] - lo[k]).norm() : 0.0;
    rep.leaves.push_back(leaf);
    rep.diameters.push_back(d);
    rep.sizes.push_back(count[k]);
    rep.depths.push_back(forest.trees[treatment].depth(leaf));
    rep.max_diameter = std::max(rep.max_diameter, d);
  }
  return rep;
}

DiameterReport diameter_curve(const Panel& panel, std::size_t treatment, const std::vector<int>& sizes,
                              const BuildOptions& options) {
  if (sizes.empty()) throw Error(ErrorCode::PreconditionViolation, "no tree sizes requested");
  const std::set<int> wanted(sizes.begin(), sizes.end());
  std::vector<std::pair<int, double>> curve;
  std::set<int> seen;
  auto record = [&](const TreatmentForest& f) {
    const int l = f.leaf_count(treatment);
    if (wanted.count(l) && !seen.count(l)) {
      seen.insert(l);
      curve.emplace_back(l, leaf_diameters(f, panel, treatment).max_diameter);
    }
  };
  record(TreatmentForest::single_leaf(panel, options.constraints));

  BuildOptions opt = options;
  opt.max_leaves = *wanted.rbegin();
  opt.observer = [&](const TreatmentForest& f, int it) {
    record(f);
    if (options.observer) options.observer(f, it);
  };
  const ForestBuild build = build_forest(panel, opt);
  DiameterReport rep = leaf_diameters(build.forest, panel, treatment);
  rep.bound_curve = std::move(curve);
  return rep;
}

// --- decomposition ------------------------------------------------------------------------

nlohmann::json DecompositionReport::to_json() const {
  return {{"residual", finite_or_null(residual)},
          {"tau_star", vec_json(tau_star)},
          {"tau_tilde_star", vec_json(tau_tilde_star)},
          {"delta1", vec_json(delta1)},
          {"delta2", vec_json(delta2)},
          {"delta3", vec_json(delta3)},
          {"delta_alignment", delta_alignment},
          {"kkt_residual", kkt_residual},
          {"kkt_passed", kkt_passed}};
}

Vector cluster_average_truth(const Instance& instance, const EffectEstimate& est) {
  const NormalizedMasks& nm = est.masks;
  Vector out(static_cast<Eigen::Index>(nm.size()));
  for (std::size_t a = 0; a < nm.size(); ++a) {
    const auto ai = static_cast<Eigen::Index>(a);
    const Matrix z_tilde = nm.Z[a] * nm.frob_norms(ai);
    out(ai) = inner(instance.truth.effect.at(nm.origin[a].first), z_tilde) / nm.sum_norms(ai);
  }
  return out;
}

DecompositionReport decomposition_report(const Instance& instance, const EffectEstimate& est, double kkt_tol) {
  const GroundTruth& truth = instance.truth;
  if (!truth.low_rank || truth.effect.size() != instance.panel.num_treatments()) {
    throw Error(ErrorCode::NoGroundTruth, "instance has no low-rank ground truth");
  }
  const Matrix& o = instance.panel.outcomes;
  const NormalizedMasks& nm = est.masks;
  const ConvexSolution& sol = est.solution;
  const auto k = static_cast<Eigen::Index>(nm.size());

  DecompositionReport rep;
  rep.tau_tilde_star = cluster_average_truth(instance, est);
  rep.tau_star = rep.tau_tilde_star.cwiseProduct(nm.frob_norms);

  const Matrix effect = treated_effect_sum(instance);
  Matrix delta = effect;
  for (Eigen::Index a = 0; a < k; ++a) delta -= rep.tau_star(a) * nm.Z[static_cast<std::size_t>(a)];
  const Matrix noise = truth.noise ? *truth.noise : Matrix(o - *truth.low_rank - effect);
  const Matrix e_hat = noise + delta;

  const Matrix pe = tangent_projection_perp(e_hat, sol.svd.U, sol.svd.V);
  const Matrix pm = tangent_projection_perp(*truth.low_rank, sol.svd.U, sol.svd.V);
  rep.delta1 = est.debias.delta1;
  rep.delta2.resize(k);
  rep.delta3.resize(k);
  for (Eigen::Index a = 0; a < k; ++a) {
    const Matrix& z = nm.Z[static_cast<std::size_t>(a)];
    rep.delta2(a) = inner(z, pe);
    rep.delta3(a) = inner(z, pm);
    rep.delta_alignment = std::max(rep.delta_alignment, std::abs(inner(z, delta)));
  }
  const Vector gap = est.debias.D * (sol.tau_hat - rep.tau_star) - (rep.delta1 + rep.delta2 + rep.delta3);
  rep.residual = (k > 0 ? gap.cwiseAbs().maxCoeff() : 0.0) / (1.0 + rep.tau_star.norm());
  rep.kkt_residual = kkt_residuals(sol, o, nm.basis()).max_residual();
  rep.kkt_passed = rep.kkt_residual <= kkt_tol;
  return rep;
}

double decomposition_residual(const Instance& instance, const EffectEstimate& est) {
  return decomposition_report(instance, est).residual;
}

nlohmann::json identification_diagnostics(const Instance& instance, const EffectEstimate& est) {
  if (!instance.truth.low_rank) throw Error(ErrorCode::NoGroundTruth, "instance has no low-rank ground truth");
  const Matrix& m_star = *instance.truth.low_rank;
  Eigen::BDCSVD<Matrix> svd(m_star, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  Eigen::Index r = 0;
  while (r < s.size() && s(r) > 1e-10 * std::max(s(0), 1e-300)) ++r;
  const Matrix U = svd.matrixU().leftCols(r), V = svd.matrixV().leftCols(r);

  const NormalizedMasks& nm = est.masks;
  const auto k = static_cast<Eigen::Index>(nm.size());
  std::vector<Matrix> proj;
  Vector overlap(k), delta1(k);
  const Matrix uv = U * V.transpose();
  for (Eigen::Index a = 0; a < k; ++a) {
    const Matrix& z = nm.Z[static_cast<std::size_t>(a)];
    proj.push_back(tangent_projection_perp(z, U, V));
    overlap(a) = (z - proj.back()).norm();
    delta1(a) = est.solution.lambda * inner(z, uv);
  }
  Matrix D(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) D(a, b) = inner(proj[static_cast<std::size_t>(a)], proj[static_cast<std::size_t>(b)]);
  const double min_eig = k > 0 ? Eigen::SelfAdjointEigenSolver<Matrix>(D).eigenvalues().minCoeff() : 0.0;
  return {{"true_rank", r},
          {"D_star", mat_json(D)},
          {"D_star_min_eigenvalue", min_eig},
          {"delta1_star", vec_json(delta1)},
          {"tangent_overlap", vec_json(overlap)}};
}

// --- convergence ------------------------------------------------------------------------------

nlohmann::json ConvergenceTable::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    rs.push_back({{"n", r.n},
                  {"mean_abs_error", finite_or_null(r.mean_abs_error)},
                  {"max_abs_error", finite_or_null(r.max_abs_error)},
                  {"runs", r.runs},
                  {"failures", r.failures}});
  }
  return {{"rows", rs}, {"decreasing", decreasing}};
}

Instance convergence_instance(Eigen::Index n, int seed_index, const ConvergenceOptions& options) {
  GeneratorConfig cfg;
  cfg.alpha = options.alpha;
  cfg.effect_op = options.effect_op;
  cfg.target_ratio = options.target_ratio;
  cfg.seed = derive_seed(options.master_seed, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(seed_index));
  cfg.fully_synthetic = options.base;
  cfg.fully_synthetic->n = n;
  cfg.fully_synthetic->T = n;
  cfg.check();
  if (!options.homogeneous) return generate_instance(cfg);

  const FullySyntheticConfig& f = *cfg.fully_synthetic;
  Rng rng(cfg.seed);
  SyntheticBaseline sb = gen_synthetic_baseline(n, n, f.rank_star, f.noise_sigma, f.p, f.covariate_scheme, rng);
  Matrix w = gen_nonadaptive_pattern(n, n, cfg.alpha, rng);
  AppliedEffect applied = apply_effect(sb.baseline, w, Matrix::Ones(n, n), EffectSign::Added, cfg.target_ratio);

  Instance inst;
  inst.config = cfg;
  inst.panel.outcomes = std::move(applied.outcomes);
  inst.panel.covariates = std::move(sb.covariates);
  inst.panel.treatments = {std::move(w)};
  for (Eigen::Index z = 0; z < n; ++z) inst.panel.unit_ids.push_back("u" + std::to_string(z));
  for (Eigen::Index t = 0; t < n; ++t) inst.panel.time_ids.push_back(std::to_string(t));
  inst.truth.baseline = std::move(sb.baseline);
  inst.truth.effect = {std::move(applied.effect)};
  inst.truth.low_rank = std::move(sb.M_star);
  inst.truth.noise = std::move(sb.E);
  inst.effect_scale = applied.scale;
  return inst;
}

ConvergenceTable convergence_trend(const std::vector<Eigen::Index>& sizes, const ConvergenceOptions& options) {
  if (sizes.empty() || options.seeds < 1) throw Error(ErrorCode::PreconditionViolation, "need sizes and seeds");
  const long tasks = static_cast<long>(sizes.size()) * options.seeds;
  std::vector<double> errors(static_cast<std::size_t>(tasks), std::numeric_limits<double>::quiet_NaN());

#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, options.jobs))
  for (long task = 0; task < tasks; ++task) {
    const Eigen::Index n = sizes[static_cast<std::size_t>(task / options.seeds)];
    const int seed = static_cast<int>(task % options.seeds);
    try {
      const Instance inst = convergence_instance(n, seed, options);
      const EffectEstimate est = estimate_effects(inst.panel, 1, options.target_rank);
      const Vector truth = cluster_average_truth(inst, est);
      errors[static_cast<std::size_t>(task)] = std::abs(est.debias.tau_d(0) - truth(0));
    } catch (const Error&) {
      // counted as a failure below
    }
  }

  ConvergenceTable table;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    ConvergenceRow row;
    row.n = sizes[s];
    double sum = 0.0;
    for (int seed = 0; seed < options.seeds; ++seed) {
      const double e = errors[s * static_cast<std::size_t>(options.seeds) + static_cast<std::size_t>(seed)];
      if (std::isnan(e)) {
        ++row.failures;
        continue;
      }
      ++row.runs;
      sum += e;
      row.max_abs_error = std::max(row.max_abs_error, e);
    }
    row.mean_abs_error = row.runs > 0 ? sum / row.runs : std::numeric_limits<double>::quiet_NaN();
    table.rows.push_back(row);
  }
  table.decreasing = true;
  for (std::size_t s = 0; s + 1 < table.rows.size(); ++s) {
    const auto& a = table.rows[s];
    const auto& b = table.rows[s + 1];
    if (a.runs == 0 || b.runs == 0 || !(b.mean_abs_error < a.mean_abs_error)) table.decreasing = false;
  }
  return table;
}

}  // namespace pace
