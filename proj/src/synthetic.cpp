#include "pace/synthetic.hpp"
#include "pace/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace pace {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Eigen::Index round_half_up(double x) { return static_cast<Eigen::Index>(std::floor(x + 0.5)); }

}  // namespace

std::uint64_t uniform_below(Rng& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t cell, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(master) ^ cell) ^ (index * 0xd1342543de82ef95ULL));
}

std::string to_string(EffectOp op) {
  switch (op) {
    case EffectOp::Add: return "add";
    case EffectOp::Multiply: return "multiply";
    case EffectOp::Random: return "random";
  }
  return "?";
}

std::string to_string(EffectSign sign) { return sign == EffectSign::Added ? "added" : "subtracted"; }

std::string to_string(CovariateScheme scheme) {
  switch (scheme) {
    case CovariateScheme::Iid: return "iid";
    case CovariateScheme::UnitOnly: return "unit_only";
    case CovariateScheme::TimeOnly: return "time_only";
    case CovariateScheme::Mixed: return "mixed";
  }
  return "?";
}

EffectOp parse_effect_op(const std::string& s) {
  if (s == "add") return EffectOp::Add;
  if (s == "multiply") return EffectOp::Multiply;
  if (s == "random") return EffectOp::Random;
  throw Error(ErrorCode::ConfigError, "unknown effect_op '" + s + "'");
}

EffectSign parse_effect_sign(const std::string& s) {
  if (s == "added") return EffectSign::Added;
  if (s == "subtracted") return EffectSign::Subtracted;
  throw Error(ErrorCode::ConfigError, "unknown effect_sign '" + s + "'");
}

CovariateScheme parse_covariate_scheme(const std::string& s) {
  if (s == "iid") return CovariateScheme::Iid;
  if (s == "unit_only") return CovariateScheme::UnitOnly;
  if (s == "time_only") return CovariateScheme::TimeOnly;
  if (s == "mixed") return CovariateScheme::Mixed;
  throw Error(ErrorCode::ConfigError, "unknown covariate_scheme '" + s + "'");
}

void GeneratorConfig::check() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw Error(ErrorCode::ConfigError, "generator.alpha must lie in (0, 1]");
  if (!(target_ratio > 0.0)) throw Error(ErrorCode::ConfigError, "generator.target_ratio must be positive");
  if (fully_synthetic) {
    const auto& f = *fully_synthetic;
    if (f.n < 2 || f.T < 2) throw Error(ErrorCode::ConfigError, "generator.fully_synthetic.n and .T must be >= 2");
    if (adaptive && f.T < 3) throw Error(ErrorCode::ConfigError, "generator.fully_synthetic.T must be >= 3 when adaptive");
    if (f.p < 2) throw Error(ErrorCode::ConfigError, "generator.fully_synthetic.p must be >= 2");
    if (f.rank_star < 0 || f.rank_star > std::min(f.n, f.T)) {
      throw Error(ErrorCode::ConfigError, "generator.fully_synthetic.rank_star must lie in [0, min(n, T)]");
    }
    if (!(f.noise_sigma >= 0.0)) throw Error(ErrorCode::ConfigError, "generator.fully_synthetic.noise_sigma must be >= 0");
  }
}

nlohmann::json GeneratorConfig::to_json() const {
  nlohmann::json j = {{"alpha", alpha},
                      {"adaptive", adaptive},
                      {"effect_op", to_string(effect_op)},
                      {"effect_sign", to_string(effect_sign)},
                      {"target_ratio", target_ratio},
                      {"seed", seed}};
  if (fully_synthetic) {
    const auto& f = *fully_synthetic;
    j["fully_synthetic"] = {{"n", f.n},
                            {"T", f.T},
                            {"p", f.p},
                            {"rank_star", f.rank_star},
                            {"noise_sigma", f.noise_sigma},
                            {"covariate_scheme", to_string(f.covariate_scheme)}};
  }
  return j;
}

// --- treatment patterns ----------------------------------------------------------

Eigen::Index nonadaptive_units(Eigen::Index n, double alpha) {
  return std::min(n, std::max<Eigen::Index>(1, round_half_up(alpha * static_cast<double>(n))));
}

Eigen::Index adaptive_units_per_period(Eigen::Index n, double alpha) {
  return std::min(n, std::max<Eigen::Index>(1, round_half_up(0.5 * alpha * static_cast<double>(n))));
}

Matrix gen_nonadaptive_pattern(Eigen::Index n, Eigen::Index T, double alpha, Rng& rng) {
  if (n < 2 || T < 2) throw Error(ErrorCode::PreconditionViolation, "pattern needs n, T >= 2");
  std::vector<Eigen::Index> units(static_cast<std::size_t>(n));
  std::iota(units.begin(), units.end(), Eigen::Index{0});
  const Eigen::Index chosen = nonadaptive_units(n, alpha);
  for (Eigen::Index i = 0; i < chosen; ++i) {
    const auto j = i + static_cast<Eigen::Index>(uniform_below(rng, static_cast<std::uint64_t>(n - i)));
    std::swap(units[static_cast<std::size_t>(i)], units[static_cast<std::size_t>(j)]);
  }
  Matrix w = Matrix::Zero(n, T);
  const auto intervals = static_cast<std::uint64_t>(T * (T + 1) / 2);
  for (Eigen::Index i = 0; i < chosen; ++i) {
    // Interval index k enumerates (t1, t2) with t1 <= t2 in row-major order.
    std::uint64_t k = uniform_below(rng, intervals);
    Eigen::Index t1 = 0;
    while (k >= static_cast<std::uint64_t>(T - t1)) {
      k -= static_cast<std::uint64_t>(T - t1);
      ++t1;
    }
    const Eigen::Index t2 = t1 + static_cast<Eigen::Index>(k);
    w.row(units[static_cast<std::size_t>(i)]).segment(t1, t2 - t1 + 1).setOnes();
  }
  return w;
}

AdaptivePattern gen_adaptive_pattern(const Matrix& baseline, const Matrix& effect, double alpha) {
  const Eigen::Index n = baseline.rows(), T = baseline.cols();
  if (T < 3) throw Error(ErrorCode::PreconditionViolation, "adaptive pattern needs T >= 3");
  if (effect.rows() != n || effect.cols() != T) throw Error(ErrorCode::ShapeMismatch, "effect and baseline differ in shape");
  const double mean_abs = baseline.cwiseAbs().mean();
  const double eps = mean_abs > 0.0 ? 1e-9 * mean_abs : std::numeric_limits<double>::min();
  const Eigen::Index per_period = adaptive_units_per_period(n, alpha);

  AdaptivePattern out{Matrix::Zero(n, T), baseline};
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::vector<double> change(static_cast<std::size_t>(n));
  for (Eigen::Index t = 2; t < T; ++t) {
    for (Eigen::Index z = 0; z < n; ++z) {
      const double prev = out.observed(z, t - 2);
      change[static_cast<std::size_t>(z)] = std::abs(out.observed(z, t - 1) - prev) / std::max(std::abs(prev), eps);
    }
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return change[static_cast<std::size_t>(a)] > change[static_cast<std::size_t>(b)];
    });
    for (Eigen::Index r = 0; r < per_period; ++r) {
      const Eigen::Index z = order[static_cast<std::size_t>(r)];
      out.W(z, t) = 1.0;
      out.observed(z, t) = baseline(z, t) + effect(z, t);
    }
  }
  return out;
}

// --- effects ---------------------------------------------------------------------

Matrix EffectSpec::raw(const std::vector<Matrix>& covariates) const {
  if (cov_a >= covariates.size() || cov_b >= covariates.size()) {
    throw Error(ErrorCode::PreconditionViolation, "effect covariate index out of range");
  }
  if (op == EffectOp::Multiply) return covariates[cov_a].cwiseProduct(covariates[cov_b]);
  return covariates[cov_a] + covariates[cov_b];
}

nlohmann::json EffectSpec::to_json() const {
  return {{"cov_a", cov_a}, {"cov_b", cov_b}, {"op", to_string(op)}};
}

EffectSpec gen_effect(std::size_t p, Rng& rng, EffectOp op_choice) {
  if (p < 2) throw Error(ErrorCode::NeedTwoCovariates, "effect synthesis needs at least two covariates");
  EffectSpec spec;
  spec.cov_a = static_cast<std::size_t>(uniform_below(rng, p));
  spec.cov_b = static_cast<std::size_t>(uniform_below(rng, p - 1));
  if (spec.cov_b >= spec.cov_a) ++spec.cov_b;
  spec.op = op_choice;
  if (op_choice == EffectOp::Random) spec.op = uniform_below(rng, 2) == 0 ? EffectOp::Add : EffectOp::Multiply;
  return spec;
}

AppliedEffect apply_effect(const Matrix& baseline, const Matrix& W, const Matrix& raw, EffectSign sign,
                           double target_ratio) {
  if (W.rows() != baseline.rows() || W.cols() != baseline.cols() || raw.rows() != baseline.rows() ||
      raw.cols() != baseline.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "baseline, treatment and effect shapes differ");
  }
  const double treated = W.sum();
  if (treated == 0.0) throw Error(ErrorCode::DegenerateEffect, "no treated entries to receive an effect");
  const double mean_treated = raw.cwiseAbs().cwiseProduct(W).sum() / treated;
  const double mean_baseline = baseline.cwiseAbs().mean();
  if (!(mean_treated > 0.0) || !(mean_baseline > 0.0)) {
    throw Error(ErrorCode::DegenerateEffect, "effect or baseline has zero mean magnitude");
  }
  AppliedEffect out;
  out.scale = target_ratio * mean_baseline / mean_treated;
  out.effect = (sign == EffectSign::Added ? out.scale : -out.scale) * raw;
  out.outcomes = baseline + out.effect.cwiseProduct(W);
  return out;
}

// --- baselines ---------------------------------------------------------------------

SyntheticBaseline gen_synthetic_baseline(Eigen::Index n, Eigen::Index T, int rank_star, double noise_sigma, int p,
                                         CovariateScheme scheme, Rng& rng) {
  if (rank_star < 0 || rank_star > std::min(n, T)) {
    throw Error(ErrorCode::PreconditionViolation, "rank_star must lie in [0, min(n, T)]");
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  const double factor = rank_star > 0 ? 1.0 / std::pow(static_cast<double>(rank_star), 0.25) : 0.0;
  Matrix A(n, rank_star), B(T, rank_star);
  for (Eigen::Index j = 0; j < A.size(); ++j) A(j) = factor * normal(rng);
  for (Eigen::Index j = 0; j < B.size(); ++j) B(j) = factor * normal(rng);

  SyntheticBaseline out;
  out.M_star = rank_star > 0 ? Matrix(A * B.transpose()) : Matrix::Zero(n, T);
  out.E = Matrix::Zero(n, T);
  if (noise_sigma > 0.0) {
    for (Eigen::Index j = 0; j < out.E.size(); ++j) out.E(j) = noise_sigma * normal(rng);
  }
  out.baseline = out.M_star + out.E;

  for (int c = 0; c < p; ++c) {
    CovariateScheme s = scheme;
    if (scheme == CovariateScheme::Mixed) {
      static constexpr CovariateScheme cycle[] = {CovariateScheme::Iid, CovariateScheme::UnitOnly,
                                                  CovariateScheme::TimeOnly};
      s = cycle[c % 3];
    }
    Matrix x(n, T);
    if (s == CovariateScheme::Iid) {
      for (Eigen::Index j = 0; j < x.size(); ++j) x(j) = uniform01(rng);
    } else if (s == CovariateScheme::UnitOnly) {
      for (Eigen::Index z = 0; z < n; ++z) x.row(z).setConstant(uniform01(rng));
    } else {
      for (Eigen::Index t = 0; t < T; ++t) x.col(t).setConstant(uniform01(rng));
    }
    out.covariates.push_back(std::move(x));
  }
  return out;
}

Instance generate_instance(const GeneratorConfig& config, const Panel* base) {
  config.check();
  if (!base && !config.fully_synthetic) {
    throw Error(ErrorCode::ConfigError, "generator needs a baseline panel or a fully_synthetic block");
  }
  Rng rng(config.seed);
  Instance inst;
  inst.config = config;
  if (base) {
    inst.panel.outcomes = base->outcomes;
    inst.panel.covariates = base->covariates;
    inst.panel.unit_ids = base->unit_ids;
    inst.panel.time_ids = base->time_ids;
    inst.truth.baseline = base->outcomes;
  } else {
    const auto& f = *config.fully_synthetic;
    SyntheticBaseline sb = gen_synthetic_baseline(f.n, f.T, f.rank_star, f.noise_sigma, f.p, f.covariate_scheme, rng);
    inst.panel.covariates = std::move(sb.covariates);
    inst.truth.baseline = sb.baseline;
    inst.truth.low_rank = std::move(sb.M_star);
    inst.truth.noise = std::move(sb.E);
    for (Eigen::Index z = 0; z < f.n; ++z) inst.panel.unit_ids.push_back("u" + std::to_string(z));
    for (Eigen::Index t = 0; t < f.T; ++t) inst.panel.time_ids.push_back(std::to_string(t));
  }
  const Matrix& baseline = inst.truth.baseline;
  const Eigen::Index n = baseline.rows(), T = baseline.cols();

  inst.spec = gen_effect(inst.panel.num_covariates(), rng, config.effect_op);
  const Matrix raw = inst.spec.raw(inst.panel.covariates);

  Matrix W;
  if (config.adaptive) {
    // The policy reacts to observed outcomes, which already carry effects,
    // while the exact scale depends on the final pattern. Select with the
    // scale implied by all entries, then rescale on the chosen support.
    const double mean_raw = raw.cwiseAbs().mean();
    if (!(mean_raw > 0.0)) throw Error(ErrorCode::DegenerateEffect, "effect has zero mean magnitude");
    const double provisional = config.target_ratio * baseline.cwiseAbs().mean() / mean_raw;
    const double signed_scale = config.effect_sign == EffectSign::Added ? provisional : -provisional;
    W = gen_adaptive_pattern(baseline, signed_scale * raw, config.alpha).W;
  } else {
    W = gen_nonadaptive_pattern(n, T, config.alpha, rng);
  }
  AppliedEffect applied = apply_effect(baseline, W, raw, config.effect_sign, config.target_ratio);
  inst.panel.outcomes = std::move(applied.outcomes);
  inst.panel.treatments = {std::move(W)};
  inst.truth.effect = {std::move(applied.effect)};
  inst.effect_scale = applied.scale;
  return inst;
}

double nmae(const Matrix& estimate, const Matrix& truth, const Matrix* mask) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "estimate and truth differ in shape");
  }
  Matrix err = (truth - estimate).cwiseAbs();
  Matrix ref = truth.cwiseAbs();
  if (mask) {
    err = err.cwiseProduct(*mask);
    ref = ref.cwiseProduct(*mask);
  }
  const double denom = ref.sum();
  if (!(denom > 0.0)) throw Error(ErrorCode::ZeroTruthNorm, "true effect has zero absolute sum");
  return err.sum() / denom;
}

}  // namespace pace
