#pragma once

#include "pace/panel.hpp"
#include "pace/solver.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <random>
#include <string>

namespace pace {

using Rng = std::mt19937_64;

/// Seed for instance `index` of grid cell `cell`; independent of scheduling.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t cell, std::uint64_t index);

/// Uniform integer in [0, bound) by rejection; identical on every platform.
std::uint64_t uniform_below(Rng& rng, std::uint64_t bound);
/// Uniform double in [0, 1) from the top 53 bits of one draw.
double uniform01(Rng& rng);

enum class EffectOp { Add, Multiply, Random };
enum class EffectSign { Added, Subtracted };
enum class CovariateScheme { Iid, UnitOnly, TimeOnly, Mixed };

std::string to_string(EffectOp op);
std::string to_string(EffectSign sign);
std::string to_string(CovariateScheme scheme);
EffectOp parse_effect_op(const std::string& s);
EffectSign parse_effect_sign(const std::string& s);
CovariateScheme parse_covariate_scheme(const std::string& s);

struct FullySyntheticConfig {
  Eigen::Index n = 50;
  Eigen::Index T = 50;
  int p = 2;
  int rank_star = 2;
  double noise_sigma = 0.1;
  CovariateScheme covariate_scheme = CovariateScheme::Iid;
};

struct GeneratorConfig {
  double alpha = 0.25;
  bool adaptive = false;
  EffectOp effect_op = EffectOp::Random;
  EffectSign effect_sign = EffectSign::Added;
  double target_ratio = 0.2;
  std::uint64_t seed = 0;
  std::optional<FullySyntheticConfig> fully_synthetic;

  void check() const;
  nlohmann::json to_json() const;
};

/// Units chosen uniformly without replacement, each treated on a uniformly
/// random consecutive interval.
Matrix gen_nonadaptive_pattern(Eigen::Index n, Eigen::Index T, double alpha, Rng& rng);

struct AdaptivePattern {
  Matrix W;
  Matrix observed;
};

/// Sequential policy: from the third period on, treat the units with the
/// largest absolute percentage change between the two previous observed
/// periods. `effect` is the signed effect added where treated.
AdaptivePattern gen_adaptive_pattern(const Matrix& baseline, const Matrix& effect, double alpha);

/// Units treated per adaptive period: max(1, round(alpha/2 * n)).
Eigen::Index adaptive_units_per_period(Eigen::Index n, double alpha);
/// Units treated by the non-adaptive policy: max(1, round(alpha * n)).
Eigen::Index nonadaptive_units(Eigen::Index n, double alpha);

struct EffectSpec {
  std::size_t cov_a = 0;
  std::size_t cov_b = 1;
  EffectOp op = EffectOp::Add;

  /// X_a + X_b or X_a * X_b at every entry.
  Matrix raw(const std::vector<Matrix>& covariates) const;
  nlohmann::json to_json() const;
};

EffectSpec gen_effect(std::size_t p, Rng& rng, EffectOp op_choice);

struct AppliedEffect {
  Matrix outcomes;
  Matrix effect;  // signed, every entry
  double scale = 0.0;
};

/// Scales `raw` so that mean_treated |effect| = target_ratio * mean_all |baseline|
/// and adds (or subtracts) it on the treated entries.
AppliedEffect apply_effect(const Matrix& baseline, const Matrix& W, const Matrix& raw, EffectSign sign,
                           double target_ratio);

struct SyntheticBaseline {
  Matrix baseline;
  std::vector<Matrix> covariates;
  Matrix M_star;
  Matrix E;
};

SyntheticBaseline gen_synthetic_baseline(Eigen::Index n, Eigen::Index T, int rank_star, double noise_sigma, int p,
                                         CovariateScheme scheme, Rng& rng);

struct Instance {
  Panel panel;
  GroundTruth truth;
  GeneratorConfig config;
  EffectSpec spec;
  double effect_scale = 0.0;
};

/// Semi-synthetic when `base` is given (its outcomes are the baseline and its
/// covariates are kept), fully synthetic otherwise.
Instance generate_instance(const GeneratorConfig& config, const Panel* base = nullptr);

struct McnnmOptions {
  int target_rank = 6;
  int max_iters = 500;
  double tol = 1e-7;
  double lambda_shrink = 0.8;
  double lambda_floor = 1e-10;
  double rank_threshold = 1e-8;
};

struct McnnmResult {
  Matrix completed;  // M + m 1^T
  Matrix effect;     // O - completed on treated entries, 0 elsewhere
  double lambda = 0.0;
  Eigen::Index rank = 0;
  bool rank_reached = false;
  int iterations = 0;
};

/// Nuclear-norm matrix completion on the untreated entries (soft-impute with
/// unpenalized row means), lambda tuned down to the target rank.
McnnmResult mcnnm(const Matrix& outcomes, const Matrix& treated_mask, const McnnmOptions& options = {});

/// sum |truth - estimate| / sum |truth|, optionally restricted to a mask.
double nmae(const Matrix& estimate, const Matrix& truth, const Matrix* mask = nullptr);

}  // namespace pace
