#include <doctest.h>

#include "fixtures.hpp"
#include "pace/error.hpp"
#include "pace/tree.hpp"

#include <omp.h>

#include <cmath>
#include <fstream>
#include <set>

using namespace pace;

namespace {

/// Effect levels lo/hi split at X_0 = 0.5, one uniform covariate plus
/// `extra` noise covariates, block treatment, M* = 0, zero noise.
Panel step_panel(std::mt19937_64& rng, Eigen::Index n, Eigen::Index T, double lo, double hi, int extra = 1) {
  std::vector<Matrix> cov;
  cov.push_back(fixture::uniform(rng, n, T));
  for (int e = 0; e < extra; ++e) cov.push_back(fixture::uniform(rng, n, T));
  Matrix w = fixture::block_treatment(n, T);
  Matrix effect = (cov[0].array() > 0.5).select(Matrix::Constant(n, T, hi), Matrix::Constant(n, T, lo));
  return fixture::make_panel(effect.cwiseProduct(w), cov, {w});
}

/// Brute-force SSE of a two-group split of values y by threshold on x.
double two_group_sse(const std::vector<double>& x, const std::vector<double>& y, double thr) {
  double sl = 0, sr = 0, nl = 0, nr = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= thr) {
      sl += y[i];
      nl += 1;
    } else {
      sr += y[i];
      nr += 1;
    }
  }
  double sse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double mean = x[i] <= thr ? sl / nl : sr / nr;
    sse += (y[i] - mean) * (y[i] - mean);
  }
  return sse;
}

}  // namespace

TEST_CASE("estimated_mse is zero when the residual is explained") {
  std::mt19937_64 rng(1);
  Matrix w = oracle::random_mask(rng, 6, 5, 0.4);
  CHECK(estimated_mse(Matrix::Zero(6, 5), {w}) == 0.0);
  CHECK(estimated_mse(3.0 * w, {w}) < 1e-20);
}

TEST_CASE("estimated_mse matches the dense normal-equation oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix r = oracle::random_matrix(rng, 7, 6);
    MaskList masks{oracle::random_mask(rng, 7, 6, 0.4), oracle::random_mask(rng, 7, 6, 0.4),
                   oracle::random_mask(rng, 7, 6, 0.4)};
    CHECK(estimated_mse(r, masks) == doctest::Approx(oracle::joint_least_squares(r, masks, false)).epsilon(1e-9));
  }
}

TEST_CASE("candidate thresholds are midpoints of distinct values") {
  auto thr = candidate_thresholds({3.0, 1.0, 2.0, 2.0}, 64);
  REQUIRE(thr.size() == 2);
  CHECK(thr[0] == 1.5);
  CHECK(thr[1] == 2.5);
  CHECK(candidate_thresholds({1.0, 1.0}, 64).empty());

  std::vector<double> many;
  for (int i = 0; i < 1000; ++i) many.push_back(i * 0.001);
  auto sub = candidate_thresholds(many, 64);
  CHECK(sub.size() <= 64);
  CHECK(sub.size() >= 60);
  CHECK(std::is_sorted(sub.begin(), sub.end()));
}

TEST_CASE("find_best_split recovers a step in X_1 and matches brute force") {
  std::mt19937_64 rng(7);
  const Eigen::Index n = 30, T = 30;
  std::vector<Matrix> cov{fixture::uniform(rng, n, T), fixture::uniform(rng, n, T)};
  Matrix w = Matrix::Ones(n, T);
  Matrix o = (cov[0].array() > 0.5).cast<double>().matrix() * 2.0;
  Panel panel = fixture::make_panel(o, cov, {w});
  auto forest = TreatmentForest::single_leaf(panel);
  SplitConstraints c;
  c.max_candidates = 1 << 20;
  auto res = find_best_split(panel, Matrix::Zero(n, T), Vector::Zero(n), forest, 0, c);
  REQUIRE(res.best);
  CHECK(res.best->covariate == 0);
  CHECK(std::abs(res.best->threshold - 0.5) <= 0.05);

  // Brute force over every midpoint of covariate 0.
  std::vector<double> x(cov[0].data(), cov[0].data() + cov[0].size());
  std::vector<double> y(o.data(), o.data() + o.size());
  double best_sse = std::numeric_limits<double>::infinity();
  for (double thr : candidate_thresholds(x, 1 << 20)) {
    const double left = static_cast<double>(std::count_if(x.begin(), x.end(), [&](double v) { return v <= thr; }));
    if (left < c.alpha * x.size() || x.size() - left < c.alpha * x.size()) continue;
    best_sse = std::min(best_sse, two_group_sse(x, y, thr));
  }
  CHECK(res.best->est_mse == doctest::Approx(best_sse).epsilon(1e-9).scale(1.0));
}

TEST_CASE("find_best_split returns nothing for a homogeneous effect") {
  std::mt19937_64 rng(8);
  const Eigen::Index n = 20, T = 16;
  Matrix w = fixture::block_treatment(n, T);
  Panel panel = fixture::make_panel(3.0 * w, {fixture::uniform(rng, n, T), fixture::uniform(rng, n, T)}, {w});
  auto forest = TreatmentForest::single_leaf(panel);
  // (M, m) from a zero-noise fit: residual is exactly 3 W - m 1^T with m = 0.
  auto res = find_best_split(panel, Matrix::Zero(n, T), Vector::Zero(n), forest, 0, SplitConstraints{});
  CHECK_FALSE(res.best);
}

TEST_CASE("find_best_split needs a treated entry on each side") {
  std::mt19937_64 rng(9);
  const Eigen::Index n = 10, T = 10;
  Matrix w = Matrix::Zero(n, T);
  w(3, 4) = 1.0;
  Panel panel = fixture::make_panel(oracle::random_matrix(rng, n, T), {fixture::uniform(rng, n, T)}, {w});
  auto forest = TreatmentForest::single_leaf(panel);
  auto res = find_best_split(panel, Matrix::Zero(n, T), Vector::Zero(n), forest, 0, SplitConstraints{});
  CHECK_FALSE(res.best);
  CHECK(res.num_evaluated == 0);
}

TEST_CASE("parallel split search agrees with the serial reference") {
  std::mt19937_64 rng(10);
  const Eigen::Index n = 18, T = 14;
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<Matrix> cov{fixture::uniform(rng, n, T), fixture::uniform(rng, n, T), fixture::uniform(rng, n, T)};
    std::vector<Matrix> w{oracle::random_mask(rng, n, T, 0.5), oracle::random_mask(rng, n, T, 0.4)};
    Panel panel = fixture::make_panel(oracle::random_matrix(rng, n, T), cov, w);
    auto forest = TreatmentForest::single_leaf(panel);
    // Grow a few splits so several leaves and overlapping treatments exist.
    forest.apply_split(panel, {0, 0, 0, 0.5, 0.0});
    forest.apply_split(panel, {1, 0, 1, 0.4, 0.0});
    forest.apply_split(panel, {0, 1, 2, 0.6, 0.0});
    const Matrix m_hat = 0.3 * oracle::random_matrix(rng, n, T);
    const Vector row = oracle::random_matrix(rng, n, 1);
    SplitConstraints c;
    c.max_candidates = 20;
    for (std::size_t i = 0; i < 2; ++i) {
      auto fast = find_best_split(panel, m_hat, row, forest, i, c, true);
      auto ref = find_best_split_reference(panel, m_hat, row, forest, i, c, true);
      REQUIRE(fast.evaluated.size() == ref.evaluated.size());
      const double scale = (panel.outcomes - m_hat).squaredNorm();
      for (std::size_t e = 0; e < fast.evaluated.size(); ++e) {
        CHECK(fast.evaluated[e].threshold == ref.evaluated[e].threshold);
        CHECK(std::abs(fast.evaluated[e].est_mse - ref.evaluated[e].est_mse) <= 1e-9 * scale);
      }
      CHECK(fast.current_mse == doctest::Approx(ref.current_mse).epsilon(1e-12));
      REQUIRE(fast.best.has_value() == ref.best.has_value());
      if (fast.best) {
        CHECK(fast.best->cluster == ref.best->cluster);
        CHECK(fast.best->covariate == ref.best->covariate);
        CHECK(fast.best->threshold == ref.best->threshold);
      }
    }
  }
}

TEST_CASE("split search is independent of the thread count") {
  std::mt19937_64 rng(11);
  const Eigen::Index n = 25, T = 20;
  std::vector<Matrix> cov{fixture::uniform(rng, n, T), fixture::uniform(rng, n, T), fixture::uniform(rng, n, T)};
  Matrix w = oracle::random_mask(rng, n, T, 0.5);
  Panel panel = fixture::make_panel(oracle::random_matrix(rng, n, T), cov, {w});
  auto forest = TreatmentForest::single_leaf(panel);
  forest.apply_split(panel, {0, 0, 1, 0.5, 0.0});
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  auto one = find_best_split(panel, Matrix::Zero(n, T), Vector::Zero(n), forest, 0, SplitConstraints{}, true);
  omp_set_num_threads(4);
  auto four = find_best_split(panel, Matrix::Zero(n, T), Vector::Zero(n), forest, 0, SplitConstraints{}, true);
  omp_set_num_threads(saved);
  REQUIRE(one.evaluated.size() == four.evaluated.size());
  for (std::size_t e = 0; e < one.evaluated.size(); ++e) CHECK(one.evaluated[e].est_mse == four.evaluated[e].est_mse);
  REQUIRE(one.best);
  CHECK(one.best->threshold == four.best->threshold);
}

TEST_CASE("every evaluated candidate is alpha-regular with treated entries on both sides") {
  std::mt19937_64 rng(12);
  const Eigen::Index n = 20, T = 20;
  std::vector<Matrix> cov{fixture::uniform(rng, n, T), fixture::uniform(rng, n, T)};
  Matrix w = oracle::random_mask(rng, n, T, 0.1);
  Panel panel = fixture::make_panel(oracle::random_matrix(rng, n, T), cov, {w});
  auto forest = TreatmentForest::single_leaf(panel);
  SplitConstraints c;
  c.alpha = 0.2;
  c.min_treated_per_side = 3;
  auto res = find_best_split(panel, Matrix::Zero(n, T), Vector::Zero(n), forest, 0, c, true);
  REQUIRE(!res.evaluated.empty());
  for (const auto& cand : res.evaluated) {
    const auto left = (cov[cand.covariate].array() <= cand.threshold);
    const double nl = static_cast<double>(left.count());
    CHECK(nl >= c.alpha * n * T);
    CHECK(n * T - nl >= c.alpha * n * T);
    const double tl = (left.cast<double>() * w.array()).sum();
    CHECK(tl >= 3);
    CHECK(w.sum() - tl >= 3);
    CHECK(res.best->est_mse <= cand.est_mse);
  }
}

TEST_CASE("build_forest with one leaf keeps all-ones clusters") {
  std::mt19937_64 rng(13);
  Panel panel = step_panel(rng, 12, 10, -1.0, 2.0);
  BuildOptions opt;
  opt.max_leaves = 1;
  auto built = build_forest(panel, opt);
  CHECK(built.forest.leaf_count(0) == 1);
  CHECK(built.forest.cluster_mask(0, 0) == Matrix::Ones(12, 10));
  CHECK(built.trace.empty());
}

TEST_CASE("build_forest splits a two-level effect on the true threshold") {
  std::mt19937_64 rng(14);
  const Eigen::Index n = 30, T = 30;
  Panel panel = step_panel(rng, n, T, -1.0, 2.0);
  BuildOptions opt;
  opt.max_leaves = 2;
  opt.target_rank = 1;
  auto built = build_forest(panel, opt);
  REQUIRE(built.forest.leaf_count(0) == 2);
  REQUIRE(built.trace.size() == 1);
  CHECK(built.trace[0].covariate == 0);

  // Masks agree with 1{X_0 <= 0.5} on every treated entry.
  const Matrix& w = panel.treatments[0];
  const Matrix left = built.forest.cluster_mask(0, 0);
  const Matrix truth = (panel.covariates[0].array() <= 0.5).cast<double>();
  CHECK((left - truth).cwiseProduct(w).cwiseAbs().sum() == 0.0);

  // Per-cluster least squares equals the direct group means of O on treated entries.
  MaskList masks{left.cwiseProduct(w), (Matrix::Ones(n, T) - left).cwiseProduct(w)};
  auto fit = fit_regressors(panel.outcomes, RegressorBasis{masks, true});
  CHECK(fit.tau(0) == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(fit.tau(1) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(inner(masks[0], panel.outcomes) / masks[0].sum() == doctest::Approx(-1.0));
  CHECK(inner(masks[1], panel.outcomes) / masks[1].sum() == doctest::Approx(2.0));
}

TEST_CASE("cluster masks partition the grid after every iteration") {
  std::mt19937_64 rng(15);
  const Eigen::Index n = 20, T = 16;
  std::vector<Matrix> cov{fixture::uniform(rng, n, T), fixture::uniform(rng, n, T)};
  std::vector<Matrix> w{oracle::random_mask(rng, n, T, 0.5), oracle::random_mask(rng, n, T, 0.5)};
  Matrix o = fixture::low_rank(rng, n, T, 2) + 3.0 * cov[0].cwiseProduct(w[0]) - 2.0 * cov[1].cwiseProduct(w[1]);
  Panel panel = fixture::make_panel(o, cov, w);
  BuildOptions opt;
  opt.max_leaves = 6;
  opt.target_rank = 2;
  int calls = 0;
  opt.observer = [&](const TreatmentForest& f, int) {
    ++calls;
    for (std::size_t i = 0; i < 2; ++i) {
      Matrix sum = Matrix::Zero(n, T);
      for (int j = 0; j < f.leaf_count(i); ++j) sum += f.cluster_mask(i, j);
      CHECK(sum == Matrix::Ones(n, T));
      CHECK(f.leaf_count(i) <= 6);
    }
  };
  auto built = build_forest(panel, opt);
  CHECK(calls >= 1);

  // assign_leaf agrees with the stored membership on every in-sample entry.
  for (std::size_t i = 0; i < 2; ++i) {
    for (Eigen::Index t = 0; t < T; ++t) {
      for (Eigen::Index z = 0; z < n; ++z) {
        CHECK(assign_leaf(built.forest, i, panel.covariate_vector(z, t)) == built.forest.assignment[i](z, t));
      }
    }
  }
}

TEST_CASE("with lambda fixed, step-1 objectives do not increase") {
  std::mt19937_64 rng(16);
  const Eigen::Index n = 20, T = 20;
  Panel panel = step_panel(rng, n, T, 1.0, 4.0, 2);
  panel.outcomes += fixture::low_rank(rng, n, T, 2) + 0.05 * oracle::random_matrix(rng, n, T);
  BuildOptions opt;
  opt.max_leaves = 6;
  opt.fixed_lambda = 3.0;
  auto built = build_forest(panel, opt);
  REQUIRE(built.trace.size() >= 2);
  for (std::size_t r = 1; r < built.trace.size(); ++r) {
    CHECK(built.trace[r].objective <= built.trace[r - 1].objective * (1 + 1e-9) + 1e-12);
  }
}

TEST_CASE("assign_leaf routing conventions") {
  std::mt19937_64 rng(17);
  Panel panel = step_panel(rng, 6, 6, 0.0, 1.0);
  auto forest = TreatmentForest::single_leaf(panel);
  Vector x(2);
  x << 0.9, 0.1;
  CHECK(assign_leaf(forest, 0, x) == 0);
  forest.apply_split(panel, {0, 0, 0, 0.5, 0.0});
  x(0) = 0.5;
  CHECK(assign_leaf(forest, 0, x) == 0);
  x(0) = 0.5000001;
  CHECK(assign_leaf(forest, 0, x) == 1);
  x(0) = 1.7;
  CHECK(assign_leaf(forest, 0, x) == 1);
  x(0) = -3.0;
  CHECK(assign_leaf(forest, 0, x) == 0);
}

TEST_CASE("fair-split trees never avoid a covariate for ceil(pi p)+1 consecutive splits") {
  std::mt19937_64 rng(18);
  const Eigen::Index n = 30, T = 30;
  // The effect depends only on covariate 0, so an unconstrained tree ignores covariate 1.
  std::vector<Matrix> cov{fixture::uniform(rng, n, T), fixture::uniform(rng, n, T)};
  Matrix w = fixture::block_treatment(n, T);
  Matrix o = (4.0 * cov[0].array().square()).matrix().cwiseProduct(w) + fixture::low_rank(rng, n, T, 1);
  Panel panel = fixture::make_panel(o, cov, {w});
  BuildOptions opt;
  opt.max_leaves = 16;
  opt.target_rank = 1;
  opt.constraints.alpha = 0.05;
  opt.constraints.fair_split_pi = 1.2;
  auto built = build_forest(panel, opt);
  const auto window = static_cast<std::size_t>(std::ceil(1.2 * 2));
  const TreatmentTree& tree = built.forest.trees[0];
  bool some_deep = false;
  for (int leaf = 0; leaf < tree.leaf_count(); ++leaf) {
    const auto path = tree.ancestor_covariates(leaf);
    some_deep = some_deep || path.size() > window;
    for (std::size_t start = 0; start + window + 1 <= path.size(); ++start) {
      for (std::size_t cov_id = 0; cov_id < 2; ++cov_id) {
        bool avoided = true;
        for (std::size_t s = start; s < start + window + 1; ++s) avoided = avoided && path[s] != cov_id;
        CHECK_FALSE(avoided);
      }
    }
  }
  CHECK(some_deep);
}

TEST_CASE("forest serializes to JSON, text and trace CSV") {
  std::mt19937_64 rng(19);
  Panel panel = step_panel(rng, 20, 20, -1.0, 2.0);
  BuildOptions opt;
  opt.max_leaves = 3;
  opt.target_rank = 1;
  auto built = build_forest(panel, opt);
  auto j = forest_to_json(built.forest);
  CHECK(j["trees"].size() == 1);
  CHECK(j["trees"][0]["root"].contains("covariate"));
  CHECK(j["trees"][0]["root"]["children"].size() == 2);
  CHECK(forest_to_text(built.forest).find("if x[0] <=") != std::string::npos);
  auto path = std::filesystem::temp_directory_path() / "pace_trace_test.csv";
  write_trace_csv(path, built.trace);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "iteration,treatment,cluster,covariate,threshold,est_mse,lambda");
}

TEST_CASE("split constraints are validated") {
  SplitConstraints c;
  c.alpha = 0.5;
  CHECK_THROWS_AS(c.check(), Error);
  c.alpha = 0.1;
  c.fair_split_pi = 1.0;
  CHECK_THROWS_AS(c.check(), Error);
}

TEST_CASE("refinement finds the exact cut even with a coarse candidate grid") {
  std::mt19937_64 rng(20);
  const Eigen::Index n = 40, T = 40;
  std::vector<Matrix> cov{fixture::uniform(rng, n, T)};
  Matrix o = (cov[0].array() > 0.5).cast<double>().matrix() * 2.0;
  Panel panel = fixture::make_panel(o, cov, {Matrix::Ones(n, T)});
  auto forest = TreatmentForest::single_leaf(panel);
  SplitConstraints c;
  c.max_candidates = 8;
  auto res = find_best_split(panel, Matrix::Zero(n, T), Vector::Zero(n), forest, 0, c);
  REQUIRE(res.best);
  CHECK(res.best->est_mse < 1e-18);
  double below = 0.0, above = 1.0;
  for (Eigen::Index idx = 0; idx < cov[0].size(); ++idx) {
    const double v = cov[0](idx);
    if (v <= 0.5) below = std::max(below, v);
    else above = std::min(above, v);
  }
  CHECK(res.best->threshold == 0.5 * (below + above));
  auto ref = find_best_split_reference(panel, Matrix::Zero(n, T), Vector::Zero(n), forest, 0, c);
  REQUIRE(ref.best);
  CHECK(ref.best->threshold == res.best->threshold);
}
