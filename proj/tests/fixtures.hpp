#pragma once

#include "oracles.hpp"
#include "pace/panel.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace pace::fixture {

inline std::vector<std::string> labels(Eigen::Index count, const std::string& prefix) {
  std::vector<std::string> out;
  for (Eigen::Index i = 0; i < count; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

inline Matrix uniform(std::mt19937_64& rng, Eigen::Index n, Eigen::Index T) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(n, T);
  for (Eigen::Index j = 0; j < T; ++j)
    for (Eigen::Index i = 0; i < n; ++i) m(i, j) = u(rng);
  return m;
}

/// Units [n/2, n) treated on periods [T/2, T).
inline Matrix block_treatment(Eigen::Index n, Eigen::Index T) {
  Matrix w = Matrix::Zero(n, T);
  w.bottomRightCorner(n - n / 2, T - T / 2).setOnes();
  return w;
}

inline Matrix low_rank(std::mt19937_64& rng, Eigen::Index n, Eigen::Index T, Eigen::Index r) {
  return oracle::random_matrix(rng, n, r) * oracle::random_matrix(rng, T, r).transpose();
}

inline Panel make_panel(Matrix outcomes, std::vector<Matrix> covariates, std::vector<Matrix> treatments) {
  Panel p;
  p.unit_ids = labels(outcomes.rows(), "u");
  p.time_ids = labels(outcomes.cols(), "");
  p.outcomes = std::move(outcomes);
  p.covariates = std::move(covariates);
  p.treatments = std::move(treatments);
  return p;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("pace_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace pace::fixture
