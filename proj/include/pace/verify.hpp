#pragma once

#include "pace/linalg.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace pace {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct SuiteResult {
  std::string name;
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool passed() const;
};

struct VerifyReport {
  std::vector<SuiteResult> suites;

  bool passed() const;
  std::vector<std::string> failing_checks() const;
  nlohmann::json to_json() const;
  std::string summary_table() const;
};

/// solver, decomposition, tree, density, convergence.
const std::vector<std::string>& verify_suite_names();

/// Runs one suite, or every suite for "all", at fixed seeds. Unknown names
/// throw ConfigError.
VerifyReport run_verify(const std::string& suite, int jobs = 1);

/// Optimal value of 1/2||O - M - m1^T - sum tau_i Z_i||^2 + lambda||M||_* by
/// accelerated proximal gradient on M with (tau, m) profiled out. Independent
/// of the alternating solver; used to certify it.
double proximal_gradient_objective(const Matrix& outcomes, const MaskList& masks,
                                   double lambda, int iterations = 5000);

}  // namespace pace
