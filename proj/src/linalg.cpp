#include "pace/linalg.hpp"
#include "pace/error.hpp"

#include <cmath>
#include <limits>

namespace pace {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingEntry: return "MissingEntry";
    case ErrorCode::DuplicateEntry: return "DuplicateEntry";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidTreatment: return "InvalidTreatment";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::NumericalBreakdown: return "NumericalBreakdown";
    case ErrorCode::RankUnreachable: return "RankUnreachable";
    case ErrorCode::PreconditionViolation: return "PreconditionViolation";
    case ErrorCode::NotOrthonormal: return "NotOrthonormal";
    case ErrorCode::NoTreatedObservations: return "NoTreatedObservations";
    case ErrorCode::DegenerateIdentification: return "DegenerateIdentification";
    case ErrorCode::NeedTwoCovariates: return "NeedTwoCovariates";
    case ErrorCode::DegenerateEffect: return "DegenerateEffect";
    case ErrorCode::NoControlEntries: return "NoControlEntries";
    case ErrorCode::ZeroTruthNorm: return "ZeroTruthNorm";
    case ErrorCode::NoGroundTruth: return "NoGroundTruth";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

namespace {

Matrix pinv_from_eigen(const Eigen::SelfAdjointEigenSolver<Matrix>& es, double rel_tol) {
  const Vector& ev = es.eigenvalues();
  const double top = ev.size() > 0 ? ev.cwiseAbs().maxCoeff() : 0.0;
  Vector inv = Vector::Zero(ev.size());
  if (top > 0.0) {
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
      if (ev(i) > rel_tol * top) inv(i) = 1.0 / ev(i);
    }
  }
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Vector pinv_solve_psd(const Matrix& gram, const Vector& rhs, double rel_tol) {
  if (gram.rows() == 0) return Vector::Zero(0);
  Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
  return pinv_from_eigen(es, rel_tol) * rhs;
}

Matrix pinv_psd(const Matrix& gram, double rel_tol) {
  if (gram.rows() == 0) return Matrix::Zero(0, 0);
  Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
  return pinv_from_eigen(es, rel_tol);
}

double condition_number_psd(const Matrix& gram) {
  if (gram.rows() == 0) return 1.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
  const double hi = es.eigenvalues().maxCoeff();
  const double lo = es.eigenvalues().minCoeff();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

double spectral_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  Eigen::BDCSVD<Matrix> svd(a);
  return svd.singularValues()(0);
}

bool all_finite(const Matrix& a) { return a.allFinite(); }

}  // namespace pace
