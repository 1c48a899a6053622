#pragma once

#include <Eigen/Dense>

#include <vector>

namespace pace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MaskList = std::vector<Matrix>;

inline double inner(const Matrix& a, const Matrix& b) { return (a.array() * b.array()).sum(); }

/// A(I - 11^T/T): subtract each row's mean.
inline Matrix row_center(const Matrix& a) {
  return a.colwise() - a.rowwise().mean();
}

/// Moore-Penrose solve of a symmetric PSD system. Eigenvalues below
/// rel_tol * max eigenvalue are treated as zero (minimum-norm solution).
Vector pinv_solve_psd(const Matrix& gram, const Vector& rhs, double rel_tol = 1e-12);

/// Pseudo-inverse of a symmetric PSD matrix with the same cut-off rule.
Matrix pinv_psd(const Matrix& gram, double rel_tol = 1e-12);

/// 2-norm condition number of a symmetric PSD matrix (inf when singular).
double condition_number_psd(const Matrix& gram);

double spectral_norm(const Matrix& a);

bool all_finite(const Matrix& a);

}  // namespace pace
