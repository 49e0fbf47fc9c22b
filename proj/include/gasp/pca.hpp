#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "gasp/geom.hpp"

namespace gasp {

class RankDeficientError : public Error {
 public:
  RankDeficientError(int achieved, int requested);
  int achieved_rank() const { return achieved_; }

 private:
  int achieved_;
};

/// Eigenpairs of a symmetric matrix, eigenvalues in non-increasing order and
/// eigenvectors as matching columns.
struct SymmetricEigen {
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
  int sweeps = 0;
};

/// Cyclic Jacobi rotations until every off-diagonal entry is negligible.
SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& symmetric, int max_sweeps = 100);

struct PcaModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // d x input_dim, orthonormal rows
  Eigen::VectorXd explained_variance;

  int output_dim() const { return static_cast<int>(components.rows()); }
  int input_dim() const { return static_cast<int>(components.cols()); }
};

/// Rows of `samples` are observations. Components are the top-d eigenvectors
/// of the sample covariance (1/(n-1) normalisation), each sign-normalised so
/// its largest-magnitude entry is positive.
PcaModel fit_pca(const Eigen::MatrixXd& samples, int d);

Eigen::VectorXd project(const PcaModel& model, std::span<const double> v);
Eigen::VectorXd reconstruct(const PcaModel& model, const Eigen::VectorXd& coefficients);

/// Mean squared reconstruction error with the same 1/(n-1) normalisation as
/// the covariance, i.e. the variance left outside the retained subspace.
double projection_residual(const PcaModel& model, const Eigen::MatrixXd& samples);

/// "GASPPCA\0", u32 version, u32 reserved, u32 d, u32 input_dim, then mean,
/// components (row-major) and explained variance as f64.
std::vector<std::uint8_t> encode_pca(const PcaModel& model);
PcaModel decode_pca(const std::vector<std::uint8_t>& bytes);

}  // namespace gasp
