#pragma once

#include "ibpica/model.hpp"

namespace ibpica {

/// PCA whitening: y = projection * (x - mean), projection rows are
/// eigenvectors scaled by 1/sqrt(eigenvalue + eig_floor).
struct WhiteningTransform {
  Vector mean;        // D
  Matrix projection;  // D' x D
  double eig_floor = 0.0;

  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(mean.size()); }
  std::size_t retained_dim() const noexcept { return static_cast<std::size_t>(projection.rows()); }
  Vector apply(const Vector& x) const;
  /// Row-wise application to an n x D sample.
  Matrix apply_rows(const Matrix& X) const;
  void validate() const;
};

/// Keep the smallest D' whose eigenvalues reach `variance_to_keep` of the
/// total variance, capped at the numerical rank. The floor is
/// 1e-8 times the largest eigenvalue.
WhiteningTransform fit_whitening(const Matrix& samples, double variance_to_keep = 0.99);

/// Identity transform on D dims (used when whitening is switched off).
WhiteningTransform identity_whitening(std::size_t dims);

}  // namespace ibpica
