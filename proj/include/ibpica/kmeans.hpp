#pragma once

#include <cstdint>
#include <vector>

#include "ibpica/model.hpp"

namespace ibpica {

struct Codebook {
  Matrix centers;  // C x F

  std::size_t size() const noexcept { return static_cast<std::size_t>(centers.rows()); }
  std::size_t dims() const noexcept { return static_cast<std::size_t>(centers.cols()); }
};

struct KMeansResult {
  Codebook codebook;
  std::vector<double> objective;  // sum of squared distances after each Lloyd step
  std::size_t iterations = 0;
  bool converged = false;  // assignments reached a fixpoint
};

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or 100 iterations. When the sample has fewer than C distinct
/// points, C is reduced to that count with a warning.
KMeansResult kmeans_fit(const Matrix& features, std::size_t clusters, std::uint64_t seed,
                        std::size_t max_iter = 100);

/// Index of the nearest centre (Euclidean); ties go to the lowest index.
std::size_t nearest_center(const Codebook& cb, const Eigen::Ref<const Vector>& x);
std::vector<std::size_t> assign(const Codebook& cb, const Matrix& features);

/// Normalised histogram of nearest-centre assignments. An empty sample gives
/// an all-zero histogram and a warning.
Vector quantize(const Codebook& cb, const Matrix& features);

}  // namespace ibpica
