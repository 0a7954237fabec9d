#include "ibpica/kmeans.hpp"

#include <algorithm>
#include <limits>
#include <set>

#include "ibpica/errors.hpp"
#include "ibpica/parallel.hpp"
#include "ibpica/rng.hpp"

namespace ibpica {

namespace {

std::vector<double> row_key(const Matrix& X, Eigen::Index r) {
  std::vector<double> key(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index c = 0; c < X.cols(); ++c) key[static_cast<std::size_t>(c)] = X(r, c);
  return key;
}

double total_cost(const Codebook& cb, const Matrix& X, const std::vector<std::size_t>& labels) {
  double cost = 0.0;
  for (Eigen::Index r = 0; r < X.rows(); ++r)
    cost += (X.row(r) - cb.centers.row(static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)]))).squaredNorm();
  return cost;
}

}  // namespace

std::size_t nearest_center(const Codebook& cb, const Eigen::Ref<const Vector>& x) {
  if (static_cast<std::size_t>(x.size()) != cb.dims())
    throw InvalidArgument("quantize: feature has length " + std::to_string(x.size()) + ", codebook expects " +
                          std::to_string(cb.dims()));
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < cb.centers.rows(); ++c) {
    const double d = (cb.centers.row(c).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::size_t>(c);
    }
  }
  return best;
}

std::vector<std::size_t> assign(const Codebook& cb, const Matrix& features) {
  if (features.rows() > 0 && static_cast<std::size_t>(features.cols()) != cb.dims())
    throw InvalidArgument("quantize: features have " + std::to_string(features.cols()) + " columns, codebook expects " +
                          std::to_string(cb.dims()));
  std::vector<std::size_t> labels(static_cast<std::size_t>(features.rows()));
  parallel_for(labels.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) labels[r] = nearest_center(cb, features.row(static_cast<Eigen::Index>(r)).transpose());
  });
  return labels;
}

Vector quantize(const Codebook& cb, const Matrix& features) {
  if (cb.size() < 1) throw InvalidArgument("quantize: empty codebook");
  Vector hist = Vector::Zero(static_cast<Eigen::Index>(cb.size()));
  if (features.rows() == 0) {
    warn("quantize: no feature vectors; returning an all-zero histogram");
    return hist;
  }
  for (std::size_t label : assign(cb, features)) hist(static_cast<Eigen::Index>(label)) += 1.0;
  return hist / static_cast<double>(features.rows());
}

KMeansResult kmeans_fit(const Matrix& X, std::size_t clusters, std::uint64_t seed, std::size_t max_iter) {
  if (clusters < 1) throw InvalidArgument("kmeans: C must be >= 1");
  if (X.rows() < static_cast<Eigen::Index>(clusters))
    throw InvalidArgument("kmeans: sample size " + std::to_string(X.rows()) + " is smaller than C = " +
                          std::to_string(clusters));
  if (!X.allFinite()) throw InvalidArgument("kmeans: non-finite features");

  std::set<std::vector<double>> distinct;
  for (Eigen::Index r = 0; r < X.rows() && distinct.size() < clusters; ++r) distinct.insert(row_key(X, r));
  std::size_t C = clusters;
  if (distinct.size() < C) {
    warn("kmeans: only " + std::to_string(distinct.size()) + " distinct points; reducing C from " +
         std::to_string(C) + " to " + std::to_string(distinct.size()));
    C = distinct.size();
  }
  const auto n = static_cast<std::size_t>(X.rows());

  // k-means++ seeding.
  RngStream rng(seed, 0);
  KMeansResult res;
  Matrix& centers = res.codebook.centers;
  centers.resize(static_cast<Eigen::Index>(C), X.cols());
  centers.row(0) = X.row(static_cast<Eigen::Index>(rng.below(n)));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = (X.row(static_cast<Eigen::Index>(i)) - centers.row(0)).squaredNorm();
  for (std::size_t c = 1; c < C; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    const double target = rng.uniform() * total;
    double acc = 0.0;
    bool found = false;
    for (std::size_t i = 0; i < n; ++i) {
      acc += d2[i];
      if (d2[i] > 0.0 && acc > target) {
        pick = i;
        found = true;
        break;
      }
    }
    if (!found) {
      // Rounding pushed the target past the end; take the last point with mass.
      for (std::size_t i = n; i-- > 0;)
        if (d2[i] > 0.0) {
          pick = i;
          break;
        }
    }
    centers.row(static_cast<Eigen::Index>(c)) = X.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (X.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(c))).squaredNorm());
  }

  std::vector<std::size_t> labels = assign(res.codebook, X);
  for (std::size_t it = 0; it < max_iter; ++it) {
    // Update step; an empty cluster keeps its centre.
    Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(C), X.cols());
    std::vector<std::size_t> counts(C, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(labels[i])) += X.row(static_cast<Eigen::Index>(i));
      ++counts[labels[i]];
    }
    for (std::size_t c = 0; c < C; ++c)
      if (counts[c] > 0) centers.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
    res.objective.push_back(total_cost(res.codebook, X, labels));
    ++res.iterations;

    std::vector<std::size_t> next = assign(res.codebook, X);
    if (next == labels) {
      res.converged = true;
      break;
    }
    labels = std::move(next);
  }
  return res;
}

}  // namespace ibpica
