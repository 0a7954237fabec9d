#include "ibpica/whitening.hpp"

#include <cmath>

#include "ibpica/errors.hpp"

namespace ibpica {

namespace {
constexpr double kFloorRatio = 1e-8;
constexpr double kRankRatio = 1e-10;
}  // namespace

Vector WhiteningTransform::apply(const Vector& x) const {
  if (static_cast<std::size_t>(x.size()) != input_dim())
    throw InvalidArgument("whitening: input has length " + std::to_string(x.size()) + ", expected " +
                          std::to_string(input_dim()));
  return projection * (x - mean);
}

Matrix WhiteningTransform::apply_rows(const Matrix& X) const {
  if (static_cast<std::size_t>(X.cols()) != input_dim())
    throw InvalidArgument("whitening: input has " + std::to_string(X.cols()) + " columns, expected " +
                          std::to_string(input_dim()));
  return (X.rowwise() - mean.transpose()) * projection.transpose();
}

void WhiteningTransform::validate() const {
  if (mean.size() == 0 || projection.rows() == 0) throw InvalidArgument("whitening: empty transform");
  if (projection.cols() != mean.size()) throw InvalidArgument("whitening: projection width must equal D");
  if (projection.rows() > mean.size()) throw InvalidArgument("whitening: retained dimension exceeds D");
  if (!projection.allFinite() || !mean.allFinite()) throw InvalidArgument("whitening: non-finite entries");
}

WhiteningTransform fit_whitening(const Matrix& samples, double variance_to_keep) {
  if (!(variance_to_keep > 0.0 && variance_to_keep <= 1.0))
    throw InvalidArgument("whitening: variance_to_keep must lie in (0, 1]");
  if (samples.rows() < 1 || samples.cols() < 1) throw InvalidArgument("whitening: empty sample");
  if (!samples.allFinite()) throw InvalidArgument("whitening: non-finite sample");
  const auto D = samples.cols();

  WhiteningTransform w;
  w.mean = samples.colwise().mean().transpose();
  const Matrix centred = samples.rowwise() - w.mean.transpose();
  const Matrix cov = (centred.transpose() * centred) / static_cast<double>(samples.rows());
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success) throw NumericalError("whitening: eigendecomposition failed");

  // Descending order.
  const Vector evals = es.eigenvalues().reverse();
  const Matrix evecs = es.eigenvectors().rowwise().reverse();
  const double top = std::max(evals(0), 0.0);
  if (!(top > 0.0)) throw NumericalError("whitening: sample has zero variance");
  w.eig_floor = kFloorRatio * top;

  Eigen::Index rank = 0;
  while (rank < D && evals(rank) > kRankRatio * top) ++rank;
  double total = 0.0;
  for (Eigen::Index i = 0; i < rank; ++i) total += evals(i);
  Eigen::Index keep = 0;
  double cum = 0.0;
  while (keep < rank && cum < variance_to_keep * total * (1.0 - 1e-12)) cum += evals(keep++);
  keep = std::max<Eigen::Index>(keep, 1);

  w.projection.resize(keep, D);
  for (Eigen::Index i = 0; i < keep; ++i) {
    Vector v = evecs.col(i);
    // Deterministic sign: largest-magnitude component positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    w.projection.row(i) = v.transpose() / std::sqrt(evals(i) + w.eig_floor);
  }
  return w;
}

WhiteningTransform identity_whitening(std::size_t dims) {
  if (dims < 1) throw InvalidArgument("whitening: dimension must be >= 1");
  WhiteningTransform w;
  w.mean = Vector::Zero(static_cast<Eigen::Index>(dims));
  w.projection = Matrix::Identity(static_cast<Eigen::Index>(dims), static_cast<Eigen::Index>(dims));
  return w;
}

}  // namespace ibpica
