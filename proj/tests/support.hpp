#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "ibpica/inference.hpp"
#include "ibpica/network.hpp"

namespace testing {

using ibpica::Matrix;
using ibpica::ModelState;
using ibpica::Vector;

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return a.size() ? (a - b).cwiseAbs().maxCoeff() : 0.0;
}

/// Relative-or-absolute closeness used by the oracle comparisons.
inline bool close(double a, double b, double tol) { return std::fabs(a - b) <= tol * std::max(1.0, std::fabs(b)); }
inline bool close(const Matrix& a, const Matrix& b, double tol) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (!close(a.data()[i], b.data()[i], tol)) return false;
  return true;
}

/// Arbitrary valid posterior state with every parameter drawn at random, not
/// reachable from any update: the oracles must agree from any starting point.
inline ModelState random_state(std::mt19937_64& rng, int N, int D, int K, int J,
                               ibpica::UpdateMode mode = ibpica::UpdateMode::Exact) {
  std::uniform_real_distribution<double> pos(0.5, 2.5), unit(0.05, 0.95);
  std::normal_distribution<double> gauss(0.0, 1.0);
  ModelState s;
  s.mode = mode;
  auto& hp = s.hp;
  hp.a = pos(rng), hp.b = pos(rng), hp.c = pos(rng), hp.f = pos(rng);
  hp.gamma1 = pos(rng), hp.gamma2 = pos(rng), hp.eta1 = pos(rng), hp.eta2 = pos(rng);
  hp.xi.clear();
  for (int j = 0; j < J; ++j) hp.xi.push_back(pos(rng));

  s.loadings.activity.resize(D, K);
  s.loadings.mean.resize(D, K);
  s.loadings.precision.resize(K);
  for (int d = 0; d < D; ++d)
    for (int k = 0; k < K; ++k) {
      s.loadings.activity(d, k) = unit(rng);
      s.loadings.mean(d, k) = gauss(rng);
    }
  for (int k = 0; k < K; ++k) s.loadings.precision(k) = pos(rng);

  auto& S = s.sources;
  S.mean.resize(N, K);
  S.variance.resize(N, K);
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      S.mean(n, k) = gauss(rng);
      S.variance(n, k) = unit(rng);
    }
  S.responsibilities.assign(J, Matrix(N, K));
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      double tot = 0.0;
      std::vector<double> w(J);
      for (int j = 0; j < J; ++j) tot += (w[j] = pos(rng));
      for (int j = 0; j < J; ++j) S.responsibilities[j](n, k) = w[j] / tot;
    }
  S.mixture_weights.resize(K, J);
  S.scale_shape.resize(K, J);
  S.scale_rate.resize(K, J);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < J; ++j) {
      S.mixture_weights(k, j) = pos(rng);
      S.scale_shape(k, j) = pos(rng);
      S.scale_rate(k, j) = pos(rng);
    }

  s.sticks.tau_tilde.resize(K);
  s.sticks.tau_hat.resize(K);
  for (int k = 0; k < K; ++k) {
    s.sticks.tau_tilde(k) = pos(rng);
    s.sticks.tau_hat(k) = pos(rng);
  }
  s.sticks.q_weights = Vector::Constant(K, 1.0 / K);
  s.sticks.alpha_shape = pos(rng);
  s.sticks.alpha_rate = pos(rng);
  for (int k = 0; k < K; ++k) s.precisions.lambda.push_back({pos(rng), pos(rng)});
  s.precisions.phi = {pos(rng), pos(rng)};
  return s;
}

inline Matrix random_matrix(std::mt19937_64& rng, int rows, int cols, double sd = 1.0) {
  std::normal_distribution<double> gauss(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gauss(rng);
  return m;
}

/// A frozen layer built from an untrained random state, for geometry and
/// plumbing tests that do not need learned features.
inline ibpica::LayerModel random_layer(std::mt19937_64& rng, std::size_t input_dim, std::size_t K,
                                       const ibpica::ReceptiveField& rf, bool contrast) {
  ibpica::LayerModel layer;
  const Matrix X = random_matrix(rng, 8, static_cast<int>(input_dim));
  ibpica::RngStream r(rng(), 0);
  layer.ica = ibpica::init_model(ibpica::ObservationMatrix(X), ibpica::Hyperparameters{}, K, r);
  layer.whitening = ibpica::identity_whitening(input_dim);
  layer.rf = rf;
  layer.contrast_normalize = contrast;
  layer.freeze();
  return layer;
}

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("ibpica_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str(const std::string& name = "") const { return (path / name).string(); }
};

}  // namespace testing
