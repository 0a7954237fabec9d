#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ibpica/special_math.hpp"

namespace ibpica {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Which closed forms the coordinate-ascent updates use.
///  - Exact: conjugate-exact updates; every step is a coordinate maximisation
///    of the ELBO.
///  - AsPrinted: the literal published forms (no 1/2 in the lambda and phi
///    rates, plug-in residual for phi, raw projection for source means,
///    single-index stick weights, K-1 innovation update).
enum class UpdateMode { Exact, AsPrinted };

const char* to_string(UpdateMode mode);
UpdateMode update_mode_from_string(const std::string& name);

/// Features whose activity exceeds this count towards K_d.
inline constexpr double kActiveThreshold = 0.5;

struct Hyperparameters {
  double a = 1.0, b = 1.0;            // noise precision phi ~ G(a, b)
  double c = 1.0, f = 1.0;            // slab precisions lambda_k ~ G(c, f)
  double gamma1 = 1.0, gamma2 = 1.0;  // innovation alpha ~ G(gamma1, gamma2)
  double eta1 = 1.0, eta2 = 1.0;      // source scale precisions s_kj^-1 ~ G(eta1, eta2)
  std::vector<double> xi{0.5, 0.5};   // Dirichlet concentration per source component

  /// Defaults with xi_j = 1/J.
  static Hyperparameters with_components(std::size_t J);
  std::size_t components() const noexcept { return xi.size(); }
  void validate() const;
};

/// N x D data matrix; rows are (whitened) observations.
class ObservationMatrix {
 public:
  explicit ObservationMatrix(Matrix data);

  const Matrix& values() const noexcept { return data_; }
  std::size_t samples() const noexcept { return static_cast<std::size_t>(data_.rows()); }
  std::size_t dims() const noexcept { return static_cast<std::size_t>(data_.cols()); }

 private:
  Matrix data_;
};

/// Spike-and-slab posterior over the loading matrix G.
struct LoadingPosterior {
  Matrix activity;   // D x K, q(z_dk = 1)
  Matrix mean;       // D x K, slab means
  Vector precision;  // K, slab precisions shared across d

  Matrix expected() const;         // E[g_dk]
  Matrix expected_square() const;  // E[g_dk^2]
};

/// Mean-field posterior over the sources y_nk and their mixture prior.
struct SourcePosterior {
  Matrix mean;                          // N x K
  Matrix variance;                      // N x K
  std::vector<Matrix> responsibilities; // J entries, each N x K: zeta_nkj
  Matrix mixture_weights;               // K x J Dirichlet parameters
  Matrix scale_shape;                   // K x J
  Matrix scale_rate;                    // K x J

  Matrix expected_square() const { return mean.cwiseProduct(mean) + variance; }
};

struct StickState {
  Vector tau_tilde;  // K
  Vector tau_hat;    // K
  Vector q_weights;  // K, multinomial bound weights (simplex)
  double alpha_shape = 1.0;
  double alpha_rate = 1.0;
};

struct GlobalPrecisions {
  std::vector<GammaParams> lambda;  // K
  GammaParams phi;
};

struct FeatureCountState {
  std::vector<std::size_t> per_dim_active;  // K_d
  std::size_t max_active = 0;               // max_d K_d
};

struct ModelState {
  Hyperparameters hp;
  UpdateMode mode = UpdateMode::Exact;
  LoadingPosterior loadings;
  SourcePosterior sources;
  StickState sticks;
  GlobalPrecisions precisions;

  std::size_t features() const noexcept { return static_cast<std::size_t>(loadings.activity.cols()); }
  std::size_t dims() const noexcept { return static_cast<std::size_t>(loadings.activity.rows()); }
  std::size_t samples() const noexcept { return static_cast<std::size_t>(sources.mean.rows()); }
  std::size_t components() const noexcept { return hp.components(); }

  /// Throws NumericalError describing the first violated invariant.
  void check_invariants() const;
};

/// Moments of every variational factor, computed once per update phase.
struct Expectations {
  double phi = 0.0, log_phi = 0.0;
  double alpha = 0.0, log_alpha = 0.0;
  Vector lambda, log_lambda;            // K
  Matrix loading, loading_sq;           // D x K
  Matrix inv_scale, log_inv_scale;      // K x J
  Matrix log_weight;                    // K x J, E[log varpi_kj]
  Vector log_v, log_1mv;                // K
  Vector log_pi;                        // K, sum_{i<=k} E[log v_i]
  Vector log_1mpi;                      // K, multinomial lower bound on E[log(1 - pi_k)]
};

Expectations compute_expectations(const ModelState& state);

/// Unnormalised log weights l_i of the multinomial stick bound:
/// E[log(1-v_i)] + sum_{m<i} E[log v_m].
Vector stick_log_weights(const Vector& tau_tilde, const Vector& tau_hat);

FeatureCountState feature_counts(const ModelState& state);

}  // namespace ibpica
