#pragma once

#include <cstdint>
#include <vector>

#include "ibpica/model.hpp"
#include "ibpica/rng.hpp"

namespace ibpica {

/// Fresh state: every factor at its prior except the slab means, drawn from
/// N(0, f/c), and the activities, which start undecided at 0.5. Source
/// posteriors are then fitted once to the drawn loadings.
ModelState init_model(const ObservationMatrix& X, const Hyperparameters& hp, std::size_t k_init, RngStream& rng,
                      UpdateMode mode = UpdateMode::Exact);

/// Everything needed to score a birth of new features for one dimension.
struct MHProposal {
  std::size_t dim = 0;
  std::size_t count = 0;                 // K*_d
  Eigen::RowVectorXd loadings_star;      // 1 x K*_d, drawn from the slab prior
  Matrix M_star;                         // K*_d x K*_d
  Matrix m_star;                         // N x K*_d
  std::vector<std::size_t> active;       // indices of the K_d active features of row d
  Matrix M_cur;                          // K_d x K_d
  Matrix m_cur;                          // N x K_d
  double log_theta_star = 0.0;
  double log_theta_cur = 0.0;

  /// log of min{1, theta* / theta}.
  double log_acceptance() const;
};

/// Score a proposal with the given new loadings (no randomness).
MHProposal build_mh_proposal(const ModelState& state, const ObservationMatrix& X, std::size_t d,
                             const Eigen::RowVectorXd& loadings_star);

struct MHResult {
  bool accepted = false;
  std::size_t count = 0;
  double log_theta_star = 0.0;
  double log_theta_cur = 0.0;
};

/// Local Metropolis-Hastings birth move for dimension d. State is unchanged
/// unless the proposal is accepted.
MHResult mh_feature_step(ModelState& state, const ObservationMatrix& X, std::size_t d, RngStream& rng);

/// Logit of q(z_dk = 1) under the current state.
double activity_logit(const ModelState& state, const ObservationMatrix& X, std::size_t d, std::size_t k);
void update_activity(ModelState& state, const ObservationMatrix& X, std::size_t d, std::size_t k);
/// Sweep over all (d, k), k ascending within each row.
void update_activities(ModelState& state, const ObservationMatrix& X);

void update_loadings(ModelState& state, const ObservationMatrix& X);
void update_sources(ModelState& state, const ObservationMatrix& X);
void update_responsibilities(ModelState& state);
void update_mixture_weights(ModelState& state);
void update_scales(ModelState& state);
void update_lambda(ModelState& state);
void update_phi(ModelState& state, const ObservationMatrix& X);
/// Sticks, their bound weights, and q(alpha).
void update_sticks(ModelState& state);

/// E_q[sum_n ||x_n - G y_n||^2] under the mean-field posterior.
double expected_residual(const ModelState& state, const ObservationMatrix& X);

struct ElboTerms {
  double likelihood = 0.0;
  double slab = 0.0;            // E log p(G | Z, lambda)
  double activity = 0.0;        // E log p(Z | v), bounded
  double sticks = 0.0;          // E log p(v | alpha)
  double alpha = 0.0;           // E log p(alpha)
  double lambda = 0.0;          // E log p(lambda)
  double phi = 0.0;             // E log p(phi)
  double sources = 0.0;         // E log p(y, c | varpi, s)
  double weights = 0.0;         // E log p(varpi)
  double scales = 0.0;          // E log p(s^-1)
  double entropy_loadings = 0.0;
  double entropy_sources = 0.0;  // q(y) and the indicator posteriors zeta
  double entropy_sticks = 0.0;
  double entropy_alpha = 0.0;
  double entropy_lambda = 0.0;
  double entropy_phi = 0.0;
  double entropy_weights = 0.0;
  double entropy_scales = 0.0;

  double total() const;
};

ElboTerms elbo_terms(const ModelState& state, const ObservationMatrix& X);
double elbo(const ModelState& state, const ObservationMatrix& X);

/// Columns whose activity exceeds kActiveThreshold in at least one row.
std::size_t active_feature_count(const ModelState& state);

/// Drop columns whose activity never reaches `threshold`. Throws
/// InvalidArgument when every column would go. Returns the number removed.
std::size_t prune_features(ModelState& state, double threshold);

/// Append fresh columns (used by the MH birth move and by tests).
struct NewFeature {
  std::size_t proposing_dim = 0;
  double loading = 0.0;
  Vector source_mean;      // N
  Vector source_variance;  // N
};
void append_features(ModelState& state, const std::vector<NewFeature>& features);

/// Reorder feature columns: column i of the result is column perm[i] of the input.
ModelState permute_features(const ModelState& state, const std::vector<std::size_t>& perm);

struct InferenceConfig {
  std::size_t max_iter = 200;
  double tolerance = 1e-5;
  std::size_t k_init = 5;
  double prune_threshold = 1e-3;
  std::uint64_t seed = 0;
  UpdateMode mode = UpdateMode::Exact;
  bool sample_features = true;  // run the MH birth step

  void validate() const;
};

struct IterationRecord {
  std::size_t iteration = 0;
  double elbo = 0.0;
  std::size_t features = 0;
  std::size_t active = 0;    // columns above the active threshold in some row
  std::size_t accepted = 0;  // MH births accepted this iteration
  std::size_t pruned = 0;
};

struct InferenceResult {
  ModelState state;
  std::vector<IterationRecord> trace;
  bool converged = false;
};

/// Hybrid inference loop: per-dimension MH births, then q(Z), then
/// q(y)/q(varpi)/q(s^-1), then q(lambda)/q(v)/q(phi)/q(alpha), then q(G),
/// followed by pruning. Source means are refreshed once after the loop so
/// they correspond to the returned loadings.
InferenceResult run_inference(const ObservationMatrix& X, const Hyperparameters& hp, const InferenceConfig& config);

/// Continue from an existing state (used by tests to check monotonicity).
InferenceResult run_inference(const ObservationMatrix& X, ModelState state, const InferenceConfig& config);

}  // namespace ibpica
