#include "ibpica/model.hpp"

#include <cmath>
#include <string>

#include "ibpica/errors.hpp"

namespace ibpica {

const char* to_string(UpdateMode mode) { return mode == UpdateMode::Exact ? "exact" : "as-printed"; }

UpdateMode update_mode_from_string(const std::string& name) {
  if (name == "exact") return UpdateMode::Exact;
  if (name == "as-printed") return UpdateMode::AsPrinted;
  throw InvalidArgument("unknown update mode '" + name + "' (expected exact or as-printed)");
}

Hyperparameters Hyperparameters::with_components(std::size_t J) {
  if (J == 0) throw InvalidArgument("number of source components must be >= 1");
  Hyperparameters hp;
  hp.xi.assign(J, 1.0 / static_cast<double>(J));
  return hp;
}

void Hyperparameters::validate() const {
  const auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument(std::string("hyperparameter ") + name + " must be > 0");
  };
  positive(a, "a");
  positive(b, "b");
  positive(c, "c");
  positive(f, "f");
  positive(gamma1, "gamma1");
  positive(gamma2, "gamma2");
  positive(eta1, "eta1");
  positive(eta2, "eta2");
  if (xi.empty()) throw InvalidArgument("hyperparameter xi needs at least one component");
  for (double x : xi) positive(x, "xi");
}

ObservationMatrix::ObservationMatrix(Matrix data) : data_(std::move(data)) {
  if (data_.rows() < 1 || data_.cols() < 1) throw InvalidArgument("observation matrix must be non-empty");
  if (!data_.allFinite()) throw InvalidArgument("observation matrix contains non-finite entries");
}

Matrix LoadingPosterior::expected() const { return activity.cwiseProduct(mean); }

Matrix LoadingPosterior::expected_square() const {
  Matrix out = mean.cwiseProduct(mean);
  out.rowwise() += precision.cwiseInverse().transpose();
  return activity.cwiseProduct(out);
}

void ModelState::check_invariants() const {
  const auto fail = [](const std::string& what) { throw NumericalError("invariant violated: " + what); };
  const Eigen::Index D = loadings.activity.rows(), K = loadings.activity.cols(), N = sources.mean.rows();
  const std::size_t J = components();
  if (K < 1) fail("no features");
  if (loadings.mean.rows() != D || loadings.mean.cols() != K || loadings.precision.size() != K) fail("loading shapes");
  if (sources.mean.cols() != K || sources.variance.rows() != N || sources.variance.cols() != K) fail("source shapes");
  if (sources.responsibilities.size() != J) fail("responsibility components");
  if (sticks.tau_tilde.size() != K || sticks.tau_hat.size() != K || sticks.q_weights.size() != K) fail("stick shapes");
  if (precisions.lambda.size() != static_cast<std::size_t>(K)) fail("lambda shape");

  if (!loadings.activity.allFinite() || loadings.activity.minCoeff() < 0.0 || loadings.activity.maxCoeff() > 1.0)
    fail("activity outside [0,1]");
  if (!loadings.mean.allFinite()) fail("non-finite slab mean");
  if (!(loadings.precision.array() > 0.0).all() || !loadings.precision.allFinite()) fail("slab precision <= 0");
  if (!sources.mean.allFinite()) fail("non-finite source mean");
  if (N > 0 && (!(sources.variance.array() > 0.0).all() || !sources.variance.allFinite())) fail("source variance <= 0");

  Matrix total = Matrix::Zero(N, K);
  for (const auto& r : sources.responsibilities) {
    if (r.rows() != N || r.cols() != K) fail("responsibility shape");
    if (N > 0 && r.minCoeff() < 0.0) fail("negative responsibility");
    total += r;
  }
  if (N > 0 && (total.array() - 1.0).abs().maxCoeff() > 1e-12) fail("responsibilities do not sum to 1");
  for (const Matrix* m : {&sources.mixture_weights, &sources.scale_shape, &sources.scale_rate}) {
    if (m->rows() != K || m->cols() != static_cast<Eigen::Index>(J)) fail("source prior shapes");
    if (!(m->array() > 0.0).all() || !m->allFinite()) fail("non-positive source prior parameter");
  }
  if (!(sticks.tau_tilde.array() > 0.0).all() || !(sticks.tau_hat.array() > 0.0).all()) fail("stick parameter <= 0");
  if (sticks.q_weights.minCoeff() < 0.0 || std::fabs(sticks.q_weights.sum() - 1.0) > 1e-12) fail("q weights not a simplex");
  if (!(sticks.alpha_shape > 0.0) || !(sticks.alpha_rate > 0.0)) fail("alpha parameters <= 0");
  try {
    for (const auto& l : precisions.lambda) l.validate();
    precisions.phi.validate();
  } catch (const DomainError& e) {
    fail(e.what());
  }
}

Vector stick_log_weights(const Vector& tau_tilde, const Vector& tau_hat) {
  const Eigen::Index K = tau_tilde.size();
  Vector out(K);
  double prefix = 0.0;
  for (Eigen::Index i = 0; i < K; ++i) {
    const double dsum = digamma(tau_tilde(i) + tau_hat(i));
    out(i) = digamma(tau_hat(i)) - dsum + prefix;
    prefix += digamma(tau_tilde(i)) - dsum;
  }
  return out;
}

Expectations compute_expectations(const ModelState& state) {
  Expectations e;
  const Eigen::Index K = static_cast<Eigen::Index>(state.features());
  const Eigen::Index J = static_cast<Eigen::Index>(state.components());

  const auto phi = gamma_expectations(state.precisions.phi);
  e.phi = phi.x;
  e.log_phi = phi.log_x;
  const auto alpha = gamma_expectations({state.sticks.alpha_shape, state.sticks.alpha_rate});
  e.alpha = alpha.x;
  e.log_alpha = alpha.log_x;

  e.lambda.resize(K);
  e.log_lambda.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto l = gamma_expectations(state.precisions.lambda[static_cast<std::size_t>(k)]);
    e.lambda(k) = l.x;
    e.log_lambda(k) = l.log_x;
  }
  e.loading = state.loadings.expected();
  e.loading_sq = state.loadings.expected_square();

  e.inv_scale.resize(K, J);
  e.log_inv_scale.resize(K, J);
  e.log_weight.resize(K, J);
  for (Eigen::Index k = 0; k < K; ++k) {
    const double dsum = digamma(state.sources.mixture_weights.row(k).sum());
    for (Eigen::Index j = 0; j < J; ++j) {
      const auto s = gamma_expectations({state.sources.scale_shape(k, j), state.sources.scale_rate(k, j)});
      e.inv_scale(k, j) = s.x;
      e.log_inv_scale(k, j) = s.log_x;
      e.log_weight(k, j) = digamma(state.sources.mixture_weights(k, j)) - dsum;
    }
  }

  e.log_v.resize(K);
  e.log_1mv.resize(K);
  e.log_pi.resize(K);
  double cumulative = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto b = beta_expectations({state.sticks.tau_tilde(k), state.sticks.tau_hat(k)});
    e.log_v(k) = b.log_v;
    e.log_1mv(k) = b.log_1mv;
    cumulative += b.log_v;
    e.log_pi(k) = cumulative;
  }
  // With the optimal multinomial weights the bound on E[log(1 - prod v)]
  // collapses to a log-sum-exp over the prefix of the stick log weights.
  const Vector lw = stick_log_weights(state.sticks.tau_tilde, state.sticks.tau_hat);
  e.log_1mpi.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    e.log_1mpi(k) = log_sum_exp(std::span<const double>(lw.data(), static_cast<std::size_t>(k + 1)));
  }
  return e;
}

FeatureCountState feature_counts(const ModelState& state) {
  FeatureCountState out;
  const auto& act = state.loadings.activity;
  out.per_dim_active.resize(static_cast<std::size_t>(act.rows()));
  for (Eigen::Index d = 0; d < act.rows(); ++d) {
    const auto count = static_cast<std::size_t>((act.row(d).array() > kActiveThreshold).count());
    out.per_dim_active[static_cast<std::size_t>(d)] = count;
    out.max_active = std::max(out.max_active, count);
  }
  return out;
}

}  // namespace ibpica
