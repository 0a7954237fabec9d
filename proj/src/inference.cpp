#include "ibpica/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ibpica/errors.hpp"
#include "ibpica/parallel.hpp"

namespace ibpica {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Vector prior_component_weights(const Hyperparameters& hp) {
  Vector w(static_cast<Eigen::Index>(hp.components()));
  for (std::size_t j = 0; j < hp.components(); ++j) w(static_cast<Eigen::Index>(j)) = hp.xi[j];
  return w / w.sum();
}

Vector softmax(const Vector& logits) {
  const double lse = log_sum_exp(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())));
  return (logits.array() - lse).exp().matrix();
}

void refresh_q_weights(StickState& sticks) {
  sticks.q_weights = softmax(stick_log_weights(sticks.tau_tilde, sticks.tau_hat));
  // Exact simplex despite rounding in exp.
  sticks.q_weights /= sticks.q_weights.sum();
}

void check_data(const ModelState& state, const ObservationMatrix& X) {
  if (X.dims() != state.dims()) {
    throw InvalidArgument("observation dimension " + std::to_string(X.dims()) + " does not match model dimension " +
                          std::to_string(state.dims()));
  }
  if (X.samples() != state.samples()) {
    throw InvalidArgument("observation count " + std::to_string(X.samples()) + " does not match source posterior rows " +
                          std::to_string(state.samples()));
  }
}

/// log|M| and M^-1 for a symmetric positive-definite matrix.
struct SpdFactor {
  double log_det = 0.0;
  Matrix inverse;
};

SpdFactor factor_spd(const Matrix& M, const char* what) {
  SpdFactor out;
  if (M.size() == 0) return out;
  Eigen::LLT<Matrix> llt(M);
  if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + " is not positive definite");
  const Matrix& L = llt.matrixLLT();
  for (Eigen::Index i = 0; i < M.rows(); ++i) out.log_det += 2.0 * std::log(L(i, i));
  out.inverse = llt.solve(Matrix::Identity(M.rows(), M.cols()));
  return out;
}

/// Per-sample prior precision term sum_j zeta_nkj E[s_kj^-1], N x K.
Matrix source_prior_precision(const ModelState& state, const Expectations& e) {
  const Eigen::Index N = static_cast<Eigen::Index>(state.samples());
  const Eigen::Index K = static_cast<Eigen::Index>(state.features());
  Matrix out = Matrix::Zero(N, K);
  for (std::size_t j = 0; j < state.components(); ++j) {
    out += state.sources.responsibilities[j] * e.inv_scale.col(static_cast<Eigen::Index>(j)).asDiagonal();
  }
  return out;
}

/// Second moment E[G^T G] under the mean-field posterior.
Matrix loading_gram(const Expectations& e) {
  Matrix gram = e.loading.transpose() * e.loading;
  gram.diagonal() = e.loading_sq.colwise().sum().transpose();
  return gram;
}

struct ActivityContext {
  Expectations e;
  Matrix source_gram;   // sum_n m_nk m_nk'
  Vector source_sq;     // sum_n E[y_nk^2]
  Matrix data_cross;    // D x K: sum_n x_nd m_nk
};

ActivityContext make_activity_context(const ModelState& state, const ObservationMatrix& X) {
  ActivityContext ctx;
  ctx.e = compute_expectations(state);
  ctx.source_gram = state.sources.mean.transpose() * state.sources.mean;
  ctx.source_sq = state.sources.expected_square().colwise().sum().transpose();
  ctx.data_cross = X.values().transpose() * state.sources.mean;
  return ctx;
}

/// Logit for (d, k) given the current row of E[g] (which may already hold
/// updated entries for k' < k during a sweep).
double logit_from_context(const ModelState& state, const ActivityContext& ctx, std::size_t d, std::size_t k,
                          const Eigen::RowVectorXd& loading_row) {
  const auto kk = static_cast<Eigen::Index>(k);
  const double mu = state.loadings.mean(static_cast<Eigen::Index>(d), kk);
  const double slab_prec = state.loadings.precision(kk);
  const double slab_sq = mu * mu + 1.0 / slab_prec;
  const auto& e = ctx.e;

  if (state.mode == UpdateMode::AsPrinted) {
    return e.log_pi(kk) + e.log_1mpi(kk) + 0.5 * e.log_lambda(kk) - 0.5 * kLog2Pi - 0.5 * e.lambda(kk) * slab_sq;
  }

  double cross = loading_row.dot(ctx.source_gram.row(kk)) - loading_row(kk) * ctx.source_gram(kk, kk);
  const double likelihood =
      e.phi * (mu * (ctx.data_cross(static_cast<Eigen::Index>(d), kk) - cross) - 0.5 * slab_sq * ctx.source_sq(kk));
  const double slab = 0.5 * e.log_lambda(kk) - 0.5 * e.lambda(kk) * slab_sq + 0.5 - 0.5 * std::log(slab_prec);
  return e.log_pi(kk) - e.log_1mpi(kk) + slab + likelihood;
}

Matrix select_columns(const Matrix& m, const std::vector<std::size_t>& cols) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(static_cast<Eigen::Index>(cols[i]));
  return out;
}

Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

Vector select_entries(const Vector& v, const std::vector<std::size_t>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(static_cast<Eigen::Index>(idx[i]));
  return out;
}

/// Keep only the listed feature columns, in the listed order.
void restrict_features(ModelState& state, const std::vector<std::size_t>& keep) {
  auto& L = state.loadings;
  L.activity = select_columns(L.activity, keep);
  L.mean = select_columns(L.mean, keep);
  L.precision = select_entries(L.precision, keep);
  auto& S = state.sources;
  S.mean = select_columns(S.mean, keep);
  S.variance = select_columns(S.variance, keep);
  for (auto& r : S.responsibilities) r = select_columns(r, keep);
  S.mixture_weights = select_rows(S.mixture_weights, keep);
  S.scale_shape = select_rows(S.scale_shape, keep);
  S.scale_rate = select_rows(S.scale_rate, keep);
  state.sticks.tau_tilde = select_entries(state.sticks.tau_tilde, keep);
  state.sticks.tau_hat = select_entries(state.sticks.tau_hat, keep);
  refresh_q_weights(state.sticks);
  std::vector<GammaParams> lambda;
  lambda.reserve(keep.size());
  for (std::size_t k : keep) lambda.push_back(state.precisions.lambda[k]);
  state.precisions.lambda = std::move(lambda);
}

}  // namespace

// ---------------------------------------------------------------------------
// Initialisation and structural edits

ModelState init_model(const ObservationMatrix& X, const Hyperparameters& hp, std::size_t k_init, RngStream& rng,
                      UpdateMode mode) {
  hp.validate();
  if (k_init < 1) throw InvalidArgument("K_init must be >= 1");
  const auto N = static_cast<Eigen::Index>(X.samples());
  const auto D = static_cast<Eigen::Index>(X.dims());
  const auto K = static_cast<Eigen::Index>(k_init);
  const auto J = static_cast<Eigen::Index>(hp.components());

  ModelState s;
  s.hp = hp;
  s.mode = mode;

  s.sticks.tau_tilde = Vector::Constant(K, hp.gamma1 / hp.gamma2);
  s.sticks.tau_hat = Vector::Ones(K);
  s.sticks.alpha_shape = hp.gamma1;
  s.sticks.alpha_rate = hp.gamma2;
  refresh_q_weights(s.sticks);

  s.precisions.lambda.assign(static_cast<std::size_t>(K), GammaParams{hp.c, hp.f});
  s.precisions.phi = {hp.a, hp.b};

  const double slab_sd = std::sqrt(hp.f / hp.c);
  s.loadings.mean.resize(D, K);
  for (Eigen::Index d = 0; d < D; ++d)
    for (Eigen::Index k = 0; k < K; ++k) s.loadings.mean(d, k) = rng.normal(0.0, slab_sd);
  s.loadings.activity = Matrix::Constant(D, K, 0.5);
  s.loadings.precision = Vector::Constant(K, hp.c / hp.f);

  const Vector w = prior_component_weights(hp);
  s.sources.mean = Matrix::Zero(N, K);
  s.sources.variance = Matrix::Constant(N, K, hp.eta2 / hp.eta1);
  s.sources.responsibilities.resize(static_cast<std::size_t>(J));
  for (Eigen::Index j = 0; j < J; ++j) s.sources.responsibilities[static_cast<std::size_t>(j)] = Matrix::Constant(N, K, w(j));
  s.sources.mixture_weights.resize(K, J);
  for (Eigen::Index k = 0; k < K; ++k)
    for (Eigen::Index j = 0; j < J; ++j) s.sources.mixture_weights(k, j) = hp.xi[static_cast<std::size_t>(j)];
  s.sources.scale_shape = Matrix::Constant(K, J, hp.eta1);
  s.sources.scale_rate = Matrix::Constant(K, J, hp.eta2);

  update_sources(s, X);
  return s;
}

void append_features(ModelState& state, const std::vector<NewFeature>& features) {
  if (features.empty()) return;
  const auto& hp = state.hp;
  const auto D = static_cast<Eigen::Index>(state.dims());
  const auto N = static_cast<Eigen::Index>(state.samples());
  const auto J = static_cast<Eigen::Index>(state.components());
  const auto K0 = static_cast<Eigen::Index>(state.features());
  const auto K1 = K0 + static_cast<Eigen::Index>(features.size());

  const double e_alpha = state.sticks.alpha_shape / state.sticks.alpha_rate;
  const double prior_v = e_alpha / (e_alpha + 1.0);
  const Vector w = prior_component_weights(hp);

  auto grow_cols = [&](Matrix& m) { m.conservativeResize(m.rows(), K1); };
  auto grow_rows = [&](Matrix& m) { m.conservativeResize(K1, m.cols()); };
  auto& L = state.loadings;
  grow_cols(L.activity);
  grow_cols(L.mean);
  L.precision.conservativeResize(K1);
  auto& S = state.sources;
  grow_cols(S.mean);
  grow_cols(S.variance);
  for (auto& r : S.responsibilities) grow_cols(r);
  grow_rows(S.mixture_weights);
  grow_rows(S.scale_shape);
  grow_rows(S.scale_rate);
  state.sticks.tau_tilde.conservativeResize(K1);
  state.sticks.tau_hat.conservativeResize(K1);

  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& nf = features[i];
    const Eigen::Index k = K0 + static_cast<Eigen::Index>(i);
    if (nf.proposing_dim >= static_cast<std::size_t>(D)) throw InvalidArgument("new feature: proposing dimension out of range");
    if (nf.source_mean.size() != N || nf.source_variance.size() != N)
      throw InvalidArgument("new feature: source posterior length must equal N");
    L.activity.col(k).setConstant(std::pow(prior_v, static_cast<double>(k + 1)));
    L.activity(static_cast<Eigen::Index>(nf.proposing_dim), k) = 1.0;
    L.mean.col(k).setZero();
    L.mean(static_cast<Eigen::Index>(nf.proposing_dim), k) = nf.loading;
    L.precision(k) = hp.c / hp.f;
    S.mean.col(k) = nf.source_mean;
    S.variance.col(k) = nf.source_variance;
    for (Eigen::Index j = 0; j < J; ++j) {
      S.responsibilities[static_cast<std::size_t>(j)].col(k).setConstant(w(j));
      S.mixture_weights(k, j) = hp.xi[static_cast<std::size_t>(j)];
      S.scale_shape(k, j) = hp.eta1;
      S.scale_rate(k, j) = hp.eta2;
    }
    state.sticks.tau_tilde(k) = e_alpha;
    state.sticks.tau_hat(k) = 1.0;
    state.precisions.lambda.push_back({hp.c, hp.f});
  }
  refresh_q_weights(state.sticks);
}

ModelState permute_features(const ModelState& state, const std::vector<std::size_t>& perm) {
  if (perm.size() != state.features()) throw InvalidArgument("permutation length must equal K");
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) throw InvalidArgument("not a permutation");
    seen[p] = true;
  }
  ModelState out = state;
  restrict_features(out, perm);
  return out;
}

std::size_t active_feature_count(const ModelState& state) {
  if (state.features() == 0) return 0;
  const Vector col_max = state.loadings.activity.colwise().maxCoeff().transpose();
  return static_cast<std::size_t>((col_max.array() > kActiveThreshold).count());
}

std::size_t prune_features(ModelState& state, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidArgument("prune threshold must lie in (0, 1)");
  const Vector col_max = state.loadings.activity.colwise().maxCoeff().transpose();
  std::vector<std::size_t> keep;
  for (Eigen::Index k = 0; k < col_max.size(); ++k)
    if (col_max(k) >= threshold) keep.push_back(static_cast<std::size_t>(k));
  if (keep.empty()) throw InvalidArgument("pruning would remove every feature; at least one must be retained");
  const std::size_t removed = state.features() - keep.size();
  if (removed > 0) restrict_features(state, keep);
  return removed;
}

// ---------------------------------------------------------------------------
// Local MH birth move

double MHProposal::log_acceptance() const { return std::min(0.0, log_theta_star - log_theta_cur); }

MHProposal build_mh_proposal(const ModelState& state, const ObservationMatrix& X, std::size_t d,
                             const Eigen::RowVectorXd& loadings_star) {
  check_data(state, X);
  if (d >= state.dims()) throw InvalidArgument("MH step: dimension index out of range");
  const auto dd = static_cast<Eigen::Index>(d);
  const auto N = static_cast<double>(state.samples());
  const Expectations e = compute_expectations(state);

  // r_n = x_nd - E[G_{d,:} y_n]
  const Vector residual = X.values().col(dd) - state.sources.mean * e.loading.row(dd).transpose();

  MHProposal p;
  p.dim = d;
  p.count = static_cast<std::size_t>(loadings_star.size());
  p.loadings_star = loadings_star;

  const auto score = [&](const Matrix& M, const Eigen::RowVectorXd& g, Matrix& m_out, const char* what) {
    const SpdFactor fac = factor_spd(M, what);
    if (M.size() == 0) {
      m_out.resize(static_cast<Eigen::Index>(state.samples()), 0);
      return 0.0;
    }
    // m_n = E[phi] M^-1 g^T r_n, stored as rows.
    const Vector dir = e.phi * (fac.inverse * g.transpose());
    m_out = residual * dir.transpose();
    const double quad = ((m_out * M).cwiseProduct(m_out)).sum();
    return -0.5 * N * fac.log_det + 0.5 * quad;
  };

  const auto Ks = loadings_star.size();
  p.M_star = e.phi * (loadings_star.transpose() * loadings_star) + Matrix::Identity(Ks, Ks);
  p.log_theta_star = score(p.M_star, loadings_star, p.m_star, "proposal matrix M*_d");

  for (Eigen::Index k = 0; k < state.loadings.activity.cols(); ++k)
    if (state.loadings.activity(dd, k) > kActiveThreshold) p.active.push_back(static_cast<std::size_t>(k));
  const auto Kd = static_cast<Eigen::Index>(p.active.size());
  Eigen::RowVectorXd g(Kd);
  Matrix second(Kd, Kd);
  for (Eigen::Index i = 0; i < Kd; ++i) {
    const auto ki = static_cast<Eigen::Index>(p.active[static_cast<std::size_t>(i)]);
    g(i) = e.loading(dd, ki);
    for (Eigen::Index j = 0; j < Kd; ++j) {
      const auto kj = static_cast<Eigen::Index>(p.active[static_cast<std::size_t>(j)]);
      second(i, j) = i == j ? e.loading_sq(dd, ki) : e.loading(dd, ki) * e.loading(dd, kj);
    }
  }
  p.M_cur = e.phi * second + Matrix::Identity(Kd, Kd);
  p.log_theta_cur = score(p.M_cur, g, p.m_cur, "current matrix M_d");
  return p;
}

MHResult mh_feature_step(ModelState& state, const ObservationMatrix& X, std::size_t d, RngStream& rng) {
  check_data(state, X);
  const double e_alpha = state.sticks.alpha_shape / state.sticks.alpha_rate;
  const double denom = state.dims() > 1 ? static_cast<double>(state.dims() - 1) : 1.0;
  MHResult result;
  result.count = static_cast<std::size_t>(sample_poisson(e_alpha / denom, rng));
  if (result.count == 0) return result;

  // New columns take the prior mean c/f as their slab precision.
  const double sd = std::sqrt(state.hp.f / state.hp.c);
  Eigen::RowVectorXd g(static_cast<Eigen::Index>(result.count));
  for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = rng.normal(0.0, sd);

  const MHProposal p = build_mh_proposal(state, X, d, g);
  result.log_theta_star = p.log_theta_star;
  result.log_theta_cur = p.log_theta_cur;
  const double u = rng.uniform_open();
  if (std::log(u) >= p.log_acceptance()) return result;

  // Births start from the proposal's own posterior over the new sources.
  const Matrix cov = factor_spd(p.M_star, "proposal matrix M*_d").inverse;
  std::vector<NewFeature> births;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    NewFeature nf;
    nf.proposing_dim = d;
    nf.loading = g(i);
    nf.source_mean = p.m_star.col(i);
    nf.source_variance = Vector::Constant(static_cast<Eigen::Index>(state.samples()), cov(i, i));
    births.push_back(std::move(nf));
  }
  append_features(state, births);
  result.accepted = true;
  return result;
}

// ---------------------------------------------------------------------------
// Mean-field updates

double activity_logit(const ModelState& state, const ObservationMatrix& X, std::size_t d, std::size_t k) {
  check_data(state, X);
  if (d >= state.dims() || k >= state.features()) throw InvalidArgument("activity_logit: index out of range");
  const ActivityContext ctx = make_activity_context(state, X);
  const Eigen::RowVectorXd row = ctx.e.loading.row(static_cast<Eigen::Index>(d));
  return logit_from_context(state, ctx, d, k, row);
}

void update_activity(ModelState& state, const ObservationMatrix& X, std::size_t d, std::size_t k) {
  const double omega = activity_logit(state, X, d, k);
  state.loadings.activity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k)) = sigmoid(omega);
}

void update_activities(ModelState& state, const ObservationMatrix& X) {
  check_data(state, X);
  const ActivityContext ctx = make_activity_context(state, X);
  const std::size_t K = state.features();
  parallel_for(state.dims(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t d = begin; d < end; ++d) {
      const auto dd = static_cast<Eigen::Index>(d);
      Eigen::RowVectorXd row = ctx.e.loading.row(dd);
      for (std::size_t k = 0; k < K; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        const double nu = sigmoid(logit_from_context(state, ctx, d, k, row));
        state.loadings.activity(dd, kk) = nu;
        row(kk) = nu * state.loadings.mean(dd, kk);
      }
    }
  });
}

void update_loadings(ModelState& state, const ObservationMatrix& X) {
  check_data(state, X);
  const Expectations e = compute_expectations(state);
  const Eigen::Index K = static_cast<Eigen::Index>(state.features());
  const Matrix& m = state.sources.mean;
  const Vector source_sq = state.sources.expected_square().colwise().sum().transpose();
  state.loadings.precision = e.phi * source_sq + e.lambda;

  Matrix gram = m.transpose() * m;
  gram.diagonal().setZero();
  const Matrix cross = e.phi * (X.values().transpose() * m);  // D x K
  const Vector& prec = state.loadings.precision;

  // Joint maximiser over the row's slab means, in the variables w = sqrt(nu) mu
  // where the system is symmetric positive definite. Every mu_dk then
  // satisfies the residualised single-feature update exactly.
  parallel_for(state.dims(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t d = begin; d < end; ++d) {
      const auto dd = static_cast<Eigen::Index>(d);
      const Vector sq = state.loadings.activity.row(dd).transpose().cwiseSqrt();
      Matrix Q = e.phi * (sq.asDiagonal() * gram * sq.asDiagonal());
      Q.diagonal() += prec;
      Eigen::LLT<Matrix> llt(Q);
      if (llt.info() != Eigen::Success) throw NumericalError("loading update: row system is not positive definite");
      const Vector b = cross.row(dd).transpose();
      const Vector w = llt.solve(sq.cwiseProduct(b));
      const Vector others = e.phi * (gram * sq.cwiseProduct(w));
      for (Eigen::Index k = 0; k < K; ++k) state.loadings.mean(dd, k) = (b(k) - others(k)) / prec(k);
    }
  });
}

void update_sources(ModelState& state, const ObservationMatrix& X) {
  check_data(state, X);
  const Expectations e = compute_expectations(state);
  const Eigen::Index K = static_cast<Eigen::Index>(state.features());
  const Matrix base = e.phi * loading_gram(e);
  const Matrix proj = e.phi * (X.values() * e.loading);  // N x K
  const Matrix prior_prec = source_prior_precision(state, e);
  const bool exact = state.mode == UpdateMode::Exact;

  parallel_for(state.samples(), [&](std::size_t begin, std::size_t end) {
    Matrix precision(K, K);
    for (std::size_t n = begin; n < end; ++n) {
      const auto nn = static_cast<Eigen::Index>(n);
      precision = base;
      precision.diagonal() += prior_prec.row(nn).transpose();
      for (Eigen::Index k = 0; k < K; ++k) state.sources.variance(nn, k) = 1.0 / precision(k, k);
      if (exact) {
        Eigen::LLT<Matrix> llt(precision);
        if (llt.info() != Eigen::Success) throw NumericalError("source update: precision is not positive definite");
        state.sources.mean.row(nn) = llt.solve(proj.row(nn).transpose()).transpose();
      } else {
        state.sources.mean.row(nn) = proj.row(nn).cwiseProduct(state.sources.variance.row(nn));
      }
    }
  });
}

void update_responsibilities(ModelState& state) {
  const Expectations e = compute_expectations(state);
  const Eigen::Index K = static_cast<Eigen::Index>(state.features());
  const std::size_t J = state.components();
  const Matrix ey2 = state.sources.expected_square();
  parallel_for(state.samples(), [&](std::size_t begin, std::size_t end) {
    std::vector<double> logits(J);
    for (std::size_t n = begin; n < end; ++n) {
      const auto nn = static_cast<Eigen::Index>(n);
      for (Eigen::Index k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < J; ++j) {
          const auto jj = static_cast<Eigen::Index>(j);
          logits[j] = e.log_weight(k, jj) + 0.5 * e.log_inv_scale(k, jj) - 0.5 * e.inv_scale(k, jj) * ey2(nn, k);
        }
        const double lse = log_sum_exp(logits);
        for (std::size_t j = 0; j < J; ++j) state.sources.responsibilities[j](nn, k) = std::exp(logits[j] - lse);
      }
    }
  });
}

void update_mixture_weights(ModelState& state) {
  for (std::size_t j = 0; j < state.components(); ++j) {
    state.sources.mixture_weights.col(static_cast<Eigen::Index>(j)) =
        (state.hp.xi[j] + state.sources.responsibilities[j].colwise().sum().array()).transpose().matrix();
  }
}

void update_scales(ModelState& state) {
  const Matrix ey2 = state.sources.expected_square();
  for (std::size_t j = 0; j < state.components(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    const Matrix& z = state.sources.responsibilities[j];
    state.sources.scale_shape.col(jj) = (state.hp.eta1 + 0.5 * z.colwise().sum().array()).transpose().matrix();
    state.sources.scale_rate.col(jj) =
        (state.hp.eta2 + 0.5 * z.cwiseProduct(ey2).colwise().sum().array()).transpose().matrix();
  }
}

void update_lambda(ModelState& state) {
  const Vector act = state.loadings.activity.colwise().sum().transpose();
  const Vector sq = state.loadings.expected_square().colwise().sum().transpose();
  const double rate_factor = state.mode == UpdateMode::Exact ? 0.5 : 1.0;
  for (std::size_t k = 0; k < state.features(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    state.precisions.lambda[k] = {state.hp.c + 0.5 * act(kk), state.hp.f + rate_factor * sq(kk)};
  }
}

double expected_residual(const ModelState& state, const ObservationMatrix& X) {
  check_data(state, X);
  const Matrix eg = state.loadings.expected();
  const Matrix eg2 = state.loadings.expected_square();
  const Matrix& m = state.sources.mean;
  const Matrix resid = X.values() - m * eg.transpose();
  const Vector g2 = eg2.colwise().sum().transpose();
  const Vector gm2 = eg.cwiseProduct(eg).colwise().sum().transpose();
  const Matrix ey2 = state.sources.expected_square();
  return resid.squaredNorm() + (ey2 * g2).sum() - (m.cwiseProduct(m) * gm2).sum();
}

void update_phi(ModelState& state, const ObservationMatrix& X) {
  check_data(state, X);
  const double nd = static_cast<double>(X.samples() * X.dims());
  double rate;
  if (state.mode == UpdateMode::Exact) {
    rate = state.hp.b + 0.5 * expected_residual(state, X);
  } else {
    const Matrix resid = X.values() - state.sources.mean * state.loadings.expected().transpose();
    rate = state.hp.b + resid.squaredNorm();
  }
  state.precisions.phi = {state.hp.a + 0.5 * nd, rate};
}

void update_sticks(ModelState& state) {
  const auto K = static_cast<Eigen::Index>(state.features());
  const double D = static_cast<double>(state.dims());
  const double e_alpha = state.sticks.alpha_shape / state.sticks.alpha_rate;
  const Vector on = state.loadings.activity.colwise().sum().transpose();  // sum_d q(z_dm = 1)
  const Vector off = (D - on.array()).matrix();
  const Vector lw = stick_log_weights(state.sticks.tau_tilde, state.sticks.tau_hat);
  const Vector q_global = softmax(lw);

  Vector tau_tilde = Vector::Constant(K, e_alpha);
  Vector tau_hat = Vector::Ones(K);
  double on_suffix = 0.0;
  for (Eigen::Index k = K - 1; k >= 0; --k) {
    on_suffix += on(k);
    tau_tilde(k) += on_suffix;
  }
  for (Eigen::Index m = 0; m < K; ++m) {
    // Multinomial weights q_{m,i}, i <= m.
    Vector q(m + 1);
    if (state.mode == UpdateMode::Exact) {
      const double lse = log_sum_exp(std::span<const double>(lw.data(), static_cast<std::size_t>(m + 1)));
      for (Eigen::Index i = 0; i <= m; ++i) q(i) = std::exp(lw(i) - lse);
    } else {
      q = q_global.head(m + 1);
    }
    double suffix = 0.0;  // sum_{i=k+1}^{m} q_{m,i}
    for (Eigen::Index k = m; k >= 0; --k) {
      tau_hat(k) += off(m) * q(k);
      if (k < m) tau_tilde(k) += off(m) * suffix;
      suffix += q(k);
    }
  }
  state.sticks.tau_tilde = tau_tilde;
  state.sticks.tau_hat = tau_hat;
  refresh_q_weights(state.sticks);

  const Eigen::Index count = state.mode == UpdateMode::Exact ? K : K - 1;
  double log_v_sum = 0.0;
  for (Eigen::Index k = 0; k < count; ++k)
    log_v_sum += beta_expectations({tau_tilde(k), tau_hat(k)}).log_v;
  const double shape = state.hp.gamma1 + static_cast<double>(count);
  const double rate = state.hp.gamma2 - log_v_sum;
  if (!(rate > 0.0) || !std::isfinite(rate)) throw NumericalError("q(alpha) rate is not positive");
  state.sticks.alpha_shape = shape;
  state.sticks.alpha_rate = rate;
}

// ---------------------------------------------------------------------------
// Evidence lower bound

double ElboTerms::total() const {
  return likelihood + slab + activity + sticks + alpha + lambda + phi + sources + weights + scales + entropy_loadings +
         entropy_sources + entropy_sticks + entropy_alpha + entropy_lambda + entropy_phi + entropy_weights +
         entropy_scales;
}

ElboTerms elbo_terms(const ModelState& state, const ObservationMatrix& X) {
  check_data(state, X);
  const Expectations e = compute_expectations(state);
  const auto& hp = state.hp;
  const auto D = static_cast<Eigen::Index>(state.dims());
  const auto K = static_cast<Eigen::Index>(state.features());
  const auto N = static_cast<Eigen::Index>(state.samples());
  const auto J = static_cast<Eigen::Index>(state.components());
  const auto& L = state.loadings;
  const auto& S = state.sources;

  ElboTerms t;
  t.likelihood = 0.5 * static_cast<double>(N * D) * (e.log_phi - kLog2Pi) - 0.5 * e.phi * expected_residual(state, X);

  for (Eigen::Index k = 0; k < K; ++k) {
    const double inv_prec = 1.0 / L.precision(k);
    const double slab_entropy = 0.5 * (1.0 + kLog2Pi - std::log(L.precision(k)));
    for (Eigen::Index d = 0; d < D; ++d) {
      const double nu = L.activity(d, k);
      const double mu = L.mean(d, k);
      t.slab += nu * (0.5 * e.log_lambda(k) - 0.5 * kLog2Pi - 0.5 * e.lambda(k) * (mu * mu + inv_prec));
      t.activity += nu * e.log_pi(k) + (1.0 - nu) * e.log_1mpi(k);
      t.entropy_loadings += bernoulli_entropy(nu) + nu * slab_entropy;
    }
    t.sticks += e.log_alpha + (e.alpha - 1.0) * e.log_v(k);
    t.entropy_sticks += beta_entropy({state.sticks.tau_tilde(k), state.sticks.tau_hat(k)});
    const GammaParams& lam = state.precisions.lambda[static_cast<std::size_t>(k)];
    t.lambda += gamma_cross_term({hp.c, hp.f}, lam);
    t.entropy_lambda += gamma_entropy(lam);
  }
  const GammaParams alpha{state.sticks.alpha_shape, state.sticks.alpha_rate};
  t.alpha = gamma_cross_term({hp.gamma1, hp.gamma2}, alpha);
  t.entropy_alpha = gamma_entropy(alpha);
  t.phi = gamma_cross_term({hp.a, hp.b}, state.precisions.phi);
  t.entropy_phi = gamma_entropy(state.precisions.phi);

  const Matrix ey2 = S.expected_square();
  for (Eigen::Index j = 0; j < J; ++j) {
    const Matrix& z = S.responsibilities[static_cast<std::size_t>(j)];
    for (Eigen::Index k = 0; k < K; ++k) {
      const double base = e.log_weight(k, j) + 0.5 * e.log_inv_scale(k, j) - 0.5 * kLog2Pi;
      for (Eigen::Index n = 0; n < N; ++n) {
        const double zeta = z(n, k);
        if (zeta <= 0.0) continue;
        t.sources += zeta * (base - 0.5 * e.inv_scale(k, j) * ey2(n, k));
        t.entropy_sources -= zeta * std::log(zeta);
      }
    }
  }
  t.entropy_sources += 0.5 * (1.0 + kLog2Pi) * static_cast<double>(N * K) + 0.5 * S.variance.array().log().sum();

  double xi_sum = 0.0, xi_lgamma = 0.0;
  for (double x : hp.xi) {
    xi_sum += x;
    xi_lgamma += std::lgamma(x);
  }
  std::vector<double> row(static_cast<std::size_t>(J));
  for (Eigen::Index k = 0; k < K; ++k) {
    t.weights += std::lgamma(xi_sum) - xi_lgamma;
    for (Eigen::Index j = 0; j < J; ++j) {
      t.weights += (hp.xi[static_cast<std::size_t>(j)] - 1.0) * e.log_weight(k, j);
      row[static_cast<std::size_t>(j)] = S.mixture_weights(k, j);
      const GammaParams sc{S.scale_shape(k, j), S.scale_rate(k, j)};
      t.scales += gamma_cross_term({hp.eta1, hp.eta2}, sc);
      t.entropy_scales += gamma_entropy(sc);
    }
    t.entropy_weights += dirichlet_entropy(row);
  }
  return t;
}

double elbo(const ModelState& state, const ObservationMatrix& X) { return elbo_terms(state, X).total(); }

// ---------------------------------------------------------------------------
// Driver

void InferenceConfig::validate() const {
  if (k_init < 1) throw InvalidArgument("K_init must be >= 1");
  if (!(tolerance >= 0.0) || !std::isfinite(tolerance)) throw InvalidArgument("tolerance must be finite and >= 0");
  if (!(prune_threshold > 0.0 && prune_threshold < 1.0)) throw InvalidArgument("prune threshold must lie in (0, 1)");
}

InferenceResult run_inference(const ObservationMatrix& X, const Hyperparameters& hp, const InferenceConfig& config) {
  config.validate();
  RngStream init_rng(config.seed, 0);
  ModelState state = init_model(X, hp, config.k_init, init_rng, config.mode);
  return run_inference(X, std::move(state), config);
}

InferenceResult run_inference(const ObservationMatrix& X, ModelState state, const InferenceConfig& config) {
  config.validate();
  check_data(state, X);
  state.mode = config.mode;
  InferenceResult result;

  // Stream 0 seeds initialisation; dimension d proposes from stream d + 1.
  std::vector<RngStream> mh_streams;
  mh_streams.reserve(state.dims());
  for (std::size_t d = 0; d < state.dims(); ++d) mh_streams.emplace_back(config.seed, d + 1);

  double previous = elbo(state, X);
  for (std::size_t it = 1; it <= config.max_iter; ++it) {
    IterationRecord rec;
    rec.iteration = it;
    try {
      if (config.sample_features) {
        for (std::size_t d = 0; d < state.dims(); ++d) {
          if (mh_feature_step(state, X, d, mh_streams[d]).accepted) ++rec.accepted;
        }
      }
      update_activities(state, X);
      update_sources(state, X);
      update_responsibilities(state);
      update_mixture_weights(state);
      update_scales(state);
      update_lambda(state);
      update_sticks(state);
      update_phi(state, X);
      update_loadings(state, X);

      const Vector col_max = state.loadings.activity.colwise().maxCoeff().transpose();
      if ((col_max.array() < config.prune_threshold).all()) {
        // Retain the single most active feature.
        Eigen::Index best = 0;
        col_max.maxCoeff(&best);
        rec.pruned = state.features() - 1;
        if (rec.pruned > 0) restrict_features(state, {static_cast<std::size_t>(best)});
      } else {
        rec.pruned = prune_features(state, config.prune_threshold);
      }
    } catch (const NumericalError& err) {
      throw NumericalError("iteration " + std::to_string(it) + ": " + err.what());
    }

    rec.elbo = elbo(state, X);
    rec.features = state.features();
    rec.active = active_feature_count(state);
    result.trace.push_back(rec);
    const bool quiet = rec.accepted == 0 && rec.pruned == 0;
    if (quiet && std::fabs(rec.elbo - previous) <= config.tolerance * std::fabs(rec.elbo)) {
      result.converged = true;
      break;
    }
    previous = rec.elbo;
  }
  if (config.max_iter > 0) update_sources(state, X);
  result.state = std::move(state);
  return result;
}

}  // namespace ibpica
