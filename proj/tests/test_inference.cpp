#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "ibpica/errors.hpp"
#include "ibpica/inference.hpp"
#include "ibpica/serialize.hpp"
#include "ibpica/synth.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ibpica;
using testing::max_abs_diff;
using testing::random_matrix;
using testing::random_state;

namespace {

ObservationMatrix small_data(std::uint64_t seed, std::size_t N, std::size_t D, std::size_t K) {
  SynthConfig sc;
  sc.dims = D;
  sc.features = K;
  sc.samples = N;
  sc.seed = seed;
  return ObservationMatrix(synth_generate(sc).X);
}

}  // namespace

TEST_CASE("init_model shapes, prior values and determinism") {
  const ObservationMatrix X = small_data(1, 30, 4, 2);
  RngStream r1(7, 0), r2(7, 0);
  const Hyperparameters hp;
  const ModelState s = init_model(X, hp, 1, r1);
  CHECK(s.features() == 1);
  CHECK(s.loadings.precision.size() == 1);
  CHECK(s.sticks.tau_tilde.size() == 1);
  CHECK(s.precisions.lambda.size() == 1);
  s.check_invariants();
  for (std::size_t j = 0; j < hp.components(); ++j) {
    CHECK(s.sources.mixture_weights(0, j) == hp.xi[j]);
    CHECK(s.sources.scale_shape(0, j) == hp.eta1);
  }
  CHECK(serialize_model(s) == serialize_model(init_model(X, hp, 1, r2)));
  RngStream r3(7, 0);
  CHECK_THROWS_AS(init_model(X, hp, 0, r3), InvalidArgument);
}

TEST_CASE("MH step is a no-op when the birth rate vanishes") {
  const ObservationMatrix X = small_data(2, 20, 3, 2);
  RngStream r(1, 0);
  ModelState s = init_model(X, Hyperparameters{}, 2, r);
  s.sticks.alpha_rate = 1e300;  // E[alpha] ~ 0
  const std::string before = serialize_model(s);
  RngStream mh(1, 1);
  for (int i = 0; i < 50; ++i) {
    const MHResult res = mh_feature_step(s, X, 1, mh);
    CHECK_FALSE(res.accepted);
    CHECK(res.count == 0);
  }
  CHECK(serialize_model(s) == before);
}

TEST_CASE("MH proposal log-thetas match the dense oracle and the marginal likelihood ratio") {
  std::mt19937_64 rng(3);
  const ModelState s = random_state(rng, 4, 3, 2, 2);
  const Matrix X = random_matrix(rng, 4, 3);
  ModelState t = s;
  t.loadings.activity.row(1) << 0.9, 0.8;  // K_d = 2
  Eigen::RowVectorXd g(1);
  g << 0.7;
  const MHProposal p = build_mh_proposal(t, ObservationMatrix(X), 1, g);
  CHECK(p.active.size() == 2);
  CHECK(std::fabs(p.log_theta_star - oracle::log_theta_star(t, X, 1, g.transpose())) < 1e-8);
  CHECK(std::fabs(p.log_theta_cur - oracle::log_theta_current(t, X, 1)) < 1e-8);
  CHECK(std::fabs(p.log_theta_star - oracle::marginal_ratio(t, X, 1, g.transpose())) < 1e-8);
}

TEST_CASE("MH log ratio does not depend on sample order") {
  std::mt19937_64 rng(4);
  const ModelState s = random_state(rng, 5, 3, 3, 2);
  const Matrix X = random_matrix(rng, 5, 3);
  std::vector<int> perm{3, 0, 4, 1, 2};
  ModelState t = s;
  Matrix Y = X;
  for (int i = 0; i < 5; ++i) {
    Y.row(i) = X.row(perm[i]);
    t.sources.mean.row(i) = s.sources.mean.row(perm[i]);
    t.sources.variance.row(i) = s.sources.variance.row(perm[i]);
    for (std::size_t j = 0; j < s.components(); ++j)
      t.sources.responsibilities[j].row(i) = s.sources.responsibilities[j].row(perm[i]);
  }
  Eigen::RowVectorXd g(2);
  g << -0.4, 1.3;
  for (std::size_t d = 0; d < 3; ++d) {
    const MHProposal a = build_mh_proposal(s, ObservationMatrix(X), d, g);
    const MHProposal b = build_mh_proposal(t, ObservationMatrix(Y), d, g);
    CHECK(std::fabs((a.log_theta_star - a.log_theta_cur) - (b.log_theta_star - b.log_theta_cur)) < 1e-10);
  }
}

TEST_CASE("accepted births append columns initialised from the proposal") {
  const ObservationMatrix X = small_data(5, 40, 4, 3);
  RngStream r(2, 0);
  ModelState s = init_model(X, Hyperparameters{}, 1, r);
  s.sticks.alpha_shape = 50.0;  // many proposals
  s.sticks.alpha_rate = 1.0;
  RngStream mh(2, 3);
  bool accepted = false;
  for (int i = 0; i < 200 && !accepted; ++i) {
    const std::size_t K0 = s.features();
    const MHResult res = mh_feature_step(s, X, 2, mh);
    if (!res.accepted) {
      CHECK(s.features() == K0);
      continue;
    }
    accepted = true;
    CHECK(s.features() == K0 + res.count);
    for (std::size_t k = K0; k < s.features(); ++k) {
      CHECK(s.loadings.activity(2, k) == 1.0);
      for (std::size_t d = 0; d < 4; ++d)
        if (d != 2) CHECK(s.loadings.mean(d, k) == 0.0);
    }
    s.check_invariants();
  }
  CHECK(accepted);
}

TEST_CASE("log acceptance is zero when the thetas agree") {
  MHProposal p;
  p.log_theta_star = p.log_theta_cur = -12.5;
  CHECK(p.log_acceptance() == 0.0);
  p.log_theta_star = -10.0;
  CHECK(p.log_acceptance() == 0.0);
  p.log_theta_star = -14.5;
  CHECK(p.log_acceptance() == doctest::Approx(-2.0));
}

TEST_CASE("loading update approaches least squares in the noise-free limit") {
  std::mt19937_64 rng(6);
  const int N = 50;
  ModelState s = random_state(rng, N, 1, 1, 1);
  s.loadings.activity(0, 0) = 1.0;
  s.precisions.phi = {1e12, 1.0};
  const Matrix y = random_matrix(rng, N, 1);
  s.sources.mean = y;
  s.sources.variance.setConstant(1e-14);
  Matrix X = 2.5 * y + 0.1 * random_matrix(rng, N, 1);
  update_loadings(s, ObservationMatrix(X));
  const double ls = X.col(0).dot(y.col(0)) / y.col(0).squaredNorm();
  CHECK(s.loadings.mean(0, 0) == doctest::Approx(ls).epsilon(1e-8));
}

TEST_CASE("spike-only loadings stay finite") {
  std::mt19937_64 rng(7);
  ModelState s = random_state(rng, 5, 3, 2, 2);
  s.loadings.activity.setZero();
  CHECK(s.loadings.expected().isZero(0.0));
  update_loadings(s, ObservationMatrix(random_matrix(rng, 5, 3)));
  CHECK(s.loadings.mean.allFinite());
  CHECK((s.loadings.precision.array() > 0).all());
}

TEST_CASE("source update: zero loadings and the scalar conjugate case") {
  std::mt19937_64 rng(8);
  ModelState s = random_state(rng, 4, 2, 2, 2);
  s.loadings.activity.setZero();
  update_sources(s, ObservationMatrix(random_matrix(rng, 4, 2)));
  CHECK(s.sources.mean.isZero(0.0));
  CHECK((s.sources.variance.array() > 0).all());

  // J = 1, unit scale, K = D = 1: y ~ N(0, 1), x = g y + noise.
  ModelState t = random_state(rng, 1, 1, 1, 1);
  t.loadings.activity(0, 0) = 1.0;
  t.loadings.mean(0, 0) = 2.0;
  t.loadings.precision(0) = 4.0;  // E[g^2] = 4.25
  t.precisions.phi = {3.0, 1.0};  // E[phi] = 3
  t.sources.scale_shape(0, 0) = 5.0;
  t.sources.scale_rate(0, 0) = 5.0;  // E[s^-1] = 1
  Matrix x(1, 1);
  x << 1.5;
  for (UpdateMode mode : {UpdateMode::Exact, UpdateMode::AsPrinted}) {
    t.mode = mode;
    update_sources(t, ObservationMatrix(x));
    const double prec = 3.0 * 4.25 + 1.0;
    CHECK(t.sources.variance(0, 0) == doctest::Approx(1.0 / prec).epsilon(1e-14));
    CHECK(t.sources.mean(0, 0) == doctest::Approx(3.0 * 2.0 * 1.5 / prec).epsilon(1e-14));
  }
}

TEST_CASE("responsibilities: one component and identical components") {
  std::mt19937_64 rng(9);
  ModelState s = random_state(rng, 5, 2, 3, 1);
  update_responsibilities(s);
  CHECK((s.sources.responsibilities[0].array() == 1.0).all());

  ModelState t = random_state(rng, 5, 2, 3, 2);
  t.sources.mixture_weights.col(1) = t.sources.mixture_weights.col(0);
  t.sources.scale_shape.col(1) = t.sources.scale_shape.col(0);
  t.sources.scale_rate.col(1) = t.sources.scale_rate.col(0);
  update_responsibilities(t);
  CHECK((t.sources.responsibilities[0].array() - 0.5).abs().maxCoeff() < 1e-15);
}

TEST_CASE("mixture weights gain exactly N per feature") {
  std::mt19937_64 rng(10);
  ModelState s = random_state(rng, 5, 2, 3, 2);
  update_mixture_weights(s);
  const double xi = std::accumulate(s.hp.xi.begin(), s.hp.xi.end(), 0.0);
  for (int k = 0; k < 3; ++k) CHECK(s.sources.mixture_weights.row(k).sum() == doctest::Approx(xi + 5.0).epsilon(1e-14));
}

TEST_CASE("scale rate stays at the prior when sources are exactly zero") {
  std::mt19937_64 rng(11);
  ModelState s = random_state(rng, 4, 2, 2, 1);
  s.sources.mean.setZero();
  s.sources.variance.setZero();
  update_scales(s);
  CHECK((s.sources.scale_rate.array() == s.hp.eta2).all());
  CHECK((s.sources.scale_shape.array() == s.hp.eta1 + 2.0).all());
}

TEST_CASE("lambda update: prior recovery and shrinkage") {
  std::mt19937_64 rng(12);
  ModelState s = random_state(rng, 3, 2, 2, 2);
  s.loadings.activity.setZero();
  update_lambda(s);
  for (const auto& l : s.precisions.lambda) {
    CHECK(l.shape == s.hp.c);
    CHECK(l.rate == s.hp.f);
  }
  ModelState a = random_state(rng, 3, 2, 2, 2), b = a;
  b.loadings.mean *= 3.0;
  update_lambda(a);
  update_lambda(b);
  for (int k = 0; k < 2; ++k)
    CHECK(b.precisions.lambda[k].shape / b.precisions.lambda[k].rate <
          a.precisions.lambda[k].shape / a.precisions.lambda[k].rate);
}

TEST_CASE("phi update: exact fit leaves the prior rate; shape depends on N and D only") {
  std::mt19937_64 rng(13);
  ModelState s = random_state(rng, 4, 3, 2, 2);
  s.loadings.activity.setOnes();
  s.loadings.precision.setConstant(1e15);
  s.sources.variance.setConstant(1e-15);
  const Matrix X = s.sources.mean * s.loadings.expected().transpose();
  update_phi(s, ObservationMatrix(X));
  CHECK(s.precisions.phi.rate == doctest::Approx(s.hp.b).epsilon(1e-10));
  const double shape = s.precisions.phi.shape;
  update_phi(s, ObservationMatrix(X + random_matrix(rng, 4, 3)));
  CHECK(s.precisions.phi.shape == shape);
  CHECK(shape == s.hp.a + 6.0);
}

TEST_CASE("stick update: weights form a simplex; full activity leaves tau_hat at 1") {
  std::mt19937_64 rng(14);
  ModelState s = random_state(rng, 3, 3, 3, 2);
  update_sticks(s);
  CHECK(s.sticks.q_weights.sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(s.sticks.q_weights.minCoeff() >= 0.0);
  s.loadings.activity.setOnes();
  update_sticks(s);
  CHECK((s.sticks.tau_hat.array() == 1.0).all());
  s.check_invariants();
}

TEST_CASE("log pi is non-increasing in k") {
  std::mt19937_64 rng(15);
  const ModelState s = random_state(rng, 3, 3, 3, 2);
  const Expectations e = compute_expectations(s);
  for (int k = 1; k < 3; ++k) CHECK(e.log_pi(k) <= e.log_pi(k - 1));
}

TEST_CASE("an all-spike column leaves the likelihood and loading terms unchanged") {
  std::mt19937_64 rng(16);
  const ModelState s = random_state(rng, 5, 3, 2, 2);
  const ObservationMatrix X(random_matrix(rng, 5, 3));
  ModelState t = s;
  NewFeature nf;
  nf.proposing_dim = 0;
  nf.source_mean = Vector::Zero(5);
  nf.source_variance = Vector::Ones(5);
  append_features(t, {nf});
  t.loadings.activity.col(2).setZero();
  t.precisions.lambda[2] = {t.hp.c, t.hp.f};
  const ElboTerms a = elbo_terms(s, X), b = elbo_terms(t, X);
  CHECK(b.likelihood == doctest::Approx(a.likelihood).epsilon(1e-14));
  CHECK(b.slab == doctest::Approx(a.slab).epsilon(1e-14));
  CHECK(b.entropy_loadings == doctest::Approx(a.entropy_loadings).epsilon(1e-14));
  CHECK(b.lambda + b.entropy_lambda == doctest::Approx(a.lambda + a.entropy_lambda).epsilon(1e-12));
  CHECK(elbo(s, X) == elbo(s, X));
}

TEST_CASE("each exact update alone never lowers the ELBO") {
  using Update = std::function<void(ModelState&, const ObservationMatrix&)>;
  const std::vector<std::pair<const char*, Update>> updates{
      {"activities", [](ModelState& s, const ObservationMatrix& X) { update_activities(s, X); }},
      {"loadings", [](ModelState& s, const ObservationMatrix& X) { update_loadings(s, X); }},
      {"sources", [](ModelState& s, const ObservationMatrix& X) { update_sources(s, X); }},
      {"responsibilities", [](ModelState& s, const ObservationMatrix&) { update_responsibilities(s); }},
      {"mixture weights", [](ModelState& s, const ObservationMatrix&) { update_mixture_weights(s); }},
      {"scales", [](ModelState& s, const ObservationMatrix&) { update_scales(s); }},
      {"lambda", [](ModelState& s, const ObservationMatrix&) { update_lambda(s); }},
      {"phi", [](ModelState& s, const ObservationMatrix& X) { update_phi(s, X); }},
      {"sticks", [](ModelState& s, const ObservationMatrix&) { update_sticks(s); }},
  };
  std::mt19937_64 rng(17);
  for (int inst = 0; inst < 20; ++inst) {
    const int N = 3 + inst % 5, D = 2 + inst % 3, K = 1 + inst % 3, J = 1 + inst % 2;
    const ModelState s0 = random_state(rng, N, D, K, J);
    const ObservationMatrix X(random_matrix(rng, N, D));
    for (const auto& [name, fn] : updates) {
      ModelState s = s0;
      const double before = elbo(s, X);
      fn(s, X);
      const double after = elbo(s, X);
      INFO(name << " instance " << inst);
      CHECK(after >= before - 1e-8 * std::fabs(before));
    }
  }
}

TEST_CASE("pruning") {
  std::mt19937_64 rng(18);
  ModelState s = random_state(rng, 5, 3, 3, 2);
  const ObservationMatrix X(random_matrix(rng, 5, 3));
  const std::string before = serialize_model(s);
  CHECK(prune_features(s, 0.01) == 0);
  CHECK(serialize_model(s) == before);

  s.loadings.activity.col(1).setZero();
  const double lik = elbo_terms(s, X).likelihood;
  CHECK(prune_features(s, 0.01) == 1);
  CHECK(s.features() == 2);
  CHECK(std::fabs(elbo_terms(s, X).likelihood - lik) < 1e-10 * std::fabs(lik));

  CHECK_THROWS_AS(prune_features(s, 1.0 - 1e-12), InvalidArgument);
  CHECK(s.features() == 2);
}

TEST_CASE("max_iter = 0 returns the initial state") {
  const ObservationMatrix X = small_data(19, 30, 4, 2);
  InferenceConfig cfg;
  cfg.max_iter = 0;
  cfg.seed = 4;
  const InferenceResult r = run_inference(X, Hyperparameters{}, cfg);
  RngStream rng(4, 0);
  CHECK(serialize_model(r.state) == serialize_model(init_model(X, Hyperparameters{}, cfg.k_init, rng)));
  CHECK(r.trace.empty());
}

TEST_CASE("inference is deterministic and independent of the worker count") {
  const ObservationMatrix X = small_data(20, 300, 6, 3);
  InferenceConfig cfg;
  cfg.max_iter = 15;
  cfg.seed = 9;
  setenv("IBPICA_THREADS", "1", 1);
  const InferenceResult a = run_inference(X, Hyperparameters{}, cfg);
  setenv("IBPICA_THREADS", "4", 1);
  const InferenceResult b = run_inference(X, Hyperparameters{}, cfg);
  unsetenv("IBPICA_THREADS");
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i].elbo == b.trace[i].elbo);
  CHECK(serialize_model(a.state) == serialize_model(b.state));
}

TEST_CASE("one update cycle commutes with feature permutation") {
  // The stick-breaking prior orders features, so the activity and stick
  // updates (which read E[log pi_k]) are excluded; every other factor is
  // exchangeable across columns.
  std::mt19937_64 rng(21);
  const ModelState s = random_state(rng, 5, 3, 3, 2);
  const ObservationMatrix X(random_matrix(rng, 5, 3));
  const std::vector<std::size_t> perm{2, 0, 1};
  const auto cycle = [&](ModelState& m) {
    update_sources(m, X);
    update_responsibilities(m);
    update_mixture_weights(m);
    update_scales(m);
    update_lambda(m);
    update_phi(m, X);
    update_loadings(m, X);
  };
  ModelState a = s;
  cycle(a);
  a = permute_features(a, perm);
  ModelState b = permute_features(s, perm);
  cycle(b);
  CHECK(max_abs_diff(a.loadings.mean, b.loadings.mean) < 1e-12);
  CHECK(max_abs_diff(a.sources.mean, b.sources.mean) < 1e-12);
  CHECK(max_abs_diff(a.sources.mixture_weights, b.sources.mixture_weights) < 1e-12);
  CHECK(max_abs_diff(a.sources.scale_rate, b.sources.scale_rate) < 1e-12);
  CHECK(std::fabs(a.precisions.phi.rate - b.precisions.phi.rate) < 1e-12);
}

TEST_CASE("invariants hold after every phase of a run") {
  const ObservationMatrix X = small_data(22, 100, 5, 3);
  RngStream rng(3, 0);
  ModelState s = init_model(X, Hyperparameters{}, 4, rng);
  s.check_invariants();
  RngStream mh(3, 1);
  for (int it = 0; it < 5; ++it) {
    for (std::size_t d = 0; d < 5; ++d) mh_feature_step(s, X, d, mh);
    s.check_invariants();
    update_activities(s, X);
    update_sources(s, X);
    update_responsibilities(s);
    s.check_invariants();
    update_mixture_weights(s);
    update_scales(s);
    update_lambda(s);
    update_sticks(s);
    update_phi(s, X);
    update_loadings(s, X);
    s.check_invariants();
  }
}

TEST_CASE("model container round-trips bit-exactly and rejects damage") {
  std::mt19937_64 rng(23);
  const ModelState s = random_state(rng, 4, 3, 2, 2, UpdateMode::AsPrinted);
  ModelState fixed = s;
  update_sticks(fixed);  // consistent q weights
  const std::string bytes = serialize_model(fixed);
  CHECK(bytes.substr(0, 8) == std::string("IBPICA1\0", 8));
  const ModelState back = deserialize_model(bytes);
  CHECK(serialize_model(back) == bytes);
  CHECK(back.mode == UpdateMode::AsPrinted);
  CHECK_THROWS_AS(deserialize_model(bytes.substr(0, bytes.size() - 3)), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(bad), FormatError);
}

TEST_CASE("update mode names") {
  CHECK(update_mode_from_string("exact") == UpdateMode::Exact);
  CHECK(update_mode_from_string("as-printed") == UpdateMode::AsPrinted);
  CHECK_THROWS_AS(update_mode_from_string("fast"), InvalidArgument);
  CHECK_THROWS_AS(Hyperparameters::with_components(0), InvalidArgument);
}
