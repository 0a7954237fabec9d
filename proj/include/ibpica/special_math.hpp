#pragma once

#include <cstdint>
#include <span>

#include "ibpica/rng.hpp"

namespace ibpica {

/// Gamma distribution in shape/rate form, mean shape/rate.
struct GammaParams {
  double shape = 1.0;
  double rate = 1.0;

  /// Throws DomainError unless both parameters are positive and finite.
  void validate() const;
};

struct BetaParams {
  double a = 1.0;
  double b = 1.0;

  void validate() const;
};

struct BetaExpectations {
  double log_v;
  double log_1mv;
  double v;
};

struct GammaExpectations {
  double x;
  double log_x;
};

/// Digamma function. Accurate to ~2e-13 absolute for x >= 1e-3.
double digamma(double x);

BetaExpectations beta_expectations(const BetaParams& p);
GammaExpectations gamma_expectations(const GammaParams& p);

/// Poisson draw: inversion below rate 10, transformed rejection (PTRS) above.
std::uint64_t sample_poisson(double rate, RngStream& rng);

// Entropies of the variational factors, all in nats.
double gamma_entropy(const GammaParams& p);
double beta_entropy(const BetaParams& p);
double dirichlet_entropy(std::span<const double> alpha);
/// E_q[log p(x)] for p = Gamma(prior) and x ~ q = Gamma(post).
double gamma_cross_term(const GammaParams& prior, const GammaParams& post);

double sigmoid(double x);
double bernoulli_entropy(double p);
double log_sum_exp(std::span<const double> values);

}  // namespace ibpica
