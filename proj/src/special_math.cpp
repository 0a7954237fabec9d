#include "ibpica/special_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "ibpica/errors.hpp"

namespace ibpica {

void GammaParams::validate() const {
  if (!(shape > 0.0) || !(rate > 0.0) || !std::isfinite(shape) || !std::isfinite(rate)) {
    throw DomainError("Gamma parameters must be positive and finite (shape=" + std::to_string(shape) +
                      ", rate=" + std::to_string(rate) + ")");
  }
}

void BetaParams::validate() const {
  if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
    throw DomainError("Beta parameters must be positive and finite (a=" + std::to_string(a) +
                      ", b=" + std::to_string(b) + ")");
  }
}

double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) throw DomainError("digamma: argument must be positive and finite");
  double result = 0.0;
  // Shift into the asymptotic regime.
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Bernoulli-number tail through x^-14.
  const double series =
      inv2 * (1.0 / 12 -
              inv2 * (1.0 / 120 -
                      inv2 * (1.0 / 252 -
                              inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12.0))))));
  return result + std::log(x) - 0.5 * inv - series;
}

BetaExpectations beta_expectations(const BetaParams& p) {
  p.validate();
  const double dsum = digamma(p.a + p.b);
  return {digamma(p.a) - dsum, digamma(p.b) - dsum, p.a / (p.a + p.b)};
}

GammaExpectations gamma_expectations(const GammaParams& p) {
  p.validate();
  return {p.shape / p.rate, digamma(p.shape) - std::log(p.rate)};
}

namespace {

std::uint64_t poisson_inversion(double rate, RngStream& rng) {
  const double u = rng.uniform();
  double p = std::exp(-rate);
  double cdf = p;
  std::uint64_t k = 0;
  while (u > cdf) {
    ++k;
    p *= rate / static_cast<double>(k);
    cdf += p;
    // Guard against the cdf stalling below u through rounding.
    if (p <= 0.0 && cdf < u) break;
  }
  return k;
}

// Hoermann (1993), "The transformed rejection method for generating Poisson
// random variables".
std::uint64_t poisson_ptrs(double rate, RngStream& rng) {
  const double slam = std::sqrt(rate);
  const double loglam = std::log(rate);
  const double b = 0.931 + 2.53 * slam;
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  for (;;) {
    const double u = rng.uniform() - 0.5;
    const double v = rng.uniform();
    const double us = 0.5 - std::fabs(u);
    const double k = std::floor((2.0 * a / us + b) * u + rate + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(k);
    if (k < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
        -rate + k * loglam - std::lgamma(k + 1.0)) {
      return static_cast<std::uint64_t>(k);
    }
  }
}

}  // namespace

std::uint64_t sample_poisson(double rate, RngStream& rng) {
  if (!(rate >= 0.0) || !std::isfinite(rate)) throw DomainError("sample_poisson: rate must be finite and >= 0");
  if (rate == 0.0) return 0;
  return rate < 10.0 ? poisson_inversion(rate, rng) : poisson_ptrs(rate, rng);
}

double gamma_entropy(const GammaParams& p) {
  return p.shape - std::log(p.rate) + std::lgamma(p.shape) + (1.0 - p.shape) * digamma(p.shape);
}

double beta_entropy(const BetaParams& p) {
  const double lbeta = std::lgamma(p.a) + std::lgamma(p.b) - std::lgamma(p.a + p.b);
  return lbeta - (p.a - 1.0) * digamma(p.a) - (p.b - 1.0) * digamma(p.b) + (p.a + p.b - 2.0) * digamma(p.a + p.b);
}

double dirichlet_entropy(std::span<const double> alpha) {
  double a0 = 0.0, lgsum = 0.0;
  for (double a : alpha) {
    a0 += a;
    lgsum += std::lgamma(a);
  }
  double h = lgsum - std::lgamma(a0) + (a0 - static_cast<double>(alpha.size())) * digamma(a0);
  for (double a : alpha) h -= (a - 1.0) * digamma(a);
  return h;
}

double gamma_cross_term(const GammaParams& prior, const GammaParams& post) {
  const auto e = gamma_expectations(post);
  return prior.shape * std::log(prior.rate) - std::lgamma(prior.shape) + (prior.shape - 1.0) * e.log_x -
         prior.rate * e.x;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double bernoulli_entropy(double p) {
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace ibpica
