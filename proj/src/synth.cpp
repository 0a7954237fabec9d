#include "ibpica/synth.hpp"

#include <algorithm>
#include <cmath>

#include "ibpica/errors.hpp"
#include "ibpica/rng.hpp"

namespace ibpica {

namespace {
// Heavy-tailed source mixture: E[y^2] = 0.8 * 0.25 + 0.2 * 4 = 1.
constexpr double kNarrowWeight = 0.8;
constexpr double kNarrowSd = 0.5;
constexpr double kWideSd = 2.0;
}  // namespace

void SynthConfig::validate() const {
  if (dims < 1) throw InvalidArgument("synth: D must be >= 1");
  if (features < 1) throw InvalidArgument("synth: K_true must be >= 1");
  if (samples < 1) throw InvalidArgument("synth: N must be >= 1");
  if (!(sparsity > 0.0 && sparsity <= 1.0)) throw InvalidArgument("synth: sparsity must lie in (0, 1]");
  if (!std::isfinite(snr)) throw InvalidArgument("synth: snr must be finite");
}

SynthData synth_generate(const SynthConfig& config) {
  config.validate();
  const auto D = static_cast<Eigen::Index>(config.dims);
  const auto K = static_cast<Eigen::Index>(config.features);
  const auto N = static_cast<Eigen::Index>(config.samples);
  RngStream support_rng(config.seed, 0), slab_rng(config.seed, 1), source_rng(config.seed, 2),
      noise_rng(config.seed, 3);

  SynthData out;
  out.support = Matrix::Zero(D, K);
  out.loadings = Matrix::Zero(D, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    bool any = false;
    for (Eigen::Index d = 0; d < D; ++d) {
      if (support_rng.uniform() < config.sparsity) {
        out.support(d, k) = 1.0;
        any = true;
      }
    }
    if (!any) out.support(static_cast<Eigen::Index>(support_rng.below(config.dims)), k) = 1.0;
    for (Eigen::Index d = 0; d < D; ++d) {
      const double g = slab_rng.normal();
      if (out.support(d, k) > 0.0) out.loadings(d, k) = g;
    }
  }

  out.sources.resize(N, K);
  for (Eigen::Index n = 0; n < N; ++n) {
    for (Eigen::Index k = 0; k < K; ++k) {
      const double sd = source_rng.uniform() < kNarrowWeight ? kNarrowSd : kWideSd;
      out.sources(n, k) = sd * source_rng.normal();
    }
  }

  out.X = out.sources * out.loadings.transpose();
  if (config.snr > 0.0) {
    // Expected per-dimension signal variance with unit source second moments.
    const double signal = out.loadings.squaredNorm() / static_cast<double>(D);
    const double noise_var = signal / config.snr;
    out.noise_precision = 1.0 / noise_var;
    const double sd = std::sqrt(noise_var);
    for (Eigen::Index n = 0; n < N; ++n)
      for (Eigen::Index d = 0; d < D; ++d) out.X(n, d) += sd * noise_rng.normal();
  }
  return out;
}

void VideoSynthConfig::validate() const {
  if (height < 1 || width < 1 || frames < 1) throw InvalidArgument("synth videos: H, W and T must be >= 1");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw InvalidArgument("synth videos: noise must be finite and >= 0");
}

std::vector<VideoTensor> synth_videos(const VideoSynthConfig& config) {
  config.validate();
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  constexpr int kGratings = 3;
  std::vector<VideoTensor> out;
  for (std::size_t i = 0; i < config.count; ++i) {
    RngStream rng(derive_seed(config.seed, 7000 + i), 0);
    struct Grating {
      double kx, ky, omega, phase, amp;
    } gratings[kGratings];
    for (auto& g : gratings) {
      const double theta = kTwoPi * rng.uniform();
      const double freq = 0.08 + 0.2 * rng.uniform();  // cycles per pixel
      const double speed = 2.0 * rng.uniform() - 1.0;  // pixels per frame along the normal
      g.kx = kTwoPi * freq * std::cos(theta);
      g.ky = kTwoPi * freq * std::sin(theta);
      g.omega = kTwoPi * freq * speed;
      g.phase = kTwoPi * rng.uniform();
      g.amp = 0.08 + 0.1 * rng.uniform();
    }
    const double bx = rng.uniform() * static_cast<double>(config.width);
    const double by = rng.uniform() * static_cast<double>(config.height);
    const double vx = 2.0 * rng.uniform() - 1.0, vy = 2.0 * rng.uniform() - 1.0;
    const double radius = 2.0 + 3.0 * rng.uniform();
    const double blob_amp = rng.uniform() < 0.5 ? -0.25 : 0.25;

    VideoTensor v(config.height, config.width, config.frames);
    for (std::size_t t = 0; t < config.frames; ++t) {
      const double ft = static_cast<double>(t);
      const double cx = bx + vx * ft, cy = by + vy * ft;
      for (std::size_t y = 0; y < config.height; ++y)
        for (std::size_t x = 0; x < config.width; ++x) {
          const double fx = static_cast<double>(x), fy = static_cast<double>(y);
          double val = 0.5;
          for (const auto& g : gratings) val += g.amp * std::sin(g.kx * fx + g.ky * fy - g.omega * ft + g.phase);
          const double r2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
          val += blob_amp * std::exp(-0.5 * r2 / (radius * radius));
          val += config.noise * rng.normal();
          v.at(x, y, t) = std::clamp(val, 0.0, 1.0);
        }
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace ibpica
