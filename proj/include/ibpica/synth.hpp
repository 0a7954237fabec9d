#pragma once

#include <cstdint>

#include <vector>

#include "ibpica/model.hpp"
#include "ibpica/video.hpp"

namespace ibpica {

struct SynthConfig {
  std::size_t dims = 16;
  std::size_t features = 5;
  std::size_t samples = 2000;
  double sparsity = 0.5;  // probability that a loading is active
  double snr = 10.0;      // average signal variance over noise variance; <= 0 means noiseless
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthData {
  Matrix X;         // N x D
  Matrix loadings;  // D x K
  Matrix sources;   // N x K
  Matrix support;   // D x K, 0/1
  double noise_precision = 0.0;  // 0 when noiseless
};

/// Ground-truth draw: Bernoulli(sparsity) support with N(0, 1) slabs,
/// sources from a zero-mean two-component Gaussian mixture with unit second
/// moment, isotropic Gaussian noise. Every column keeps at least one active
/// loading.
SynthData synth_generate(const SynthConfig& config);

struct VideoSynthConfig {
  std::size_t count = 0;
  std::size_t height = 32, width = 32, frames = 20;
  double noise = 0.02;  // per-voxel Gaussian noise sd before clamping
  std::uint64_t seed = 0;

  void validate() const;
};

/// Clips of drifting sinusoidal gratings and a moving Gaussian blob on a grey
/// background, clamped to [0, 1].
std::vector<VideoTensor> synth_videos(const VideoSynthConfig& config);

}  // namespace ibpica
