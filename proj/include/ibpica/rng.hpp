#pragma once

#include <cstdint>
#include <random>

namespace ibpica {

/// Seeded random stream. Draws are a pure function of (seed, stream id,
/// call sequence); distinct stream ids give independent sequences, so
/// parallel workers each take their own stream instead of sharing one.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  /// Sibling stream under the same root seed.
  RngStream split(std::uint64_t stream_id) const { return RngStream(seed_, stream_id); }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform on (0, 1).
  double uniform_open();
  /// Standard normal via the Marsaglia polar method.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Root seed for an independent sub-task (splitmix64 of seed and tag).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace ibpica
