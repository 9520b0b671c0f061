#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace trajaux {

/// Seeded generator with platform-independent draws. std::normal_distribution
/// and friends are implementation-defined, so the distributions are written
/// out here on top of the (portable) mt19937_64 bit stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal();

  /// Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n);

  /// +1 or -1 with equal probability.
  double rademacher() { return (engine_() >> 63) ? 1.0 : -1.0; }

  /// k distinct values from [lo, hi), sorted ascending (Floyd's algorithm).
  std::vector<std::size_t> sorted_sample(std::size_t lo, std::size_t hi, std::size_t k);

  std::vector<double> normal_vector(std::size_t n, double scale = 1.0);

  /// Derive an independent child seed; used to give each step/row its own stream.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace trajaux
