#pragma once

#include <cstdint>

#include "transx/tensor.hpp"

namespace transx {

/// Counter-based generator: draw k of stream s is a pure function of
/// (seed, s, k), so streams are reproducible bit-for-bit on any platform.
/// The mixing function is the SplitMix64 finalizer.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one value per pair of draws).
  double normal();

  Tensor normal_tensor(const Shape& shape, double stddev = 1.0);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

  /// Independent generator for sub-task `stream` derived from this seed.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace transx
