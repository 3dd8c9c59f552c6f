// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace qatlab {

/// Counter-based generator: output i of a stream is splitmix64_mix(key + (i+1) * kGamma),
/// where key = splitmix64_mix(seed). The constants below are frozen; changing
/// any of them changes every stream and every recorded experiment.
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
  static constexpr std::uint64_t kMul1 = 0xBF58476D1CE4E5B9ULL;
  static constexpr std::uint64_t kMul2 = 0x94D049BB133111EBULL;

  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform01();
  /// Uniform in [lo, hi); caller guarantees lo < hi.
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (two draws per call, no caching).
  double normal();
  /// Uniform integer in [0, n) by rejection; n > 0.
  std::uint64_t uniform_int(std::uint64_t n);

  /// Independent child stream, derived from (seed, stream id) only.
  Rng fork(std::uint64_t stream) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64_mix(std::uint64_t z);

}  // namespace qatlab
