// SPDX-License-Identifier: Apache-2.0
#include "qatlab/rng.hpp"

#include <cmath>
#include <numbers>

namespace qatlab {

std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * Rng::kMul1;
  z = (z ^ (z >> 27)) * Rng::kMul2;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), key_(splitmix64_mix(seed)) {}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix64_mix(key_ + counter_ * kGamma);
}

double Rng::uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) {
  const double u = lo + (hi - lo) * uniform01();
  // Guard against rounding up to hi for huge ranges.
  return u < hi ? u : std::nextafter(hi, lo);
}

double Rng::normal() {
  double u1 = uniform01();
  const double u2 = uniform01();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

Rng Rng::fork(std::uint64_t stream) const {
  return Rng(splitmix64_mix(seed_ ^ splitmix64_mix(stream + kGamma)));
}

}  // namespace qatlab
