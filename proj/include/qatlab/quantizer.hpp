// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "qatlab/tensor.hpp"

namespace qatlab {

enum class Granularity { PerTensor, PerChannel };

std::string to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

/// Lower bound every learned scale is clamped to.
inline constexpr double kMinScale = 1e-8;

/// Parameters of the uniform quantizer s * clip(round(w / s), lo, hi).
///
/// `scale` has one entry for per-tensor quantizers and one entry per slice of
/// `axis` for per-channel quantizers. Rounding is half-away-from-zero.
struct QuantizerState {
  Tensor scale{Shape{1}, 1.0};
  int bits = 8;
  bool is_signed = true;
  std::int64_t lo = -128;
  std::int64_t hi = 127;
  Granularity granularity = Granularity::PerTensor;
  std::size_t axis = 0;
  /// Multiply the scale gradient by 1/sqrt(N * Qp) (learned step size rule).
  bool lsq_grad_scale = true;

  static QuantizerState make(int bits, bool is_signed, double s = 1.0);
  static QuantizerState make_per_channel(int bits, bool is_signed, std::size_t axis,
                                         Tensor scale);

  std::size_t channels() const { return scale.numel(); }
  /// Throws ArgumentError if any invariant is broken. When `shape` is given
  /// the per-channel scale length is checked against it.
  void validate() const;
  void validate_for(const Shape& shape) const;
  /// Level count used by the gradient scaling rule: hi, or |lo| when hi == 0.
  double positive_levels() const;
};

struct SoftRoundConfig {
  double k = 0.45;
  void validate() const;
};

struct QuantGrad {
  Tensor g_w;
  Tensor g_s;  // shaped like QuantizerState::scale
};

/// Maps a flat element index onto its scale channel.
struct ChannelLayout {
  std::size_t channels = 1;
  std::size_t inner = 1;

  static ChannelLayout of(const QuantizerState& q, const Shape& shape);
  std::size_t channel(std::size_t flat) const { return (flat / inner) % channels; }
};

double round_half_away(double z);

Tensor quantize(const Tensor& w, const QuantizerState& q);

/// STE for w and the learned-step-size rule for s:
///   in range:   dq/dw = 1, dq/ds = round(z) - z
///   below lo:   dq/dw = 0, dq/ds = lo
///   above hi:   dq/dw = 0, dq/ds = hi
/// g_s is summed per channel and scaled by 1/sqrt(N * Qp) when lsq_grad_scale is
/// set, N being the elements per channel divided by `samples` (the batch size for
/// activations, so the scale gradient does not depend on it).
QuantGrad quantize_backward(const Tensor& w, const QuantizerState& q, const Tensor& g_out,
                            std::size_t samples = 1);

/// Rounds only values within k of an integer level; the rest stay latent but clipped.
Tensor soft_round(const Tensor& w, const QuantizerState& q, const SoftRoundConfig& c);

IntTensor integer_code(const Tensor& w, const QuantizerState& q);

enum class ScaleInit { Weight, Activation };

struct ScaleInitResult {
  QuantizerState state;
  bool degenerate = false;  // tensor was all zeros; scale floored
};

/// Weights: max|w| / hi (per channel when the template is per-channel).
/// Activations: 99.9th percentile of |w| / hi. Both floored at kMinScale.
ScaleInitResult init_scale(const Tensor& w, const QuantizerState& templ, ScaleInit kind);

/// Sets every scale entry below kMinScale to kMinScale.
void clamp_scale(Tensor& scale);

}  // namespace qatlab
