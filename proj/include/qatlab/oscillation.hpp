// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qatlab/quantizer.hpp"
#include "qatlab/rng.hpp"
#include "qatlab/tensor.hpp"

namespace qatlab {

/// Counts integer-code flips per parameter over a sliding window of steps and
/// keeps the full scale-factor traces.
class OscillationTracker {
 public:
  /// window == 0 tracks the whole run.
  explicit OscillationTracker(std::size_t window = 0);

  /// Throws ArgumentError if the code count changes between calls.
  void record_step(const IntTensor& codes, std::span<const double> scales);

  /// flips / (steps_in_window - 1) per parameter; StateError with < 2 steps.
  std::vector<double> flip_frequency() const;
  double mean_flip_frequency() const;

  const std::vector<std::uint32_t>& flip_counts() const { return flips_; }
  /// Steps currently inside the window.
  std::size_t window_steps() const { return count_; }
  std::size_t total_steps() const { return total_; }
  std::size_t window() const { return window_; }
  std::size_t parameters() const { return params_; }
  /// scale_traces()[q][t]: scale q at recorded step t.
  const std::vector<std::vector<double>>& scale_traces() const { return traces_; }

 private:
  std::size_t window_;
  std::size_t params_ = 0;
  std::size_t count_ = 0;
  std::size_t total_ = 0;
  std::size_t head_ = 0;  // ring slot of the oldest step when the window is full
  std::vector<std::int32_t> ring_;  // window_ * params_ codes (or just the last step)
  std::vector<std::uint32_t> flips_;
  std::vector<std::vector<double>> traces_;
};

struct BoundaryHistogram {
  /// bins[i] counts in-range elements whose distance to the nearest rounding
  /// threshold, d = |frac(w/s) - 0.5|, falls in [i, i+1) * 0.5 / bins.
  std::vector<std::uint64_t> bins;

  std::size_t bin_count() const { return bins.size(); }
  std::uint64_t total() const;
  /// Fraction of mass with d < limit (limit on a bin edge).
  double mass_below(double limit) const;
};

BoundaryHistogram boundary_histogram(const Tensor& w, const QuantizerState& q, std::size_t bins);

/// 3-D regression toy: recover x.w* from quantized x and w with learned scales.
struct ToyProblem {
  Tensor w_star{Shape{3}, std::vector<double>{0.55, -0.3, 1.2}};
  double x_lo = 0.0;
  double x_hi = 1.0;
  int bits_w = 1;
  int bits_x = 1;
  // 1-bit signed levels {-s, 0} cannot represent the positive w* entries.
  bool signed_w = false;
  std::size_t batch_size = 16;
  std::size_t steps = 10000;
  double lr = 0.01;
  double s_w0 = 1.0;
  double s_x0 = 1.0;
  /// Empty: w starts uniform in [-s_w0, s_w0).
  Tensor w_init;
  double ema_alpha = 0.99;
  double ema_warmup_fraction = 0.01;
  std::size_t eval_samples = 4096;
  /// Final steps averaged into ToyResult::live_tail_loss.
  std::size_t tail_steps = 500;

  /// Default w* = [0.55, -0.3, 1.2] * s0: coordinates placed off the grid.
  static ToyProblem paper_like();
  void validate() const;
};

struct ToyStep {
  std::size_t iter = 0;
  double w[3]{};
  double q_w[3]{};
  std::int32_t code[3]{};
  double s_w = 0.0;
  double s_x = 0.0;
  double loss = 0.0;  // batch loss (unsquared L2, mean over batch)
  std::uint64_t flips = 0;  // cumulative code changes so far
  // EMA shadows, meaningful only when the run used EMA.
  double ema_w[3]{};
  std::int32_t ema_code[3]{};
  double ema_s_w = 0.0;
  double ema_s_x = 0.0;
};

struct ToyResult {
  std::vector<ToyStep> trace;
  OscillationTracker tracker;
  std::optional<OscillationTracker> ema_tracker;
  double final_loss = 0.0;      // live parameters on the fixed evaluation batch
  double final_ema_loss = 0.0;  // shadow parameters on the same batch
  /// Mean evaluation loss of the live parameters over the last tail_steps.
  double live_tail_loss = 0.0;
  Tensor eval_x;
};

/// Mean over the batch of |x.w* - q(x, s_x).q(w, s_w)|.
double toy_objective(const Tensor& w, const QuantizerState& s_w, const QuantizerState& s_x,
                     const Tensor& x_batch, const Tensor& w_star);

/// Gradient descent on (w, s_w, s_x) with the squared residual; every step
/// recorded. Throws DivergenceError if the batch loss exceeds 1e6.
ToyResult run_toy(const ToyProblem& p, bool use_ema, Rng& rng);

/// Per-coordinate flip frequency of the live (or shadow) codes over the last
/// `tail` steps of a toy trace.
std::vector<double> toy_tail_flip_frequency(const std::vector<ToyStep>& trace, std::size_t tail,
                                            bool shadow);

}  // namespace qatlab
