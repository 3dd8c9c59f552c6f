// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "qatlab/datasets.hpp"
#include "qatlab/ema.hpp"
#include "qatlab/network.hpp"
#include "qatlab/oscillation.hpp"

namespace qatlab {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 1e-3;
  /// Latent trains without quantizers (full-precision pretraining).
  QuantMode mode = QuantMode::Quantized;
  bool ema = false;
  double ema_alpha = 0.9999;
  double ema_warmup_fraction = 0.01;
  double dampening_lambda = 0.0;
  std::uint64_t seed = 0;
  /// Flip-frequency window in iterations; 0 tracks the whole run.
  std::size_t flip_window = 2000;

  void validate() const;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;  // classification only
  std::size_t samples = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t iterations = 0;  // cumulative
  double train_loss = 0.0;     // mean task loss over the epoch's batches
  double penalty = 0.0;        // mean dampening term
  EvalResult eval;
  EvalResult ema_eval;         // equals eval when EMA is off
  double mean_flip_frequency = 0.0;
};

struct TrainResult {
  NetworkSpec net;
  EMAState ema;
  OscillationTracker tracker{0};
  std::vector<EpochMetrics> history;
  std::size_t iterations = 0;
};

/// Adam on every trainable tensor of `net` over the train split. Each iteration
/// runs forward, loss, backward, the optional dampening term, adam_step, BN
/// running-stat update, ema_update and a code-flip record. After each epoch the
/// live (and shadow) network is evaluated on the eval split with BN frozen.
/// Throws DivergenceError when a batch loss is non-finite or above 1e6.
TrainResult train_qat(NetworkSpec net, const Dataset& data, const TrainConfig& cfg);

/// Mean loss (and accuracy) over `idx`, batched, BN in eval mode, last
/// partial batch kept.
EvalResult evaluate(const NetworkSpec& net, const Dataset& data, std::span<const std::size_t> idx,
                    const ForwardOptions& opt = {}, std::size_t batch = 256);

}  // namespace qatlab
