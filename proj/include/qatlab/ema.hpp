// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qatlab/network.hpp"
#include "qatlab/tensor.hpp"

namespace qatlab {

struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};

/// Shadow copies of trainable parameters. The effective decay is zero for the
/// first `warmup_iters` updates (shadow = live copy), then `alpha`.
struct EMAState {
  std::map<std::string, Tensor> shadows;
  double alpha = 0.9999;
  std::size_t warmup_iters = 0;
  std::size_t iter = 0;

  double effective_decay() const { return iter < warmup_iters ? 0.0 : alpha; }
};

/// alpha with zero decay over the first `warmup_fraction` of `total_iters`.
EMAState make_ema(double alpha, std::size_t total_iters, double warmup_fraction = 0.01);

/// shadow <- a * shadow + (1 - a) * live for every entry, a = effective decay.
/// The first call seeds the shadows with copies of `live`.
void ema_update(EMAState& state, std::span<const NamedTensor> live);

/// Weights, biases, weight/activation scales, BN affine parameters and QC
/// parameters. BN running statistics are not included.
std::vector<NamedTensor> ema_tracked(const NetworkSpec& net);

/// Copy of `net` with every tracked tensor replaced by its shadow.
NetworkSpec materialize_ema(const NetworkSpec& net, const EMAState& state);

}  // namespace qatlab
