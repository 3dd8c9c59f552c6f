// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>

#include "qatlab/network.hpp"

namespace qatlab {

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

/// One bias-corrected Adam update over every param with a gradient attached.
/// Scale parameters are clamped to kMinScale afterwards. Non-finite gradients
/// throw EvaluationError naming the parameter; no parameter is touched then.
void adam_step(AdamState& state, std::span<const ParamRef> params);

}  // namespace qatlab
