// SPDX-License-Identifier: Apache-2.0
#include "qatlab/ema.hpp"

#include <cmath>

#include "qatlab/error.hpp"

namespace qatlab {

EMAState make_ema(double alpha, std::size_t total_iters, double warmup_fraction) {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw ArgumentError("EMA decay must lie in [0, 1), got " + std::to_string(alpha));
  }
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
    throw ArgumentError("EMA warmup fraction must lie in [0, 1]");
  }
  EMAState st;
  st.alpha = alpha;
  st.warmup_iters =
      static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_iters)));
  return st;
}

void ema_update(EMAState& state, std::span<const NamedTensor> live) {
  if (state.shadows.empty()) {
    for (const auto& p : live) state.shadows.emplace(p.name, *p.tensor);
  }
  for (const auto& p : live) {
    auto it = state.shadows.find(p.name);
    if (it == state.shadows.end()) throw StateError("ema_update: no shadow for '" + p.name + "'");
    if (it->second.shape() != p.tensor->shape()) {
      throw StateError("ema_update: shape mismatch for '" + p.name + "': shadow " +
                       shape_str(it->second.shape()) + " vs live " +
                       shape_str(p.tensor->shape()));
    }
  }
  const double a = state.effective_decay();
  for (const auto& p : live) {
    Tensor& s = state.shadows.at(p.name);
    const Tensor& w = *p.tensor;
    if (a == 0.0) {
      s = w;
      continue;
    }
    // s + (1 - a)(w - s) == a*s + (1 - a)*w, and leaves s bit-exact when w == s.
    for (std::size_t i = 0; i < s.numel(); ++i) s[i] += (1.0 - a) * (w[i] - s[i]);
  }
  ++state.iter;
}

std::vector<NamedTensor> ema_tracked(const NetworkSpec& net) {
  std::vector<NamedTensor> out;
  for (auto& p : collect_params(net)) out.push_back(NamedTensor{p.name, p.value});
  return out;
}

NetworkSpec materialize_ema(const NetworkSpec& net, const EMAState& state) {
  NetworkSpec copy = net;
  for (auto& p : collect_params(copy)) {
    auto it = state.shadows.find(p.name);
    if (it == state.shadows.end()) {
      throw StateError("materialize_ema: missing shadow for '" + p.name + "'");
    }
    if (it->second.shape() != p.value->shape()) {
      throw StateError("materialize_ema: shape mismatch for '" + p.name + "'");
    }
    *p.value = it->second;
  }
  return copy;
}

}  // namespace qatlab
