// SPDX-License-Identifier: Apache-2.0
#include "qatlab/adam.hpp"

#include <cmath>

#include "qatlab/error.hpp"

namespace qatlab {

void adam_step(AdamState& state, std::span<const ParamRef> params) {
  for (const auto& p : params) {
    if (!p.grad) continue;
    check_same_shape(*p.value, *p.grad, p.name.c_str());
    if (!p.grad->all_finite()) {
      throw EvaluationError("adam_step: non-finite gradient for '" + p.name + "' at step " +
                            std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& p : params) {
    if (!p.grad) continue;
    auto [mit, m_new] = state.m.try_emplace(p.name, p.value->shape());
    auto [vit, v_new] = state.v.try_emplace(p.name, p.value->shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    if (m.shape() != p.value->shape() || v.shape() != p.value->shape()) {
      throw StateError("adam_step: moment shape mismatch for '" + p.name + "'");
    }
    Tensor& w = *p.value;
    const Tensor& g = *p.grad;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    if (is_scale(p.kind)) clamp_scale(w);
  }
}

}  // namespace qatlab
