// SPDX-License-Identifier: Apache-2.0
#include "qatlab/qc.hpp"

#include <algorithm>
#include <cmath>

#include "qatlab/adam.hpp"
#include "qatlab/error.hpp"

namespace qatlab {

Tensor apply_correction(const Tensor& h, const CorrectionParams& c) {
  if (h.rank() < 2) throw DimensionError("apply_correction expects [N, C, ...], got " + shape_str(h.shape()));
  const std::size_t channels = h.dim(1);
  const bool per_ch = c.granularity == Granularity::PerChannel;
  const std::size_t want = per_ch ? channels : 1;
  if (c.gamma.numel() != want || c.beta.numel() != want) {
    throw DimensionError("correction has " + std::to_string(c.gamma.numel()) + " entries, layer has " +
                         std::to_string(channels) + " channels");
  }
  std::size_t spatial = 1;
  for (std::size_t a = 2; a < h.rank(); ++a) spatial *= h.dim(a);
  Tensor out(h.shape());
  for (std::size_t i = 0; i < h.numel(); ++i) {
    const std::size_t ch = per_ch ? (i / spatial) % channels : 0;
    out[i] = c.gamma[ch] * h[i] + c.beta[ch];
  }
  return out;
}

void QCConfig::validate() const {
  if (!(lr > 0.0)) throw ArgumentError("QC learning rate must be positive");
  if (batch == 0) throw ArgumentError("QC batch size must be positive");
  if (epochs == 0) throw ArgumentError("QC needs at least one epoch");
}

QCResult fit_qc(const NetworkSpec& net, const Dataset& data, const QCConfig& cfg) {
  cfg.validate();
  if (data.calib_idx.empty()) throw ArgumentError("calibration set is empty");
  QCResult res;
  res.net = net;
  NetworkSpec& n = res.net;
  n.set_bn_mode(BNMode::Eval);
  for (auto& l : n.layers) {
    if (l.w_quant) l.correction = CorrectionParams::identity(l.out_channels(), cfg.granularity);
  }
  ForwardOptions q;
  q.mode = QuantMode::Quantized;
  res.calib_loss_before = evaluate(n, data, data.calib_idx, q).loss;

  AdamState adam;
  adam.lr = cfg.lr;
  Rng order(cfg.seed);
  ForwardOptions fopt = q;
  fopt.keep_cache = true;
  if (cfg.use_scale || cfg.use_shift) {
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      for (const Batch& b : make_batches(data, data.calib_idx, cfg.batch, false, &order)) {
        const ForwardResult fwd = forward(n, b.x, fopt);
        const LossResult lr = compute_loss(n.loss, fwd.output, b.y);
        NetworkGrads grads = backward(n, fwd, lr.grad);
        std::vector<ParamRef> trainable;
        for (const ParamRef& p : collect_params(n, &grads)) {
          if ((p.kind == ParamKind::CorrGamma && cfg.use_scale) ||
              (p.kind == ParamKind::CorrBeta && cfg.use_shift)) {
            trainable.push_back(p);
          }
        }
        adam_step(adam, trainable);
      }
    }
  }
  res.calib_loss_after = evaluate(n, data, data.calib_idx, q).loss;
  return res;
}

BNParams absorb_into_bn(const CorrectionParams& c, const BNParams& bn) {
  const std::size_t C = bn.channels();
  const bool per_ch = c.granularity == Granularity::PerChannel;
  if (c.gamma.numel() != (per_ch ? C : 1) || c.beta.numel() != c.gamma.numel()) {
    throw DimensionError("correction does not match BN channel count " + std::to_string(C));
  }
  BNParams out = bn;
  for (std::size_t ch = 0; ch < C; ++ch) {
    const double g = c.gamma[per_ch ? ch : 0];
    const double b = c.beta[per_ch ? ch : 0];
    const double sd = std::sqrt(bn.running_var[ch] + bn.eps);
    out.gain[ch] = bn.gain[ch] * g;
    out.bias[ch] = bn.bias[ch] + bn.gain[ch] * (b + (g - 1.0) * bn.running_mean[ch]) / sd;
  }
  return out;
}

namespace {

// Multiplies output channel c of the weight by f[c]. A weight quantizer moves
// to per-channel scales s_c |f_c| unless it can stay per-tensor (one common
// positive factor and !force_per_channel). Returns the number of elements
// whose integer code is not the sign-adjusted original.
std::size_t scale_output_channels(LayerSpec& l, const std::vector<double>& f, bool force_per_channel) {
  const std::size_t C = l.out_channels();
  const std::size_t inner = l.weight.numel() / C;
  std::size_t recoded = 0;
  IntTensor before;
  if (l.w_quant) before = integer_code(l.weight, *l.w_quant);

  for (std::size_t i = 0; i < l.weight.numel(); ++i) l.weight[i] *= f[i / inner];

  if (!l.w_quant) return 0;
  QuantizerState& q = *l.w_quant;
  const bool uniform_pos =
      f[0] > 0.0 && std::all_of(f.begin(), f.end(), [&](double v) { return v == f[0]; });
  if (!force_per_channel && uniform_pos && q.granularity == Granularity::PerTensor) {
    q.scale[0] *= f[0];
  } else {
    Tensor s(Shape{C});
    for (std::size_t c = 0; c < C; ++c) {
      const double base = q.granularity == Granularity::PerChannel ? q.scale[c] : q.scale[0];
      s[c] = std::max(base * std::abs(f[c]), kMinScale);
    }
    q = QuantizerState::make_per_channel(q.bits, q.is_signed, 0, std::move(s));
  }
  const IntTensor after = integer_code(l.weight, q);
  for (std::size_t i = 0; i < after.data.size(); ++i) {
    const double fc = f[i / inner];
    const std::int32_t expect = fc > 0.0 ? before.data[i] : (fc < 0.0 ? -before.data[i] : 0);
    if (after.data[i] != expect) ++recoded;
  }
  return recoded;
}

std::size_t absorb_layer_correction(LayerSpec& l) {
  if (!l.correction) return 0;
  const CorrectionParams c = *l.correction;
  l.correction.reset();
  if (l.bn) {
    if (l.bn->mode != BNMode::Eval) throw StateError("correction absorption needs BN in eval mode");
    l.bn = absorb_into_bn(c, *l.bn);
    return 0;
  }
  const std::size_t C = l.out_channels();
  const bool per_ch = c.granularity == Granularity::PerChannel;
  std::vector<double> f(C);
  for (std::size_t ch = 0; ch < C; ++ch) {
    f[ch] = c.gamma[per_ch ? ch : 0];
    l.bias[ch] = f[ch] * l.bias[ch] + c.beta[per_ch ? ch : 0];
  }
  return scale_output_channels(l, f, false);
}

}  // namespace

FoldResult fold_bn_into_quant_scale(const LayerSpec& layer) {
  if (!layer.bn) throw StateError("layer has no batch norm to fold");
  if (layer.bn->mode != BNMode::Eval) throw StateError("cannot fold batch norm in train mode");
  FoldResult res;
  res.layer = layer;
  LayerSpec& l = res.layer;
  res.recoded += absorb_layer_correction(l);
  const BNParams bn = *l.bn;
  const std::size_t C = l.out_channels();
  std::vector<double> f(C);
  for (std::size_t c = 0; c < C; ++c) {
    f[c] = bn.gain[c] / std::sqrt(bn.running_var[c] + bn.eps);
    l.bias[c] = f[c] * (l.bias[c] - bn.running_mean[c]) + bn.bias[c];
  }
  res.recoded += scale_output_channels(l, f, true);
  l.bn.reset();
  return res;
}

NetworkSpec absorb_corrections(const NetworkSpec& net) {
  NetworkSpec out = net;
  for (auto& l : out.layers) absorb_layer_correction(l);
  return out;
}

NetworkFoldResult fold_network(const NetworkSpec& net) {
  NetworkFoldResult res;
  res.net = net;
  for (auto& l : res.net.layers) {
    res.recoded += absorb_layer_correction(l);
    if (l.bn) {
      FoldResult f = fold_bn_into_quant_scale(l);
      res.recoded += f.recoded;
      l = std::move(f.layer);
    }
  }
  return res;
}

std::string to_string(QCVariant v) {
  switch (v) {
    case QCVariant::ScaleOnly: return "scale";
    case QCVariant::ShiftOnly: return "shift";
    case QCVariant::Both: return "both";
  }
  return "?";
}

const AblationCell& AblationTable::cell(Granularity g, QCVariant v) const {
  for (const auto& c : cells)
    if (c.granularity == g && c.variant == v) return c;
  throw ArgumentError("ablation table has no cell " + to_string(g) + "/" + to_string(v));
}

AblationTable qc_ablation(const NetworkSpec& net, const Dataset& data, const QCConfig& base,
                          const AblationGrid& grid) {
  if (data.eval_idx.empty()) throw ArgumentError("ablation needs an eval split");
  ForwardOptions q;
  q.mode = QuantMode::Quantized;
  AblationTable t;
  t.baseline = evaluate(net, data, data.eval_idx, q);
  for (Granularity g : grid.granularities) {
    for (QCVariant v : grid.variants) {
      AblationCell c;
      c.granularity = g;
      c.variant = v;
      c.use_scale = !grid.identity_only && v != QCVariant::ShiftOnly;
      c.use_shift = !grid.identity_only && v != QCVariant::ScaleOnly;
      QCConfig cfg = base;
      cfg.granularity = g;
      cfg.use_scale = c.use_scale;
      cfg.use_shift = c.use_shift;
      const QCResult r = fit_qc(net, data, cfg);
      c.calib_loss_before = r.calib_loss_before;
      c.calib_loss_after = r.calib_loss_after;
      c.eval = evaluate(r.net, data, data.eval_idx, q);
      t.cells.push_back(c);
    }
  }
  return t;
}

}  // namespace qatlab
