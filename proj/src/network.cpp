// SPDX-License-Identifier: Apache-2.0
#include "qatlab/network.hpp"

#include <algorithm>
#include <cmath>

#include "qatlab/error.hpp"
#include "qatlab/numeric.hpp"

namespace qatlab {

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::DepthwiseConv2d: return "depthwise_conv2d";
  }
  return "?";
}

std::string to_string(Nonlinearity n) {
  switch (n) {
    case Nonlinearity::None: return "none";
    case Nonlinearity::Relu: return "relu";
    case Nonlinearity::Silu: return "silu";
  }
  return "?";
}

std::string to_string(Pool p) { return p == Pool::None ? "none" : "global_avg"; }
std::string to_string(BNMode m) { return m == BNMode::Train ? "train" : "eval"; }
std::string to_string(LossKind l) {
  return l == LossKind::Mse ? "mse" : "softmax_cross_entropy";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "dense") return LayerKind::Dense;
  if (s == "conv2d") return LayerKind::Conv2d;
  if (s == "depthwise_conv2d") return LayerKind::DepthwiseConv2d;
  throw ArgumentError("unknown layer kind '" + s + "'");
}

Nonlinearity nonlinearity_from_string(const std::string& s) {
  if (s == "none") return Nonlinearity::None;
  if (s == "relu") return Nonlinearity::Relu;
  if (s == "silu") return Nonlinearity::Silu;
  throw ArgumentError("unknown nonlinearity '" + s + "'");
}

Pool pool_from_string(const std::string& s) {
  if (s == "none") return Pool::None;
  if (s == "global_avg") return Pool::GlobalAvg;
  throw ArgumentError("unknown pooling '" + s + "'");
}

BNMode bn_mode_from_string(const std::string& s) {
  if (s == "train") return BNMode::Train;
  if (s == "eval") return BNMode::Eval;
  throw ArgumentError("unknown BN mode '" + s + "'");
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "mse") return LossKind::Mse;
  if (s == "softmax_cross_entropy") return LossKind::SoftmaxCrossEntropy;
  throw ArgumentError("unknown loss '" + s + "'");
}

BNParams BNParams::identity(std::size_t channels) {
  BNParams bn;
  bn.gain = Tensor(Shape{channels}, 1.0);
  bn.bias = Tensor(Shape{channels}, 0.0);
  bn.running_mean = Tensor(Shape{channels}, 0.0);
  bn.running_var = Tensor(Shape{channels}, 1.0);
  return bn;
}

void BNParams::validate() const {
  const std::size_t c = gain.numel();
  if (bias.numel() != c || running_mean.numel() != c || running_var.numel() != c) {
    throw DimensionError("BN parameter lengths disagree");
  }
  for (double v : running_var.vec()) {
    if (v < 0.0) throw ArgumentError("BN running variance must be non-negative");
  }
}

CorrectionParams CorrectionParams::identity(std::size_t channels, Granularity g) {
  const std::size_t n = g == Granularity::PerChannel ? channels : 1;
  return CorrectionParams{Tensor(Shape{n}, 1.0), Tensor(Shape{n}, 0.0), g};
}

bool CorrectionParams::is_identity() const {
  return std::all_of(gamma.vec().begin(), gamma.vec().end(), [](double v) { return v == 1.0; }) &&
         std::all_of(beta.vec().begin(), beta.vec().end(), [](double v) { return v == 0.0; });
}

std::size_t LayerSpec::stage_count() const {
  std::size_t n = 1;  // linear op incl. bias
  if (w_quant) ++n;
  if (a_quant) ++n;
  if (correction) ++n;
  if (bn) ++n;
  if (nonlinearity != Nonlinearity::None) ++n;
  if (pool != Pool::None) ++n;
  return n;
}

namespace {

std::size_t groups_of(const LayerSpec& l) {
  return l.kind == LayerKind::DepthwiseConv2d ? l.weight.dim(0) : 1;
}

Shape layer_output_shape(const LayerSpec& l, const Shape& in) {
  Shape out;
  if (l.kind == LayerKind::Dense) {
    if (l.weight.rank() != 2) throw DimensionError("dense weight must be [out, in]");
    if (shape_numel(in) != l.weight.dim(1)) {
      throw DimensionError("dense layer expects " + std::to_string(l.weight.dim(1)) +
                           " inputs, got shape " + shape_str(in));
    }
    out = Shape{l.weight.dim(0)};
  } else {
    if (in.size() != 3) throw DimensionError("conv layer expects [C, H, W] input");
    if (l.weight.rank() != 4 || l.weight.dim(2) != l.weight.dim(3)) {
      throw DimensionError("conv weight must be [out, in/groups, k, k]");
    }
    const std::size_t k = l.weight.dim(2);
    if (l.kind == LayerKind::DepthwiseConv2d) {
      if (l.weight.dim(1) != 1 || l.weight.dim(0) != in[0]) {
        throw DimensionError("depthwise weight must be [C, 1, k, k] with C = input channels");
      }
    } else if (l.weight.dim(1) != in[0]) {
      throw DimensionError("conv weight input channels " + std::to_string(l.weight.dim(1)) +
                           " != input channels " + std::to_string(in[0]));
    }
    if (l.stride == 0) throw ArgumentError("conv stride must be positive");
    if (in[1] + 2 * l.padding < k || in[2] + 2 * l.padding < k) {
      throw DimensionError("conv kernel larger than padded input");
    }
    const std::size_t h = (in[1] + 2 * l.padding - k) / l.stride + 1;
    const std::size_t w = (in[2] + 2 * l.padding - k) / l.stride + 1;
    out = Shape{l.weight.dim(0), h, w};
  }
  if (l.bias.numel() != l.weight.dim(0)) throw DimensionError("bias length != output channels");
  if (l.bn && l.bn->channels() != l.weight.dim(0)) {
    throw DimensionError("BN channels != output channels");
  }
  if (l.correction) {
    const std::size_t want = l.correction->granularity == Granularity::PerChannel ? out[0] : 1;
    if (l.correction->gamma.numel() != want || l.correction->beta.numel() != want) {
      throw DimensionError("correction parameter length mismatch");
    }
  }
  if (l.w_quant) {
    l.w_quant->validate_for(l.weight.shape());
    if (l.w_quant->granularity == Granularity::PerChannel && l.w_quant->axis != 0) {
      throw ArgumentError("per-channel weight quantizer must use the output-channel axis");
    }
  }
  if (l.a_quant) {
    l.a_quant->validate();
    if (l.a_quant->granularity != Granularity::PerTensor) {
      throw ArgumentError("activation quantizers are per-tensor");
    }
  }
  if (l.pool == Pool::GlobalAvg) {
    if (out.size() != 3) throw DimensionError("global pooling needs a [C, H, W] output");
    out = Shape{out[0]};
  }
  return out;
}

// Activation tensors are [N, C, ...]; returns (channels, spatial) for per-channel stats.
std::pair<std::size_t, std::size_t> act_layout(const Tensor& t) {
  const std::size_t c = t.dim(1);
  std::size_t spatial = 1;
  for (std::size_t a = 2; a < t.rank(); ++a) spatial *= t.dim(a);
  return {c, spatial};
}

Tensor linear_forward(const LayerSpec& l, const Tensor& in, const Tensor& w) {
  const std::size_t n = in.dim(0);
  if (l.kind == LayerKind::Dense) {
    const Tensor flat = in.reshaped(Shape{n, in.numel() / n});
    Tensor out = matmul_nt(flat, w);
    const std::size_t o = w.dim(0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < o; ++c) out[r * o + c] += l.bias[c];
    return out;
  }
  const std::size_t ci = in.dim(1), h = in.dim(2), wd = in.dim(3);
  const std::size_t co = w.dim(0), cig = w.dim(1), k = w.dim(2);
  const std::size_t groups = groups_of(l);
  const std::size_t cog = co / groups;
  const std::size_t s = l.stride, p = l.padding;
  const std::size_t ho = (h + 2 * p - k) / s + 1, wo = (wd + 2 * p - k) / s + 1;
  Tensor out(Shape{n, co, ho, wo});
  const double* pi = in.data().data();
  const double* pw = w.data().data();
  double* po = out.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      const std::size_t g = oc / cog;
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t x = 0; x < wo; ++x) {
          double acc = 0.0;
          for (std::size_t icg = 0; icg < cig; ++icg) {
            const std::size_t ic = g * cig + icg;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * s + ky) -
                                        static_cast<std::ptrdiff_t>(p);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * s + kx) -
                                          static_cast<std::ptrdiff_t>(p);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                acc += pw[((oc * cig + icg) * k + ky) * k + kx] *
                       pi[((b * ci + ic) * h + static_cast<std::size_t>(iy)) * wd +
                          static_cast<std::size_t>(ix)];
              }
            }
          }
          po[((b * co + oc) * ho + y) * wo + x] = acc + l.bias[oc];
        }
      }
    }
  }
  return out;
}

// Returns dIn and accumulates dW, db.
Tensor linear_backward(const LayerSpec& l, const Tensor& in, const Tensor& w, const Tensor& dout,
                       Tensor& dw, Tensor& db) {
  const std::size_t n = in.dim(0);
  if (l.kind == LayerKind::Dense) {
    const std::size_t o = w.dim(0);
    const Tensor flat = in.reshaped(Shape{n, in.numel() / n});
    dw = matmul_tn(dout, flat);
    db = Tensor(Shape{o});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < o; ++c) db[c] += dout[r * o + c];
    return matmul(dout, w).reshaped(in.shape());
  }
  const std::size_t ci = in.dim(1), h = in.dim(2), wd = in.dim(3);
  const std::size_t co = w.dim(0), cig = w.dim(1), k = w.dim(2);
  const std::size_t groups = groups_of(l);
  const std::size_t cog = co / groups;
  const std::size_t s = l.stride, p = l.padding;
  const std::size_t ho = dout.dim(2), wo = dout.dim(3);
  Tensor din(in.shape());
  dw = Tensor(w.shape());
  db = Tensor(Shape{co});
  const double* pi = in.data().data();
  const double* pw = w.data().data();
  const double* pd = dout.data().data();
  double* pdi = din.data().data();
  double* pdw = dw.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      const std::size_t g = oc / cog;
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t x = 0; x < wo; ++x) {
          const double go = pd[((b * co + oc) * ho + y) * wo + x];
          db[oc] += go;
          if (go == 0.0) continue;
          for (std::size_t icg = 0; icg < cig; ++icg) {
            const std::size_t ic = g * cig + icg;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * s + ky) -
                                        static_cast<std::ptrdiff_t>(p);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * s + kx) -
                                          static_cast<std::ptrdiff_t>(p);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                const std::size_t wi = ((oc * cig + icg) * k + ky) * k + kx;
                const std::size_t ii = ((b * ci + ic) * h + static_cast<std::size_t>(iy)) * wd +
                                       static_cast<std::size_t>(ix);
                pdw[wi] += go * pi[ii];
                pdi[ii] += go * pw[wi];
              }
            }
          }
        }
      }
    }
  }
  return din;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double apply_nonlinearity(Nonlinearity f, double x) {
  switch (f) {
    case Nonlinearity::None: return x;
    case Nonlinearity::Relu: return x > 0.0 ? x : 0.0;
    case Nonlinearity::Silu: return x * sigmoid(x);
  }
  return x;
}

double nonlinearity_grad(Nonlinearity f, double x) {
  switch (f) {
    case Nonlinearity::None: return 1.0;
    case Nonlinearity::Relu: return x > 0.0 ? 1.0 : 0.0;
    case Nonlinearity::Silu: {
      const double sg = sigmoid(x);
      return sg * (1.0 + x * (1.0 - sg));
    }
  }
  return 1.0;
}

Tensor maybe_quantize(const Tensor& t, const std::optional<QuantizerState>& q,
                      const ForwardOptions& opt, bool soft_applies) {
  if (!q || opt.mode == QuantMode::Latent) return t;
  if (opt.mode == QuantMode::SoftRound && soft_applies) {
    return soft_round(t, *q, SoftRoundConfig{opt.soft_k});
  }
  return quantize(t, *q);
}

}  // namespace

std::vector<Shape> NetworkSpec::layer_shapes() const {
  std::vector<Shape> shapes{input_shape};
  for (const auto& l : layers) shapes.push_back(layer_output_shape(l, shapes.back()));
  return shapes;
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw ArgumentError("network has no layers");
  for (const auto& l : layers)
    if (l.bn) l.bn->validate();
  (void)layer_shapes();
}

void NetworkSpec::set_bn_mode(BNMode mode) {
  for (auto& l : layers)
    if (l.bn) l.bn->mode = mode;
}

ForwardResult forward(const NetworkSpec& net, const Tensor& x, const ForwardOptions& opt) {
  (void)net.layer_shapes();
  if (x.rank() != net.input_shape.size() + 1 ||
      Shape(x.shape().begin() + 1, x.shape().end()) != net.input_shape) {
    throw DimensionError("forward: input shape " + shape_str(x.shape()) +
                         " does not match network input " + shape_str(net.input_shape));
  }
  if (opt.mode == QuantMode::SoftRound) SoftRoundConfig{opt.soft_k}.validate();
  ForwardResult res;
  res.mode = opt.mode;
  res.has_cache = opt.keep_cache;
  Tensor cur = x;
  for (const auto& l : net.layers) {
    LayerCache c;
    Tensor aq = maybe_quantize(cur, l.a_quant, opt, opt.soft_activations);
    Tensor wq = maybe_quantize(l.weight, l.w_quant, opt, opt.soft_weights);
    Tensor h = linear_forward(l, aq, wq);
    const auto [channels, spatial] = act_layout(h);
    const std::size_t n = h.dim(0);

    Tensor hc = h;
    if (l.correction) {
      const auto& cp = *l.correction;
      const bool per_ch = cp.granularity == Granularity::PerChannel;
      for (std::size_t i = 0; i < hc.numel(); ++i) {
        const std::size_t ch = per_ch ? (i / spatial) % channels : 0;
        hc[i] = cp.gamma[ch] * h[i] + cp.beta[ch];
      }
    }

    Tensor y = hc;
    Tensor xhat;
    if (l.bn) {
      const auto& bn = *l.bn;
      c.mean.assign(channels, 0.0);
      c.inv_std.assign(channels, 0.0);
      const double count = static_cast<double>(n * spatial);
      if (bn.mode == BNMode::Train) {
        c.batch_stats = true;
        c.batch_var.assign(channels, 0.0);
        for (std::size_t i = 0; i < hc.numel(); ++i) c.mean[(i / spatial) % channels] += hc[i];
        for (auto& m : c.mean) m /= count;
        for (std::size_t i = 0; i < hc.numel(); ++i) {
          const double d = hc[i] - c.mean[(i / spatial) % channels];
          c.batch_var[(i / spatial) % channels] += d * d;
        }
        for (std::size_t ch = 0; ch < channels; ++ch) {
          c.batch_var[ch] /= count;
          c.inv_std[ch] = 1.0 / std::sqrt(c.batch_var[ch] + bn.eps);
        }
      } else {
        for (std::size_t ch = 0; ch < channels; ++ch) {
          c.mean[ch] = bn.running_mean[ch];
          c.inv_std[ch] = 1.0 / std::sqrt(bn.running_var[ch] + bn.eps);
        }
      }
      xhat = Tensor(hc.shape());
      for (std::size_t i = 0; i < hc.numel(); ++i) {
        const std::size_t ch = (i / spatial) % channels;
        xhat[i] = (hc[i] - c.mean[ch]) * c.inv_std[ch];
        y[i] = bn.gain[ch] * xhat[i] + bn.bias[ch];
      }
    }

    Tensor act = y;
    if (l.nonlinearity != Nonlinearity::None)
      for (auto& v : act.vec()) v = apply_nonlinearity(l.nonlinearity, v);

    Tensor out;
    if (l.pool == Pool::GlobalAvg) {
      out = Tensor(Shape{n, channels});
      for (std::size_t i = 0; i < act.numel(); ++i) out[i / spatial] += act[i];
      for (auto& v : out.vec()) v /= static_cast<double>(spatial);
    } else {
      out = act;
    }

    if (opt.keep_cache) {
      c.input = std::move(cur);
      c.input_q = std::move(aq);
      c.weight_q = std::move(wq);
      c.pre = std::move(h);
      c.corrected = std::move(hc);
      c.xhat = std::move(xhat);
      c.bn_out = std::move(y);
      c.act_out = std::move(act);
      res.cache.push_back(std::move(c));
    } else if (l.bn && l.bn->mode == BNMode::Train) {
      // Keep batch statistics so running averages can still be updated.
      LayerCache stats;
      stats.batch_stats = true;
      stats.mean = std::move(c.mean);
      stats.batch_var = std::move(c.batch_var);
      res.cache.push_back(std::move(stats));
    } else {
      res.cache.emplace_back();
    }
    cur = std::move(out);
  }
  res.output = std::move(cur);
  return res;
}

NetworkGrads zero_grads(const NetworkSpec& net) {
  NetworkGrads g;
  for (const auto& l : net.layers) {
    LayerGrads lg;
    lg.weight = Tensor(l.weight.shape());
    lg.bias = Tensor(l.bias.shape());
    if (l.w_quant) lg.w_scale = Tensor(l.w_quant->scale.shape());
    if (l.a_quant) lg.a_scale = Tensor(l.a_quant->scale.shape());
    if (l.bn) {
      lg.bn_gain = Tensor(l.bn->gain.shape());
      lg.bn_bias = Tensor(l.bn->bias.shape());
    }
    if (l.correction) {
      lg.gamma = Tensor(l.correction->gamma.shape());
      lg.beta = Tensor(l.correction->beta.shape());
    }
    g.layers.push_back(std::move(lg));
  }
  return g;
}

NetworkGrads backward(const NetworkSpec& net, const ForwardResult& fwd, const Tensor& loss_grad) {
  if (!fwd.has_cache || fwd.cache.size() != net.layers.size()) {
    throw StateError("backward: forward cache missing (run forward with keep_cache)");
  }
  if (fwd.mode == QuantMode::SoftRound) {
    throw StateError("backward: soft-round forward is a diagnostic and has no gradient");
  }
  check_same_shape(fwd.output, loss_grad, "backward");
  const bool quantized = fwd.mode == QuantMode::Quantized;
  NetworkGrads grads = zero_grads(net);
  Tensor dout = loss_grad;
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const auto& l = net.layers[li];
    const auto& c = fwd.cache[li];
    auto& g = grads.layers[li];
    const auto [channels, spatial] = act_layout(c.pre);
    const std::size_t n = c.pre.dim(0);

    Tensor dact;
    if (l.pool == Pool::GlobalAvg) {
      dact = Tensor(c.act_out.shape());
      const double inv = 1.0 / static_cast<double>(spatial);
      for (std::size_t i = 0; i < dact.numel(); ++i) dact[i] = dout[i / spatial] * inv;
    } else {
      dact = std::move(dout);
    }

    Tensor dy = std::move(dact);
    if (l.nonlinearity != Nonlinearity::None)
      for (std::size_t i = 0; i < dy.numel(); ++i)
        dy[i] *= nonlinearity_grad(l.nonlinearity, c.bn_out[i]);

    Tensor dhc;
    if (l.bn) {
      const auto& bn = *l.bn;
      Tensor dxhat(dy.shape());
      std::vector<double> sum_dx(channels, 0.0), sum_dx_xhat(channels, 0.0);
      for (std::size_t i = 0; i < dy.numel(); ++i) {
        const std::size_t ch = (i / spatial) % channels;
        g.bn_gain[ch] += dy[i] * c.xhat[i];
        g.bn_bias[ch] += dy[i];
        dxhat[i] = dy[i] * bn.gain[ch];
        sum_dx[ch] += dxhat[i];
        sum_dx_xhat[ch] += dxhat[i] * c.xhat[i];
      }
      dhc = Tensor(dy.shape());
      if (c.batch_stats) {
        const double m = static_cast<double>(n * spatial);
        for (std::size_t i = 0; i < dy.numel(); ++i) {
          const std::size_t ch = (i / spatial) % channels;
          dhc[i] = c.inv_std[ch] / m * (m * dxhat[i] - sum_dx[ch] - c.xhat[i] * sum_dx_xhat[ch]);
        }
      } else {
        for (std::size_t i = 0; i < dy.numel(); ++i)
          dhc[i] = dxhat[i] * c.inv_std[(i / spatial) % channels];
      }
    } else {
      dhc = std::move(dy);
    }

    Tensor dh;
    if (l.correction) {
      const auto& cp = *l.correction;
      const bool per_ch = cp.granularity == Granularity::PerChannel;
      dh = Tensor(dhc.shape());
      for (std::size_t i = 0; i < dhc.numel(); ++i) {
        const std::size_t ch = per_ch ? (i / spatial) % channels : 0;
        g.gamma[ch] += dhc[i] * c.pre[i];
        g.beta[ch] += dhc[i];
        dh[i] = cp.gamma[ch] * dhc[i];
      }
    } else {
      dh = std::move(dhc);
    }

    Tensor dwq, db;
    Tensor daq = linear_backward(l, c.input_q, c.weight_q, dh, dwq, db);
    g.bias = std::move(db);
    if (l.w_quant && quantized) {
      auto qg = quantize_backward(l.weight, *l.w_quant, dwq);
      g.weight = std::move(qg.g_w);
      g.w_scale = std::move(qg.g_s);
    } else {
      g.weight = std::move(dwq);
    }
    if (l.a_quant && quantized) {
      auto qg = quantize_backward(c.input, *l.a_quant, daq, c.input.dim(0));
      dout = std::move(qg.g_w);
      g.a_scale = std::move(qg.g_s);
    } else {
      dout = std::move(daq);
    }
  }
  grads.input = std::move(dout);
  return grads;
}

void update_bn_running_stats(NetworkSpec& net, const ForwardResult& fwd) {
  if (fwd.cache.size() != net.layers.size()) throw StateError("BN update: cache size mismatch");
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto& l = net.layers[li];
    const auto& c = fwd.cache[li];
    if (!l.bn || !c.batch_stats) continue;
    auto& bn = *l.bn;
    // Running variance tracks the biased batch variance used for normalization.
    for (std::size_t ch = 0; ch < bn.channels(); ++ch) {
      bn.running_mean[ch] = (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * c.mean[ch];
      bn.running_var[ch] = (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * c.batch_var[ch];
    }
  }
}

LossResult compute_loss(LossKind kind, const Tensor& output, const Tensor& targets) {
  LossResult r;
  r.grad = Tensor(output.shape());
  if (kind == LossKind::Mse) {
    check_same_shape(output, targets, "mse loss");
    const double inv = 1.0 / static_cast<double>(output.numel());
    for (std::size_t i = 0; i < output.numel(); ++i) {
      const double d = output[i] - targets[i];
      r.loss += d * d;
      r.grad[i] = 2.0 * d * inv;
    }
    r.loss *= inv;
    return r;
  }
  if (output.rank() != 2 || targets.numel() != output.dim(0)) {
    throw DimensionError("cross-entropy expects [N, classes] logits and [N] labels");
  }
  const std::size_t n = output.dim(0), k = output.dim(1);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t row = 0; row < n; ++row) {
    const auto label = static_cast<std::size_t>(targets[row]);
    if (label >= k) throw ArgumentError("class label out of range");
    double mx = output[row * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, output[row * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(output[row * k + j] - mx);
    const double log_z = std::log(z) + mx;
    r.loss += log_z - output[row * k + label];
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(output[row * k + j] - log_z);
      r.grad[row * k + j] = (p - (j == label ? 1.0 : 0.0)) * inv_n;
    }
  }
  r.loss *= inv_n;
  return r;
}

double accuracy(const Tensor& logits, const Tensor& labels) {
  if (logits.rank() != 2 || labels.numel() != logits.dim(0)) {
    throw DimensionError("accuracy expects [N, classes] logits and [N] labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (n == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[r * k + j] > logits[r * k + best]) best = j;
    if (best == static_cast<std::size_t>(labels[r])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

double dampening_penalty(const NetworkSpec& net, double lambda, NetworkGrads* grads) {
  double total = 0.0;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const auto& l = net.layers[li];
    if (!l.w_quant) continue;
    const auto& q = *l.w_quant;
    const auto layout = ChannelLayout::of(q, l.weight.shape());
    const Tensor wq = quantize(l.weight, q);
    for (std::size_t i = 0; i < l.weight.numel(); ++i) {
      const double r = round_half_away(l.weight[i] / q.scale[layout.channel(i)]);
      if (r < static_cast<double>(q.lo) || r > static_cast<double>(q.hi)) continue;
      const double d = wq[i] - l.weight[i];
      total += d * d;
      if (grads) grads->layers[li].weight[i] += -2.0 * lambda * d;
    }
  }
  return lambda * total;
}

bool is_scale(ParamKind k) { return k == ParamKind::WeightScale || k == ParamKind::ActScale; }

namespace {

template <typename Net, typename Fn>
void visit_params(Net& net, Fn&& fn) {
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto& l = net.layers[li];
    const std::string p = "layers." + std::to_string(li) + ".";
    fn(li, p + "weight", ParamKind::Weight, l.weight);
    fn(li, p + "bias", ParamKind::Bias, l.bias);
    if (l.w_quant) fn(li, p + "w_scale", ParamKind::WeightScale, l.w_quant->scale);
    if (l.a_quant) fn(li, p + "a_scale", ParamKind::ActScale, l.a_quant->scale);
    if (l.bn) {
      fn(li, p + "bn.gain", ParamKind::BNGain, l.bn->gain);
      fn(li, p + "bn.bias", ParamKind::BNBias, l.bn->bias);
    }
    if (l.correction) {
      fn(li, p + "qc.gamma", ParamKind::CorrGamma, l.correction->gamma);
      fn(li, p + "qc.beta", ParamKind::CorrBeta, l.correction->beta);
    }
  }
}

Tensor* grad_slot(LayerGrads& g, ParamKind k) {
  switch (k) {
    case ParamKind::Weight: return &g.weight;
    case ParamKind::Bias: return &g.bias;
    case ParamKind::WeightScale: return &g.w_scale;
    case ParamKind::ActScale: return &g.a_scale;
    case ParamKind::BNGain: return &g.bn_gain;
    case ParamKind::BNBias: return &g.bn_bias;
    case ParamKind::CorrGamma: return &g.gamma;
    case ParamKind::CorrBeta: return &g.beta;
  }
  return nullptr;
}

}  // namespace

std::vector<ParamRef> collect_params(NetworkSpec& net, NetworkGrads* grads) {
  std::vector<ParamRef> out;
  visit_params(net, [&](std::size_t li, std::string name, ParamKind kind, Tensor& t) {
    Tensor* g = grads ? grad_slot(grads->layers.at(li), kind) : nullptr;
    out.push_back(ParamRef{std::move(name), kind, &t, g});
  });
  return out;
}

std::vector<ConstParamRef> collect_params(const NetworkSpec& net) {
  std::vector<ConstParamRef> out;
  visit_params(net, [&](std::size_t, std::string name, ParamKind kind, const Tensor& t) {
    out.push_back(ConstParamRef{std::move(name), kind, &t});
  });
  return out;
}

IntTensor weight_codes(const NetworkSpec& net) {
  IntTensor all;
  for (const auto& l : net.layers) {
    if (!l.w_quant) continue;
    auto codes = integer_code(l.weight, *l.w_quant);
    all.data.insert(all.data.end(), codes.data.begin(), codes.data.end());
  }
  all.shape = Shape{all.data.size()};
  return all;
}

std::vector<double> all_scales(const NetworkSpec& net) {
  std::vector<double> s;
  for (const auto& l : net.layers) {
    if (l.w_quant) s.insert(s.end(), l.w_quant->scale.vec().begin(), l.w_quant->scale.vec().end());
    if (l.a_quant) s.insert(s.end(), l.a_quant->scale.vec().begin(), l.a_quant->scale.vec().end());
  }
  return s;
}

}  // namespace qatlab
