// SPDX-License-Identifier: Apache-2.0
#include "qatlab/models.hpp"

#include <algorithm>
#include <cmath>

#include "qatlab/error.hpp"

namespace qatlab {

namespace {

Tensor he_normal(Rng& rng, Shape shape, std::size_t fan_in) {
  Tensor w(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : w.vec()) v = sd * rng.normal();
  return w;
}

LayerSpec dense(Rng& rng, std::size_t in, std::size_t out, bool bn, Nonlinearity act) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.weight = he_normal(rng, Shape{out, in}, in);
  l.bias = Tensor(Shape{out});
  if (bn) l.bn = BNParams::identity(out);
  l.nonlinearity = act;
  return l;
}

LayerSpec conv(Rng& rng, LayerKind kind, std::size_t in, std::size_t out, std::size_t k, Nonlinearity act) {
  LayerSpec l;
  l.kind = kind;
  const std::size_t cin = kind == LayerKind::DepthwiseConv2d ? 1 : in;
  l.weight = he_normal(rng, Shape{out, cin, k, k}, cin * k * k);
  l.bias = Tensor(Shape{out});
  l.padding = k / 2;
  l.bn = BNParams::identity(out);
  l.nonlinearity = act;
  return l;
}

}  // namespace

NetworkSpec make_mlp(std::size_t in_dim, const std::vector<std::size_t>& hidden, std::size_t out_dim,
                     LossKind loss, Rng& rng, Nonlinearity act, bool batch_norm) {
  if (in_dim == 0 || out_dim == 0) throw ArgumentError("MLP dimensions must be positive");
  NetworkSpec net;
  net.input_shape = {in_dim};
  net.loss = loss;
  std::size_t in = in_dim;
  for (std::size_t h : hidden) {
    net.layers.push_back(dense(rng, in, h, batch_norm, act));
    in = h;
  }
  net.layers.push_back(dense(rng, in, out_dim, false, Nonlinearity::None));
  net.validate();
  return net;
}

NetworkSpec make_cnn(const Shape& input_shape, std::size_t classes, Rng& rng, std::size_t width,
                     Nonlinearity act) {
  if (input_shape.size() != 3) throw DimensionError("CNN input must be [C, H, W]");
  NetworkSpec net;
  net.input_shape = input_shape;
  net.loss = LossKind::SoftmaxCrossEntropy;
  net.layers.push_back(conv(rng, LayerKind::Conv2d, input_shape[0], width, 3, act));
  net.layers.push_back(conv(rng, LayerKind::DepthwiseConv2d, width, width, 3, act));
  net.layers.push_back(conv(rng, LayerKind::Conv2d, width, 2 * width, 1, act));
  net.layers.back().pool = Pool::GlobalAvg;
  net.layers.push_back(dense(rng, 2 * width, classes, false, Nonlinearity::None));
  net.validate();
  return net;
}

void attach_quantizers(NetworkSpec& net, const QuantPlan& plan, const Tensor& calib_x) {
  if (plan.bits_w < 1 || plan.bits_a < 1 || plan.first_last_bits < 0) {
    throw ArgumentError("quantizer bit-widths must be >= 1");
  }
  net.validate();
  NetworkSpec probe = net;
  strip_quantizers(probe);
  probe.set_bn_mode(BNMode::Eval);
  ForwardOptions opt;
  opt.mode = QuantMode::Latent;
  opt.keep_cache = true;
  const ForwardResult fwd = forward(probe, calib_x, opt);

  const std::size_t last = net.layers.size() - 1;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    LayerSpec& l = net.layers[i];
    const bool edge = plan.first_last_bits > 0 && (i == 0 || i == last);
    const int bw = edge ? plan.first_last_bits : plan.bits_w;
    const int ba = edge ? plan.first_last_bits : plan.bits_a;

    QuantizerState wt = plan.granularity == Granularity::PerChannel
                            ? QuantizerState::make_per_channel(bw, true, 0, Tensor(Shape{l.out_channels()}, 1.0))
                            : QuantizerState::make(bw, true);
    l.w_quant = init_scale(l.weight, wt, ScaleInit::Weight).state;

    const Tensor& a = fwd.cache[i].input;
    const bool nonneg = std::all_of(a.vec().begin(), a.vec().end(), [](double v) { return v >= 0.0; });
    l.a_quant = init_scale(a, QuantizerState::make(ba, !nonneg), ScaleInit::Activation).state;
  }
}

void strip_quantizers(NetworkSpec& net) {
  for (auto& l : net.layers) {
    l.w_quant.reset();
    l.a_quant.reset();
  }
}

}  // namespace qatlab
