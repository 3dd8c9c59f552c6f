// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "qatlab/adam.hpp"
#include "qatlab/error.hpp"
#include "qatlab/models.hpp"
#include "qatlab/network.hpp"
#include "qatlab/oscillation.hpp"
#include "qatlab/train.hpp"

using namespace qatlab;
using qatlab::testing::randn;

namespace {

NetworkSpec single(LayerSpec l, Shape in) {
  NetworkSpec n;
  n.input_shape = std::move(in);
  n.loss = LossKind::Mse;
  n.layers.push_back(std::move(l));
  return n;
}

void no_grad_scaling(NetworkSpec& net) {
  for (auto& l : net.layers) {
    if (l.w_quant) l.w_quant->lsq_grad_scale = false;
    if (l.a_quant) l.a_quant->lsq_grad_scale = false;
  }
}

// Random BN statistics and QC parameters so every branch of backward is live.
void perturb_aux(NetworkSpec& net, Rng& rng) {
  for (auto& l : net.layers) {
    if (l.bn) {
      for (auto& v : l.bn->gain.vec()) v = 0.5 + rng.uniform01();
      for (auto& v : l.bn->bias.vec()) v = 0.2 * rng.normal();
      for (auto& v : l.bn->running_mean.vec()) v = 0.3 * rng.normal();
      for (auto& v : l.bn->running_var.vec()) v = 0.5 + rng.uniform01();
    }
    l.correction = CorrectionParams::identity(l.out_channels(), Granularity::PerChannel);
    for (auto& v : l.correction->gamma.vec()) v = 0.8 + 0.4 * rng.uniform01();
    for (auto& v : l.correction->beta.vec()) v = 0.1 * rng.normal();
  }
}

Tensor labels(std::size_t n, std::size_t classes) {
  Tensor y({n});
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<double>(i % classes);
  return y;
}

// Direct cross-correlation with zero padding; groups == channels for depthwise.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad,
                   bool depthwise) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor out({n, co, ho, wo});
  auto px = [&](std::size_t bb, std::size_t c, long yy, long xx) {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(wd)) return 0.0;
    return x[((bb * ci + c) * h + static_cast<std::size_t>(yy)) * wd + static_cast<std::size_t>(xx)];
  };
  for (std::size_t bb = 0; bb < n; ++bb)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t yy = 0; yy < ho; ++yy)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          double acc = b[o];
          const std::size_t cin = depthwise ? 1 : ci;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t src = depthwise ? o : c;
                acc += w[((o * cin + c) * k + ky) * k + kx] *
                       px(bb, src, static_cast<long>(yy * stride + ky) - static_cast<long>(pad),
                          static_cast<long>(xx * stride + kx) - static_cast<long>(pad));
              }
          out[((bb * co + o) * ho + yy) * wo + xx] = acc;
        }
  return out;
}

}  // namespace

TEST(Forward, IdentityDenseLayer) {
  LayerSpec l;
  l.weight = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  l.bias = Tensor({3}, 0.0);
  l.nonlinearity = Nonlinearity::None;
  Rng rng(0);
  const Tensor x = randn(rng, {5, 3});
  EXPECT_EQ(forward(single(l, {3}), x).output, x);
}

TEST(Forward, OnGridQuantizedEqualsLatent) {
  LayerSpec l;
  l.weight = Tensor(Shape{2, 3}, std::vector<double>{0.25, -0.5, 0.0, 0.75, 0.25, -0.25});
  l.bias = Tensor(Shape{2}, std::vector<double>{0.1, -0.2});
  l.nonlinearity = Nonlinearity::Relu;
  l.w_quant = QuantizerState::make(4, true, 0.25);
  l.a_quant = QuantizerState::make(4, false, 0.5);
  const auto net = single(l, {3});
  const Tensor x(Shape{2, 3}, std::vector<double>{0.5, 1.0, 0.0, 2.5, 1.5, 3.0});
  ForwardOptions latent;
  latent.mode = QuantMode::Latent;
  EXPECT_EQ(forward(net, x).output, forward(net, x, latent).output);
}

TEST(Forward, SoftRoundHalfEqualsQuantized) {
  auto t = qatlab::testing::small_task(5);
  t.net.set_bn_mode(BNMode::Eval);
  const Tensor x = t.data.gather_inputs(t.data.eval_idx);
  ForwardOptions soft;
  soft.mode = QuantMode::SoftRound;
  soft.soft_k = 0.5;
  EXPECT_EQ(forward(t.net, x, soft).output, forward(t.net, x).output);
}

TEST(Forward, TwoLayerCompositionOracle) {
  Rng rng(7);
  NetworkSpec net;
  net.input_shape = {4};
  net.loss = LossKind::Mse;
  net.layers.push_back(qatlab::testing::dense_layer(rng, 4, 5, Nonlinearity::Relu));
  net.layers.push_back(qatlab::testing::dense_layer(rng, 5, 2, Nonlinearity::None));
  net.layers[0].w_quant = QuantizerState::make(3, true, 0.2);
  net.layers[0].a_quant = QuantizerState::make(4, true, 0.3);
  net.layers[1].w_quant = QuantizerState::make(3, true, 0.15);
  net.layers[1].a_quant = QuantizerState::make(3, false, 0.25);
  const Tensor x = randn(rng, {6, 4});

  auto q = [](double v, double s, double lo, double hi) { return s * std::clamp(std::round(v / s), lo, hi); };
  for (std::size_t b = 0; b < 6; ++b) {
    double h1[5];
    for (std::size_t o = 0; o < 5; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 4; ++i)
        acc += q(net.layers[0].weight.at(o, i), 0.2, -4, 3) * q(x.at(b, i), 0.3, -8, 7);
      h1[o] = std::max(0.0, acc + net.layers[0].bias[o]);
    }
    const Tensor out = forward(net, x).output;
    for (std::size_t o = 0; o < 2; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 5; ++i) acc += q(net.layers[1].weight.at(o, i), 0.15, -4, 3) * q(h1[i], 0.25, 0, 7);
      EXPECT_NEAR(out.at(b, o), acc + net.layers[1].bias[o], 1e-12);
    }
  }
}

TEST(Forward, ConvAndDepthwiseMatchDirectLoops) {
  Rng rng(8);
  const Tensor x = randn(rng, {2, 3, 6, 5});
  for (bool dw : {false, true}) {
    for (std::size_t stride : {1, 2}) {
      LayerSpec l;
      l.kind = dw ? LayerKind::DepthwiseConv2d : LayerKind::Conv2d;
      l.weight = randn(rng, dw ? Shape{3, 1, 3, 3} : Shape{4, 3, 3, 3});
      l.bias = randn(rng, {l.weight.dim(0)});
      l.stride = stride;
      l.padding = 1;
      l.nonlinearity = Nonlinearity::None;
      const Tensor got = forward(single(l, {3, 6, 5}), x).output;
      EXPECT_LE(max_abs_diff(got, conv_oracle(x, l.weight, l.bias, stride, 1, dw)), 1e-12);
    }
  }
}

TEST(Forward, GlobalAveragePool) {
  Rng rng(9);
  LayerSpec l;
  l.kind = LayerKind::Conv2d;
  l.weight = randn(rng, {2, 1, 1, 1});
  l.bias = Tensor({2}, 0.0);
  l.nonlinearity = Nonlinearity::None;
  l.pool = Pool::GlobalAvg;
  const Tensor x = randn(rng, {1, 1, 3, 3});
  const Tensor out = forward(single(l, {1, 3, 3}), x).output;
  ASSERT_EQ(out.shape(), (Shape{1, 2}));
  EXPECT_NEAR(out[1], l.weight[1] * sum(x) / 9.0, 1e-12);
}

TEST(Forward, ShapeMismatchThrows) {
  const auto t = qatlab::testing::small_task(0);
  EXPECT_THROW(forward(t.net, Tensor({3, 5})), DimensionError);
}

TEST(Forward, OutputDependsOnWeightsOnlyThroughCodes) {
  auto t = qatlab::testing::small_task(6);
  t.net.set_bn_mode(BNMode::Eval);
  const Tensor x = t.data.gather_inputs(t.data.eval_idx);
  const Tensor ref = forward(t.net, x).output;
  NetworkSpec moved = t.net;
  auto& l = moved.layers[1];
  const double s = l.w_quant->scale[0];
  for (auto& w : l.weight.vec()) {
    const double r = std::round(w / s);
    if (r <= l.w_quant->lo || r >= l.w_quant->hi) continue;
    w = s * (r + 0.3 * (w / s - r));  // stays in the same rounding cell
  }
  EXPECT_EQ(forward(moved, x).output, ref);
}

TEST(Forward, EvalBatchNormIsAffine) {
  LayerSpec l;
  l.weight = Tensor::matrix({{1, 0}, {0, 1}});
  l.bias = Tensor({2}, 0.0);
  l.nonlinearity = Nonlinearity::None;
  l.bn = BNParams::identity(2);
  l.bn->gain = Tensor(Shape{2}, std::vector<double>{1.5, -0.5});
  l.bn->running_mean = Tensor(Shape{2}, std::vector<double>{0.2, -1.0});
  l.bn->running_var = Tensor(Shape{2}, std::vector<double>{2.0, 0.5});
  l.bn->mode = BNMode::Eval;
  const auto net = single(l, {2});
  Rng rng(1);
  const Tensor a = randn(rng, {4, 2}), b = randn(rng, {4, 2});
  const Tensor zero({4, 2}, 0.0);
  const Tensor lhs = sub(forward(net, add(a, b)).output, forward(net, b).output);
  const Tensor rhs = sub(forward(net, a).output, forward(net, zero).output);
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-12);
}

TEST(Forward, HighBitsApproachLatent) {
  for (int trial = 0; trial < 5; ++trial) {
    auto t = qatlab::testing::small_task(10 + trial);
    t.net.set_bn_mode(BNMode::Eval);
    QuantPlan plan;
    plan.bits_w = 16;
    plan.bits_a = 16;
    plan.first_last_bits = 0;
    const Tensor x = t.data.gather_inputs(t.data.eval_idx);
    attach_quantizers(t.net, plan, x);
    for (auto& l : t.net.layers) l.a_quant->scale = scale(l.a_quant->scale, 2.0);  // headroom past the percentile
    ForwardOptions latent;
    latent.mode = QuantMode::Latent;
    const Tensor ref = forward(t.net, x, latent).output;
    double peak = 0.0;
    for (double v : ref.vec()) peak = std::max(peak, std::abs(v));
    EXPECT_LE(max_abs_diff(forward(t.net, x).output, ref), 1e-3 * peak);
  }
}

TEST(Backward, ZeroUpstreamGivesZeroGrads) {
  auto t = qatlab::testing::small_task(0);
  const Tensor x = t.data.gather_inputs(t.data.calib_idx);
  ForwardOptions o;
  o.keep_cache = true;
  const auto f = forward(t.net, x, o);
  auto g = backward(t.net, f, Tensor(f.output.shape(), 0.0));
  for (const auto& p : collect_params(t.net, &g)) {
    for (double v : p.grad->vec()) ASSERT_EQ(v, 0.0) << p.name;
  }
}

TEST(Backward, MissingCacheThrows) {
  auto t = qatlab::testing::small_task(0);
  const Tensor x = t.data.gather_inputs(t.data.calib_idx);
  const auto f = forward(t.net, x);
  EXPECT_THROW(backward(t.net, f, Tensor(f.output.shape(), 1.0)), StateError);
}

TEST(Backward, SingleDenseLayerMatchesFiniteDifferences) {
  Rng rng(3);
  LayerSpec l = qatlab::testing::dense_layer(rng, 5, 3, Nonlinearity::None);
  l.w_quant = QuantizerState::make(4, true, 0.1);
  l.a_quant = QuantizerState::make(4, true, 0.2);
  auto net = single(l, {5});
  no_grad_scaling(net);
  const Tensor x = randn(rng, {8, 5});
  const Tensor y = randn(rng, {8, 3});
  const auto r = oracle::check_gradients(net, x, y, 1000, rng);
  EXPECT_EQ(r.agreed, r.checked) << r.worst_name << " rel " << r.worst_rel;
  EXPECT_EQ(r.checked, 15u + 3u + 2u);
}

TEST(Backward, MlpMatchesFiniteDifferencesInBothBnModes) {
  Rng rng(4);
  for (BNMode mode : {BNMode::Train, BNMode::Eval}) {
    auto t = qatlab::testing::small_task(20);
    perturb_aux(t.net, rng);
    no_grad_scaling(t.net);
    t.net.set_bn_mode(mode);
    const Tensor x = t.data.gather_inputs(std::span(t.data.calib_idx.data(), 16));
    const Tensor y = t.data.gather_targets(std::span(t.data.calib_idx.data(), 16));
    const auto r = oracle::check_gradients(t.net, x, y, 10, rng);
    EXPECT_EQ(r.agreed, r.checked) << to_string(mode) << " " << r.worst_name << " rel " << r.worst_rel;
  }
}

TEST(Backward, CnnMatchesFiniteDifferences) {
  Rng rng(5);
  NetworkSpec net = make_cnn({1, 6, 6}, 3, rng, 4, Nonlinearity::Silu);
  const Tensor x = uniform(rng, {4, 1, 6, 6}, 0.0, 1.0);
  QuantPlan plan;
  plan.bits_w = 3;
  plan.bits_a = 3;
  attach_quantizers(net, plan, x);
  perturb_aux(net, rng);
  no_grad_scaling(net);
  for (BNMode mode : {BNMode::Train, BNMode::Eval}) {
    net.set_bn_mode(mode);
    const auto r = oracle::check_gradients(net, x, labels(4, 3), 10, rng);
    EXPECT_EQ(r.agreed, r.checked) << to_string(mode) << " " << r.worst_name << " rel " << r.worst_rel;
  }
}

TEST(Backward, LatentModeMatchesFiniteDifferences) {
  Rng rng(6);
  auto t = qatlab::testing::small_task(21);
  strip_quantizers(t.net);
  perturb_aux(t.net, rng);
  const Tensor x = t.data.gather_inputs(std::span(t.data.calib_idx.data(), 12));
  const Tensor y = t.data.gather_targets(std::span(t.data.calib_idx.data(), 12));
  const auto r = oracle::check_gradients(t.net, x, y, 10, rng);
  EXPECT_EQ(r.agreed, r.checked) << r.worst_name;
}

TEST(Backward, DuplicatedRowsGiveSameGradient) {
  auto t = qatlab::testing::small_task(7);
  t.net.set_bn_mode(BNMode::Eval);
  const std::vector<std::size_t> one{t.data.calib_idx[0], t.data.calib_idx[1]};
  std::vector<std::size_t> twice = one;
  twice.insert(twice.end(), one.begin(), one.end());
  auto grads_for = [&](const std::vector<std::size_t>& idx) {
    ForwardOptions o;
    o.keep_cache = true;
    const auto f = forward(t.net, t.data.gather_inputs(idx), o);
    const auto l = compute_loss(t.net.loss, f.output, t.data.gather_targets(idx));
    return backward(t.net, f, l.grad);
  };
  auto a = grads_for(one);
  auto b = grads_for(twice);
  const auto pa = collect_params(t.net, &a);
  NetworkSpec copy = t.net;
  const auto pb = collect_params(copy, &b);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_LE(max_abs_diff(*pa[i].grad, *pb[i].grad), 1e-12) << pa[i].name;
}

TEST(Loss, MseAndCrossEntropy) {
  const Tensor out = Tensor::matrix({{1.0, 2.0}, {0.0, -1.0}});
  const auto m = compute_loss(LossKind::Mse, out, Tensor::matrix({{0.0, 2.0}, {1.0, 1.0}}));
  EXPECT_NEAR(m.loss, (1.0 + 0.0 + 1.0 + 4.0) / 4.0, 1e-15);
  EXPECT_NEAR(m.grad[0], 2.0 * 1.0 / 4.0, 1e-15);
  const auto c = compute_loss(LossKind::SoftmaxCrossEntropy, out, Tensor(Shape{2}, std::vector<double>{1, 0}));
  const double l0 = -std::log(std::exp(2.0) / (std::exp(1.0) + std::exp(2.0)));
  const double l1 = -std::log(1.0 / (1.0 + std::exp(-1.0)));
  EXPECT_NEAR(c.loss, (l0 + l1) / 2.0, 1e-12);
  EXPECT_EQ(accuracy(out, Tensor(Shape{2}, std::vector<double>{1, 1})), 0.5);
}

TEST(BatchNorm, RunningStatsUseMomentum) {
  LayerSpec l;
  l.weight = Tensor::matrix({{1.0}});
  l.bias = Tensor({1}, 0.0);
  l.nonlinearity = Nonlinearity::None;
  l.bn = BNParams::identity(1);
  auto net = single(l, {1});
  const Tensor x(Shape{4, 1}, std::vector<double>{1, 2, 3, 6});
  ForwardOptions o;
  o.keep_cache = true;
  const auto f = forward(net, x, o);
  update_bn_running_stats(net, f);
  EXPECT_NEAR(net.layers[0].bn->running_mean[0], 0.9 * 0.0 + 0.1 * 3.0, 1e-15);
  EXPECT_NEAR(net.layers[0].bn->running_var[0], 0.9 * 1.0 + 0.1 * 3.5, 1e-15);
}

TEST(Dampening, OnGridIsZero) {
  LayerSpec l;
  l.weight = Tensor(Shape{1, 3}, std::vector<double>{0.1, -0.3, 0.0});
  l.bias = Tensor({1}, 0.0);
  l.w_quant = QuantizerState::make(4, true, 0.1);
  EXPECT_NEAR(dampening_penalty(single(l, {3}), 1.0), 0.0, 1e-30);
}

TEST(Dampening, SingleWeightExample) {
  LayerSpec l;
  l.weight = Tensor(Shape{1, 1}, std::vector<double>{0.26});
  l.bias = Tensor({1}, 0.0);
  l.w_quant = QuantizerState::make(4, true, 0.1);
  EXPECT_NEAR(dampening_penalty(single(l, {1}), 1.0), 0.0016, 1e-15);
}

TEST(Dampening, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  auto t = qatlab::testing::small_task(8);
  NetworkGrads g = zero_grads(t.net);
  const double lambda = 0.7;
  dampening_penalty(t.net, lambda, &g);
  for (std::size_t li = 0; li < t.net.layers.size(); ++li) {
    NetworkSpec work = t.net;
    Tensor& w = work.layers[li].weight;
    const Tensor fd = finite_diff(
        [&](const Tensor& v) {
          const Tensor keep = w;
          w = v;
          const double p = dampening_penalty(work, lambda);
          w = keep;
          return p;
        },
        w, 1e-7);
    EXPECT_LE(max_abs_diff(fd, g.layers[li].weight), 1e-6) << "layer " << li;
    EXPECT_EQ(g.layers[li].w_scale, Tensor(g.layers[li].w_scale.shape(), 0.0));
  }
}

TEST(Adam, ZeroGradLeavesParams) {
  Tensor v = Tensor(Shape{3}, std::vector<double>{1, 2, 3});
  Tensor g({3}, 0.0);
  const ParamRef p[] = {{"p", ParamKind::Weight, &v, &g}};
  AdamState st;
  adam_step(st, p);
  EXPECT_EQ(v, Tensor(Shape{3}, std::vector<double>{1, 2, 3}));
}

TEST(Adam, FirstStepClosedForm) {
  Tensor v = Tensor(Shape{3}, std::vector<double>{1, 2, 3});
  const Tensor g(Shape{3}, std::vector<double>{0.5, -2.0, 1e-3});
  Tensor gg = g;
  const ParamRef p[] = {{"p", ParamKind::Weight, &v, &gg}};
  AdamState st;
  st.lr = 0.01;
  adam_step(st, p);
  const double start[] = {1, 2, 3};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(v[i], start[i] - 0.01 * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
  }
}

TEST(Adam, ScalesClampedAndNonFiniteRejected) {
  Tensor s = Tensor::scalar(1e-6);
  Tensor g = Tensor::scalar(1.0);
  const ParamRef p[] = {{"s", ParamKind::WeightScale, &s, &g}};
  AdamState st;
  st.lr = 1.0;
  adam_step(st, p);
  EXPECT_EQ(s[0], kMinScale);

  Tensor w = Tensor::scalar(0.5), gw = Tensor::scalar(1.0);
  Tensor bad = Tensor::scalar(NAN);
  Tensor u = Tensor::scalar(0.5);
  const ParamRef q[] = {{"w", ParamKind::Weight, &w, &gw}, {"u", ParamKind::Weight, &u, &bad}};
  EXPECT_THROW(adam_step(st, q), EvaluationError);
  EXPECT_EQ(w[0], 0.5);
}

TEST(TrainQat, ZeroEpochsLeavesNetUnchanged) {
  auto t = qatlab::testing::small_task(9);
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainResult r = train_qat(t.net, t.data, cfg);
  EXPECT_TRUE(r.history.empty());
  const auto a = collect_params(t.net);
  const auto b = collect_params(r.net);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].value, *b[i].value);
}

TEST(TrainQat, DeterministicHistory) {
  auto t = qatlab::testing::small_task(10);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.ema = true;
  cfg.ema_alpha = 0.95;
  cfg.seed = 4;
  const TrainResult a = train_qat(t.net, t.data, cfg);
  const TrainResult b = train_qat(t.net, t.data, cfg);
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
    EXPECT_EQ(a.history[e].eval.loss, b.history[e].eval.loss);
    EXPECT_EQ(a.history[e].ema_eval.loss, b.history[e].ema_eval.loss);
    EXPECT_EQ(a.history[e].mean_flip_frequency, b.history[e].mean_flip_frequency);
  }
}

TEST(TrainQat, LearnsBlobs) {
  auto t = qatlab::testing::small_task(11);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.lr = 1e-2;
  const TrainResult r = train_qat(t.net, t.data, cfg);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  EXPECT_GE(r.history.back().eval.accuracy, 0.8);
}

TEST(TrainQat, StrongDampeningEmptiesThresholdRegion) {
  auto t = qatlab::testing::small_task(12, Nonlinearity::Silu, 800);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 3e-3;
  TrainConfig damp = cfg;
  damp.dampening_lambda = 1.0;
  const TrainResult plain = train_qat(t.net, t.data, cfg);
  const TrainResult heavy = train_qat(t.net, t.data, damp);
  EXPECT_GT(heavy.history.back().penalty, 0.0);
  auto mass = [](const NetworkSpec& n) {
    std::uint64_t near = 0, total = 0;
    for (const auto& l : n.layers) {
      const auto h = boundary_histogram(l.weight, *l.w_quant, 10);
      near += h.bins[0] + h.bins[1];
      total += h.total();
    }
    return static_cast<double>(near) / static_cast<double>(total);
  };
  EXPECT_LT(mass(heavy.net), mass(plain.net));
}

TEST(TrainQat, InvalidConfigRejected) {
  auto t = qatlab::testing::small_task(0);
  TrainConfig cfg;
  cfg.batch = 0;
  EXPECT_THROW(train_qat(t.net, t.data, cfg), ArgumentError);
}

TEST(Evaluate, KeepsPartialBatch) {
  auto t = qatlab::testing::small_task(13);
  const auto e = evaluate(t.net, t.data, t.data.eval_idx, {}, 7);
  EXPECT_EQ(e.samples, t.data.eval_idx.size());
  const auto whole = evaluate(t.net, t.data, t.data.eval_idx, {}, 1000);
  EXPECT_NEAR(e.loss, whole.loss, 1e-12);
  EXPECT_EQ(e.accuracy, whole.accuracy);
}
