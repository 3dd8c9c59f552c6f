// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "helpers.hpp"
#include "qatlab/ema.hpp"
#include "qatlab/error.hpp"
#include "qatlab/train.hpp"

using namespace qatlab;

namespace {

EMAState seeded(double alpha, const Tensor& start) {
  EMAState st;
  st.alpha = alpha;
  st.shadows.emplace("p", start);
  return st;
}

}  // namespace

TEST(EmaUpdate, WarmupCopiesLive) {
  EMAState st = make_ema(0.9, 100, 0.05);
  EXPECT_EQ(st.warmup_iters, 5u);
  Tensor live = Tensor::scalar(1.0);
  const NamedTensor p[] = {{"p", &live}};
  for (int i = 0; i < 5; ++i) {
    live[0] = 1.0 + i;
    EXPECT_EQ(st.effective_decay(), 0.0);
    ema_update(st, p);
    EXPECT_EQ(st.shadows.at("p")[0], live[0]);
  }
  EXPECT_EQ(st.effective_decay(), 0.9);
}

TEST(EmaUpdate, SingleStepArithmetic) {
  EMAState st = seeded(0.9, Tensor::scalar(1.0));
  Tensor live = Tensor::scalar(2.0);
  const NamedTensor p[] = {{"p", &live}};
  ema_update(st, p);
  EXPECT_NEAR(st.shadows.at("p")[0], 1.1, 1e-15);
  EXPECT_EQ(st.iter, 1u);
}

TEST(EmaUpdate, FixedPoint) {
  Rng rng(1);
  const Tensor v = qatlab::testing::randn(rng, {50});
  for (double a : {0.0, 0.3, 0.9, 0.9999}) {
    EMAState st = seeded(a, v);
    const NamedTensor p[] = {{"p", &v}};
    ema_update(st, p);
    EXPECT_EQ(st.shadows.at("p"), v);
  }
}

TEST(EmaUpdate, ConvergesGeometrically) {
  for (double a : {0.5, 0.9, 0.99, 0.999, 0.9999}) {
    EMAState st = seeded(a, Tensor::scalar(0.0));
    const Tensor live = Tensor::scalar(1.0);
    const NamedTensor p[] = {{"p", &live}};
    for (int i = 0; i < 1000000; ++i) ema_update(st, p);
    const double err = std::abs(st.shadows.at("p")[0] - 1.0);
    // Geometric decay until the step (1 - a) * err drops below half an ulp of 1.
    EXPECT_LE(err, std::pow(a, 1e6) + std::numeric_limits<double>::epsilon() / (1.0 - a));
    EXPECT_LE(err, 1e-9);
  }
}

TEST(EmaUpdate, Linear) {
  Rng rng(2);
  const double c = -2.75;
  EMAState a = seeded(0.95, Tensor({8}, 0.0));
  EMAState b = seeded(0.95, Tensor({8}, 0.0));
  for (int step = 0; step < 200; ++step) {
    const Tensor live = qatlab::testing::randn(rng, {8});
    const Tensor scaled = scale(live, c);
    const NamedTensor pa[] = {{"p", &live}};
    const NamedTensor pb[] = {{"p", &scaled}};
    ema_update(a, pa);
    ema_update(b, pb);
  }
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(b.shadows.at("p")[i], c * a.shadows.at("p")[i], 1e-12);
}

TEST(EmaUpdate, ShapeMismatchThrows) {
  EMAState st = seeded(0.9, Tensor({3}));
  const Tensor live({4});
  const NamedTensor p[] = {{"p", &live}};
  EXPECT_THROW(ema_update(st, p), StateError);
  const NamedTensor q[] = {{"q", &live}};
  EXPECT_THROW(ema_update(st, q), StateError);
}

TEST(EmaUpdate, BadDecayRejected) {
  EXPECT_THROW(make_ema(1.0, 10), ArgumentError);
  EXPECT_THROW(make_ema(-0.1, 10), ArgumentError);
}

TEST(EmaTracked, CoversScalesButNotRunningStats) {
  const auto t = qatlab::testing::small_task(0);
  std::set<std::string> names;
  for (const auto& p : ema_tracked(t.net)) names.insert(p.name);
  EXPECT_TRUE(names.count("layers.0.weight"));
  EXPECT_TRUE(names.count("layers.0.w_scale"));
  EXPECT_TRUE(names.count("layers.1.a_scale"));
  EXPECT_TRUE(names.count("layers.0.bn.gain"));
  for (const auto& n : names) EXPECT_EQ(n.find("running"), std::string::npos) << n;
}

TEST(Materialize, MissingShadowThrows) {
  const auto t = qatlab::testing::small_task(0);
  EMAState st;
  EXPECT_THROW(materialize_ema(t.net, st), StateError);
}

TEST(Materialize, ZeroDecayIsBitIdentical) {
  auto t = qatlab::testing::small_task(1);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.ema = true;
  cfg.ema_alpha = 0.0;
  const TrainResult r = train_qat(t.net, t.data, cfg);
  NetworkSpec live = r.net;
  live.set_bn_mode(BNMode::Eval);
  const NetworkSpec shadow = materialize_ema(live, r.ema);
  const Tensor x = t.data.gather_inputs(t.data.eval_idx);
  EXPECT_EQ(forward(live, x).output, forward(shadow, x).output);
}

TEST(Materialize, WarmupOnlyRunEqualsLive) {
  auto t = qatlab::testing::small_task(2);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.ema = true;
  cfg.ema_alpha = 0.999;
  cfg.ema_warmup_fraction = 1.0;
  const TrainResult r = train_qat(t.net, t.data, cfg);
  const NetworkSpec shadow = materialize_ema(r.net, r.ema);
  for (const auto& p : collect_params(r.net)) {
    bool found = false;
    for (const auto& q : collect_params(shadow)) {
      if (q.name == p.name) {
        EXPECT_EQ(*q.value, *p.value) << p.name;
        found = true;
      }
    }
    EXPECT_TRUE(found);
  }
}

TEST(Materialize, LeavesLiveUntouchedAndIsDeterministic) {
  auto t = qatlab::testing::small_task(3);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.ema = true;
  cfg.ema_alpha = 0.9;
  const TrainResult r = train_qat(t.net, t.data, cfg);
  const NetworkSpec before = r.net;
  NetworkSpec a = materialize_ema(r.net, r.ema);
  NetworkSpec b = materialize_ema(r.net, r.ema);
  a.set_bn_mode(BNMode::Eval);
  b.set_bn_mode(BNMode::Eval);
  const Tensor x = t.data.gather_inputs(t.data.eval_idx);
  EXPECT_EQ(forward(a, x).output, forward(b, x).output);
  EXPECT_EQ(r.net.layers[0].weight, before.layers[0].weight);
  EXPECT_NE(a.layers[0].weight, r.net.layers[0].weight);
}

TEST(Ema, DoesNotAffectTraining) {
  auto t = qatlab::testing::small_task(4);
  TrainConfig cfg;
  cfg.epochs = 2;
  TrainConfig with = cfg;
  with.ema = true;
  with.ema_alpha = 0.9;
  const TrainResult a = train_qat(t.net, t.data, cfg);
  const TrainResult b = train_qat(t.net, t.data, with);
  const auto pa = collect_params(a.net);
  const auto pb = collect_params(b.net);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i].value, *pb[i].value) << pa[i].name;
  for (std::size_t e = 0; e < a.history.size(); ++e) EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
}
