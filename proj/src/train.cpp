// SPDX-License-Identifier: Apache-2.0
#include "qatlab/train.hpp"

#include <cmath>
#include <string>

#include "qatlab/adam.hpp"
#include "qatlab/error.hpp"

namespace qatlab {

void TrainConfig::validate() const {
  if (batch == 0) throw ArgumentError("batch size must be positive");
  if (!(lr > 0.0)) throw ArgumentError("learning rate must be positive");
  if (mode == QuantMode::SoftRound) throw ArgumentError("soft rounding is evaluation-only");
  if (!(ema_alpha >= 0.0 && ema_alpha < 1.0)) throw ArgumentError("EMA decay must be in [0, 1)");
  if (!(ema_warmup_fraction >= 0.0 && ema_warmup_fraction <= 1.0)) {
    throw ArgumentError("EMA warmup fraction must be in [0, 1]");
  }
  if (!(dampening_lambda >= 0.0)) throw ArgumentError("dampening lambda must be >= 0");
  if (flip_window == 1) throw ArgumentError("flip window must be 0 or >= 2");
}

EvalResult evaluate(const NetworkSpec& net, const Dataset& data, std::span<const std::size_t> idx,
                    const ForwardOptions& opt, std::size_t batch) {
  if (idx.empty()) throw ArgumentError("evaluation split is empty");
  NetworkSpec frozen = net;
  frozen.set_bn_mode(BNMode::Eval);
  ForwardOptions o = opt;
  o.keep_cache = false;
  const std::vector<std::size_t> order(idx.begin(), idx.end());
  EvalResult r;
  for (const Batch& b : make_batches(data, order, batch, false, nullptr)) {
    const ForwardResult f = forward(frozen, b.x, o);
    const double n = static_cast<double>(b.x.dim(0));
    r.loss += compute_loss(net.loss, f.output, b.y).loss * n;
    if (net.loss == LossKind::SoftmaxCrossEntropy) r.accuracy += accuracy(f.output, b.y) * n;
    r.samples += b.x.dim(0);
  }
  r.loss /= static_cast<double>(r.samples);
  r.accuracy /= static_cast<double>(r.samples);
  return r;
}

TrainResult train_qat(NetworkSpec net, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  net.validate();
  data.validate();
  if (data.train_idx.empty()) throw ArgumentError("train split is empty");
  if (data.train_idx.size() < cfg.batch) {
    throw ArgumentError("train split (" + std::to_string(data.train_idx.size()) +
                        ") is smaller than one batch (" + std::to_string(cfg.batch) + ")");
  }

  const std::size_t per_epoch = data.train_idx.size() / cfg.batch;
  TrainResult res{net, make_ema(cfg.ema_alpha, per_epoch * cfg.epochs, cfg.ema_warmup_fraction),
                  OscillationTracker(cfg.flip_window), {}, 0};
  if (cfg.epochs == 0) return res;

  NetworkSpec& live = res.net;
  live.set_bn_mode(BNMode::Train);
  AdamState adam;
  adam.lr = cfg.lr;
  Rng shuffle = Rng(cfg.seed).fork(0x5EED);
  ForwardOptions fopt;
  fopt.mode = cfg.mode;
  fopt.keep_cache = true;
  ForwardOptions eopt;
  eopt.mode = cfg.mode;
  const bool track = cfg.mode == QuantMode::Quantized && !weight_codes(live).data.empty();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    const auto batches = make_batches(data, data.train_idx, cfg.batch, true, &shuffle);
    for (const Batch& b : batches) {
      const ForwardResult fwd = forward(live, b.x, fopt);
      const LossResult lr = compute_loss(live.loss, fwd.output, b.y);
      if (!std::isfinite(lr.loss) || lr.loss > 1e6) {
        throw DivergenceError("training diverged at iteration " + std::to_string(res.iterations) +
                              ": loss = " + std::to_string(lr.loss));
      }
      NetworkGrads grads = backward(live, fwd, lr.grad);
      double pen = 0.0;
      if (cfg.dampening_lambda > 0.0) pen = dampening_penalty(live, cfg.dampening_lambda, &grads);
      auto params = collect_params(live, &grads);
      adam_step(adam, params);
      update_bn_running_stats(live, fwd);
      if (cfg.ema) ema_update(res.ema, ema_tracked(live));
      if (track) res.tracker.record_step(weight_codes(live), all_scales(live));
      m.train_loss += lr.loss;
      m.penalty += pen;
      ++res.iterations;
    }
    const double nb = static_cast<double>(batches.size());
    m.train_loss /= nb;
    m.penalty /= nb;
    m.iterations = res.iterations;
    m.eval = data.eval_idx.empty() ? EvalResult{} : evaluate(live, data, data.eval_idx, eopt);
    m.ema_eval = m.eval;
    if (cfg.ema && !data.eval_idx.empty()) {
      m.ema_eval = evaluate(materialize_ema(live, res.ema), data, data.eval_idx, eopt);
    }
    if (track && res.tracker.window_steps() >= 2) m.mean_flip_frequency = res.tracker.mean_flip_frequency();
    res.history.push_back(m);
  }
  return res;
}

}  // namespace qatlab
