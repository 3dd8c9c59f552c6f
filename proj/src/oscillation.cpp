// SPDX-License-Identifier: Apache-2.0
#include "qatlab/oscillation.hpp"

#include <algorithm>
#include <cmath>

#include "qatlab/ema.hpp"
#include "qatlab/error.hpp"
#include "qatlab/numeric.hpp"

namespace qatlab {

OscillationTracker::OscillationTracker(std::size_t window) : window_(window) {
  if (window == 1) throw ArgumentError("oscillation window must be 0 (unbounded) or >= 2");
}

void OscillationTracker::record_step(const IntTensor& codes, std::span<const double> scales) {
  const std::size_t p = codes.data.size();
  if (total_ == 0) {
    params_ = p;
    flips_.assign(p, 0);
    ring_.assign((window_ == 0 ? 1 : window_) * p, 0);
    traces_.assign(scales.size(), {});
  } else {
    if (p != params_) {
      throw ArgumentError("record_step: code count changed from " + std::to_string(params_) +
                          " to " + std::to_string(p));
    }
    if (scales.size() != traces_.size()) {
      throw ArgumentError("record_step: scale count changed mid-run");
    }
  }
  for (std::size_t q = 0; q < scales.size(); ++q) traces_[q].push_back(scales[q]);
  ++total_;

  if (window_ == 0) {
    if (count_ > 0) {
      for (std::size_t i = 0; i < p; ++i)
        if (codes.data[i] != ring_[i]) ++flips_[i];
    }
    std::copy(codes.data.begin(), codes.data.end(), ring_.begin());
    count_ = total_;
    return;
  }

  auto slot = [&](std::size_t s) { return ring_.begin() + static_cast<std::ptrdiff_t>(s * p); };
  if (count_ > 0) {
    const auto newest = slot((head_ + count_ - 1) % window_);
    for (std::size_t i = 0; i < p; ++i)
      if (codes.data[i] != newest[static_cast<std::ptrdiff_t>(i)]) ++flips_[i];
  }
  if (count_ == window_) {
    const auto oldest = slot(head_);
    const auto second = slot((head_ + 1) % window_);
    for (std::size_t i = 0; i < p; ++i) {
      const auto k = static_cast<std::ptrdiff_t>(i);
      if (oldest[k] != second[k]) --flips_[i];
    }
    std::copy(codes.data.begin(), codes.data.end(), oldest);
    head_ = (head_ + 1) % window_;
  } else {
    std::copy(codes.data.begin(), codes.data.end(), slot((head_ + count_) % window_));
    ++count_;
  }
}

std::vector<double> OscillationTracker::flip_frequency() const {
  if (count_ < 2) throw StateError("flip_frequency needs at least 2 recorded steps");
  std::vector<double> f(params_);
  const double denom = static_cast<double>(count_ - 1);
  for (std::size_t i = 0; i < params_; ++i) f[i] = static_cast<double>(flips_[i]) / denom;
  return f;
}

double OscillationTracker::mean_flip_frequency() const {
  const auto f = flip_frequency();
  if (f.empty()) return 0.0;
  double s = 0.0;
  for (double v : f) s += v;
  return s / static_cast<double>(f.size());
}

std::uint64_t BoundaryHistogram::total() const {
  std::uint64_t t = 0;
  for (auto b : bins) t += b;
  return t;
}

double BoundaryHistogram::mass_below(double limit) const {
  const std::uint64_t t = total();
  if (t == 0) return 0.0;
  const double width = 0.5 / static_cast<double>(bins.size());
  std::uint64_t m = 0;
  for (std::size_t i = 0; i < bins.size(); ++i)
    if (static_cast<double>(i + 1) * width <= limit + 1e-12) m += bins[i];
  return static_cast<double>(m) / static_cast<double>(t);
}

BoundaryHistogram boundary_histogram(const Tensor& w, const QuantizerState& q, std::size_t bins) {
  if (bins < 2) throw ArgumentError("boundary_histogram needs at least 2 bins");
  const auto layout = ChannelLayout::of(q, w.shape());
  BoundaryHistogram h;
  h.bins.assign(bins, 0);
  const double lo = static_cast<double>(q.lo), hi = static_cast<double>(q.hi);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double z = w[i] / q.scale[layout.channel(i)];
    const double r = round_half_away(z);
    if (r < lo || r > hi) continue;
    const double d = std::abs((z - std::floor(z)) - 0.5);
    auto b = static_cast<std::size_t>(d / 0.5 * static_cast<double>(bins));
    h.bins[std::min(b, bins - 1)] += 1;
  }
  return h;
}

ToyProblem ToyProblem::paper_like() {
  ToyProblem p;
  p.w_star = Tensor(Shape{3}, std::vector<double>{0.55 * p.s_w0, -0.3 * p.s_w0, 1.2 * p.s_w0});
  return p;
}

void ToyProblem::validate() const {
  if (w_star.numel() != 3) throw ArgumentError("toy w* must have 3 elements");
  if (bits_w < 1 || bits_x < 1) throw ArgumentError("toy bit-widths must be >= 1");
  if (steps == 0) throw ArgumentError("toy steps must be positive");
  if (batch_size == 0) throw ArgumentError("toy batch size must be positive");
  if (!(lr > 0.0)) throw ArgumentError("toy learning rate must be positive");
  if (!(x_lo < x_hi)) throw ArgumentError("toy input range must satisfy lo < hi");
  if (!(s_w0 > 0.0) || !(s_x0 > 0.0)) throw ArgumentError("toy initial scales must be positive");
  if (!w_init.empty() && w_init.numel() != 3) throw ArgumentError("toy w_init must have 3 elements");
  if (!(ema_alpha >= 0.0 && ema_alpha < 1.0)) throw ArgumentError("toy EMA decay must be in [0,1)");
  if (tail_steps == 0) throw ArgumentError("toy tail_steps must be positive");
  if (eval_samples == 0) throw ArgumentError("toy eval_samples must be positive");
}

namespace {

// Returns per-row residual target - prediction for the toy model.
std::vector<double> toy_residuals(const Tensor& xq, const Tensor& x, const Tensor& wq,
                                  const Tensor& w_star) {
  const std::size_t b = x.dim(0);
  std::vector<double> r(b);
  for (std::size_t i = 0; i < b; ++i) {
    double target = 0.0, pred = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      target += x[i * 3 + j] * w_star[j];
      pred += xq[i * 3 + j] * wq[j];
    }
    r[i] = target - pred;
  }
  return r;
}

}  // namespace

double toy_objective(const Tensor& w, const QuantizerState& s_w, const QuantizerState& s_x,
                     const Tensor& x_batch, const Tensor& w_star) {
  if (w.numel() != 3 || w_star.numel() != 3 || x_batch.rank() != 2 || x_batch.dim(1) != 3) {
    throw DimensionError("toy_objective expects w, w* of size 3 and x of shape [B, 3]");
  }
  const auto r = toy_residuals(quantize(x_batch, s_x), x_batch, quantize(w, s_w), w_star);
  double total = 0.0;
  for (double v : r) total += std::abs(v);
  return total / static_cast<double>(r.size());
}

ToyResult run_toy(const ToyProblem& p, bool use_ema, Rng& rng) {
  p.validate();
  QuantizerState qw = QuantizerState::make(p.bits_w, p.signed_w, p.s_w0);
  QuantizerState qx = QuantizerState::make(p.bits_x, false, p.s_x0);

  Rng eval_rng = rng.fork(0x70E7A1);
  ToyResult res;
  res.eval_x = uniform(eval_rng, Shape{p.eval_samples, 3}, p.x_lo, p.x_hi);

  Tensor w = p.w_init.empty() ? uniform(rng, Shape{3}, -p.s_w0, p.s_w0) : p.w_init.reshaped({3});
  EMAState ema = make_ema(p.ema_alpha, p.steps, p.ema_warmup_fraction);
  if (use_ema) res.ema_tracker.emplace(0);
  res.trace.reserve(p.steps);
  double tail_sum = 0.0;

  for (std::size_t t = 0; t < p.steps; ++t) {
    const Tensor x = uniform(rng, Shape{p.batch_size, 3}, p.x_lo, p.x_hi);
    const Tensor xq = quantize(x, qx);
    const Tensor wq = quantize(w, qw);
    const auto r = toy_residuals(xq, x, wq, p.w_star);
    const double inv_b = 1.0 / static_cast<double>(p.batch_size);

    double loss = 0.0;
    Tensor g_wq(Shape{3});
    Tensor g_xq(x.shape());
    for (std::size_t b = 0; b < p.batch_size; ++b) {
      loss += std::abs(r[b]);
      const double dpred = -2.0 * r[b] * inv_b;  // d(mean r^2)/d(pred_b)
      for (std::size_t j = 0; j < 3; ++j) {
        g_wq[j] += dpred * xq[b * 3 + j];
        g_xq[b * 3 + j] = dpred * wq[j];
      }
    }
    loss *= inv_b;
    if (!std::isfinite(loss) || loss > 1e6) {
      throw DivergenceError("toy run diverged at step " + std::to_string(t) +
                            ": loss = " + std::to_string(loss));
    }

    const auto gw = quantize_backward(w, qw, g_wq);
    const auto gx = quantize_backward(x, qx, g_xq);
    axpy(-p.lr, gw.g_w, w);
    qw.scale[0] -= p.lr * gw.g_s[0];
    qx.scale[0] -= p.lr * gx.g_s[0];
    clamp_scale(qw.scale);
    clamp_scale(qx.scale);

    const NamedTensor live[] = {{"w", &w}, {"s_w", &qw.scale}, {"s_x", &qx.scale}};
    if (use_ema) ema_update(ema, live);

    const IntTensor codes = integer_code(w, qw);
    const double scales[] = {qw.scale[0], qx.scale[0]};
    res.tracker.record_step(codes, scales);

    ToyStep st;
    st.iter = t;
    const Tensor wq_new = quantize(w, qw);
    for (std::size_t j = 0; j < 3; ++j) {
      st.w[j] = w[j];
      st.q_w[j] = wq_new[j];
      st.code[j] = codes.data[j];
    }
    st.s_w = qw.scale[0];
    st.s_x = qx.scale[0];
    st.loss = loss;
    for (auto f : res.tracker.flip_counts()) st.flips += f;
    if (use_ema) {
      const Tensor& sw = ema.shadows.at("w");
      QuantizerState qs = qw;
      qs.scale = ema.shadows.at("s_w");
      const IntTensor sc = integer_code(sw, qs);
      for (std::size_t j = 0; j < 3; ++j) {
        st.ema_w[j] = sw[j];
        st.ema_code[j] = sc.data[j];
      }
      st.ema_s_w = qs.scale[0];
      st.ema_s_x = ema.shadows.at("s_x")[0];
      const double ema_scales[] = {st.ema_s_w, st.ema_s_x};
      res.ema_tracker->record_step(sc, ema_scales);
    }
    res.trace.push_back(st);
    if (t + p.tail_steps >= p.steps) tail_sum += toy_objective(w, qw, qx, res.eval_x, p.w_star);
  }
  res.live_tail_loss = tail_sum / static_cast<double>(std::min(p.tail_steps, p.steps));

  res.final_loss = toy_objective(w, qw, qx, res.eval_x, p.w_star);
  if (use_ema) {
    QuantizerState qws = qw, qxs = qx;
    qws.scale = ema.shadows.at("s_w");
    qxs.scale = ema.shadows.at("s_x");
    res.final_ema_loss = toy_objective(ema.shadows.at("w"), qws, qxs, res.eval_x, p.w_star);
  } else {
    res.final_ema_loss = res.final_loss;
  }
  return res;
}

std::vector<double> toy_tail_flip_frequency(const std::vector<ToyStep>& trace, std::size_t tail,
                                            bool shadow) {
  if (trace.size() < 2 || tail < 2) throw StateError("tail flip frequency needs >= 2 steps");
  tail = std::min(tail, trace.size());
  const std::size_t start = trace.size() - tail;
  std::vector<double> f(3, 0.0);
  for (std::size_t t = start + 1; t < trace.size(); ++t) {
    for (std::size_t j = 0; j < 3; ++j) {
      const auto a = shadow ? trace[t - 1].ema_code[j] : trace[t - 1].code[j];
      const auto b = shadow ? trace[t].ema_code[j] : trace[t].code[j];
      if (a != b) f[j] += 1.0;
    }
  }
  for (auto& v : f) v /= static_cast<double>(tail - 1);
  return f;
}

}  // namespace qatlab
