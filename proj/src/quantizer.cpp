// SPDX-License-Identifier: Apache-2.0
#include "qatlab/quantizer.hpp"

#include <algorithm>
#include <cmath>

#include "qatlab/error.hpp"

namespace qatlab {

std::string to_string(Granularity g) {
  return g == Granularity::PerTensor ? "per_tensor" : "per_channel";
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "per_tensor") return Granularity::PerTensor;
  if (s == "per_channel") return Granularity::PerChannel;
  throw ArgumentError("unknown granularity '" + s + "'");
}

namespace {

void set_range(QuantizerState& q) {
  if (q.bits < 1 || q.bits > 16) {
    throw ArgumentError("quantizer bits must be in [1, 16], got " + std::to_string(q.bits));
  }
  if (q.is_signed) {
    q.lo = -(std::int64_t{1} << (q.bits - 1));
    q.hi = (std::int64_t{1} << (q.bits - 1)) - 1;
  } else {
    q.lo = 0;
    q.hi = (std::int64_t{1} << q.bits) - 1;
  }
}

}  // namespace

QuantizerState QuantizerState::make(int bits, bool is_signed, double s) {
  QuantizerState q;
  q.bits = bits;
  q.is_signed = is_signed;
  q.scale = Tensor(Shape{1}, s);
  set_range(q);
  q.validate();
  return q;
}

QuantizerState QuantizerState::make_per_channel(int bits, bool is_signed, std::size_t axis,
                                                Tensor scale) {
  QuantizerState q;
  q.bits = bits;
  q.is_signed = is_signed;
  q.granularity = Granularity::PerChannel;
  q.axis = axis;
  q.scale = std::move(scale);
  set_range(q);
  q.validate();
  return q;
}

void QuantizerState::validate() const {
  if (bits < 1 || bits > 16) throw ArgumentError("quantizer bits out of range");
  const std::int64_t want_lo = is_signed ? -(std::int64_t{1} << (bits - 1)) : 0;
  const std::int64_t want_hi =
      is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
  if (lo != want_lo || hi != want_hi) {
    throw ArgumentError("quantizer levels [" + std::to_string(lo) + ", " + std::to_string(hi) +
                        "] inconsistent with " + std::to_string(bits) + "-bit " +
                        (is_signed ? "signed" : "unsigned") + " range");
  }
  if (scale.empty()) throw ArgumentError("quantizer has no scale");
  if (granularity == Granularity::PerTensor && scale.numel() != 1) {
    throw ArgumentError("per-tensor quantizer must have exactly one scale");
  }
  for (double s : scale.vec()) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw ArgumentError("quantizer scale must be positive and finite, got " +
                          std::to_string(s));
    }
  }
}

void QuantizerState::validate_for(const Shape& shape) const {
  validate();
  if (granularity == Granularity::PerChannel) {
    if (axis >= shape.size() || shape[axis] != scale.numel()) {
      throw ArgumentError("per-channel scale length " + std::to_string(scale.numel()) +
                          " does not match axis " + std::to_string(axis) + " of shape " +
                          shape_str(shape));
    }
  }
}

double QuantizerState::positive_levels() const {
  return hi > 0 ? static_cast<double>(hi) : static_cast<double>(-lo);
}

void SoftRoundConfig::validate() const {
  if (!(k >= 0.0 && k <= 0.5)) {
    throw ArgumentError("soft-round threshold k must lie in [0, 0.5], got " + std::to_string(k));
  }
}

ChannelLayout ChannelLayout::of(const QuantizerState& q, const Shape& shape) {
  ChannelLayout l;
  if (q.granularity == Granularity::PerTensor) {
    l.channels = 1;
    l.inner = shape_numel(shape);
    if (l.inner == 0) l.inner = 1;
    return l;
  }
  q.validate_for(shape);
  l.channels = shape[q.axis];
  for (std::size_t a = q.axis + 1; a < shape.size(); ++a) l.inner *= shape[a];
  return l;
}

double round_half_away(double z) { return std::round(z); }

namespace {

inline double clip(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

void require_finite(const Tensor& w, const char* what) {
  if (!w.all_finite()) throw EvaluationError(std::string(what) + ": non-finite input");
}

}  // namespace

Tensor quantize(const Tensor& w, const QuantizerState& q) {
  require_finite(w, "quantize");
  const auto layout = ChannelLayout::of(q, w.shape());
  const double lo = static_cast<double>(q.lo), hi = static_cast<double>(q.hi);
  Tensor out(w.shape());
  const auto& s = q.scale.vec();
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double sc = s[layout.channel(i)];
    out[i] = sc * clip(round_half_away(w[i] / sc), lo, hi);
  }
  return out;
}

QuantGrad quantize_backward(const Tensor& w, const QuantizerState& q, const Tensor& g_out, std::size_t samples) {
  check_same_shape(w, g_out, "quantize_backward");
  const auto layout = ChannelLayout::of(q, w.shape());
  const double lo = static_cast<double>(q.lo), hi = static_cast<double>(q.hi);
  QuantGrad g{Tensor(w.shape()), Tensor(q.scale.shape())};
  const auto& s = q.scale.vec();
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const std::size_t c = layout.channel(i);
    const double z = w[i] / s[c];
    const double r = round_half_away(z);
    double ds;
    if (r < lo) {
      ds = lo;
    } else if (r > hi) {
      ds = hi;
    } else {
      ds = r - z;
      g.g_w[i] = g_out[i];
    }
    g.g_s[c] += g_out[i] * ds;
  }
  if (q.lsq_grad_scale && w.numel() > 0) {
    const double per_channel =
        std::max(1.0, static_cast<double>(w.numel() / layout.channels) / static_cast<double>(std::max<std::size_t>(samples, 1)));
    const double factor = 1.0 / std::sqrt(per_channel * q.positive_levels());
    for (auto& v : g.g_s.vec()) v *= factor;
  }
  return g;
}

Tensor soft_round(const Tensor& w, const QuantizerState& q, const SoftRoundConfig& c) {
  c.validate();
  require_finite(w, "soft_round");
  const auto layout = ChannelLayout::of(q, w.shape());
  const double lo = static_cast<double>(q.lo), hi = static_cast<double>(q.hi);
  Tensor out(w.shape());
  const auto& s = q.scale.vec();
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double sc = s[layout.channel(i)];
    const double z = w[i] / sc;
    const double r = round_half_away(z);
    const double kept = std::abs(z - r) <= c.k ? r : z;
    out[i] = sc * clip(kept, lo, hi);
  }
  return out;
}

IntTensor integer_code(const Tensor& w, const QuantizerState& q) {
  require_finite(w, "integer_code");
  const auto layout = ChannelLayout::of(q, w.shape());
  const double lo = static_cast<double>(q.lo), hi = static_cast<double>(q.hi);
  IntTensor out{w.shape(), std::vector<std::int32_t>(w.numel())};
  const auto& s = q.scale.vec();
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double z = w[i] / s[layout.channel(i)];
    out.data[i] = static_cast<std::int32_t>(clip(round_half_away(z), lo, hi));
  }
  return out;
}

namespace {

double percentile_abs(std::vector<double> v, double pct) {
  for (auto& x : v) x = std::abs(x);
  if (v.empty()) return 0.0;
  // Nearest-rank percentile.
  auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(v.size()) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, v.size());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rank - 1), v.end());
  return v[rank - 1];
}

}  // namespace

ScaleInitResult init_scale(const Tensor& w, const QuantizerState& templ, ScaleInit kind) {
  if (w.empty()) throw ArgumentError("init_scale: empty tensor");
  require_finite(w, "init_scale");
  ScaleInitResult res;
  res.state = templ;
  const double levels = templ.positive_levels();
  const bool per_channel = templ.granularity == Granularity::PerChannel;
  std::size_t channels = 1, inner = w.numel();
  if (per_channel) {
    if (templ.axis >= w.rank()) throw ArgumentError("init_scale: channel axis out of range");
    channels = w.dim(templ.axis);
    inner = 1;
    for (std::size_t a = templ.axis + 1; a < w.rank(); ++a) inner *= w.dim(a);
  }
  Tensor s(Shape{channels});
  if (kind == ScaleInit::Weight) {
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const std::size_t c = (i / inner) % channels;
      s[c] = std::max(s[c], std::abs(w[i]));
    }
  } else {
    std::vector<std::vector<double>> per(channels);
    for (std::size_t i = 0; i < w.numel(); ++i) per[(i / inner) % channels].push_back(w[i]);
    for (std::size_t c = 0; c < channels; ++c) s[c] = percentile_abs(std::move(per[c]), 99.9);
  }
  for (auto& v : s.vec()) {
    v /= levels;
    if (v < kMinScale) {
      v = kMinScale;
      res.degenerate = true;
    }
  }
  res.state.scale = std::move(s);
  res.state.validate_for(w.shape());
  return res;
}

void clamp_scale(Tensor& scale) {
  for (auto& v : scale.vec()) v = std::max(v, kMinScale);
}

}  // namespace qatlab
