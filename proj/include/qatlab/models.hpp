// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "qatlab/network.hpp"
#include "qatlab/rng.hpp"

namespace qatlab {

/// Dense stack with BN and the given nonlinearity on hidden layers; the output
/// layer is linear without BN.
NetworkSpec make_mlp(std::size_t in_dim, const std::vector<std::size_t>& hidden, std::size_t out_dim,
                     LossKind loss, Rng& rng, Nonlinearity act = Nonlinearity::Silu, bool batch_norm = true);

/// Four blocks on [C, H, W] inputs: 3x3 conv -> `width`, 3x3 depthwise,
/// 1x1 conv -> 2*width followed by global average pooling, dense -> classes.
NetworkSpec make_cnn(const Shape& input_shape, std::size_t classes, Rng& rng, std::size_t width = 8,
                     Nonlinearity act = Nonlinearity::Silu);

struct QuantPlan {
  int bits_w = 4;
  int bits_a = 4;
  /// Bit-width for the first and last layer; 0 keeps bits_w / bits_a there.
  int first_last_bits = 8;
  Granularity granularity = Granularity::PerTensor;
};

/// Adds weight and input quantizers to every layer. Weight scales start at
/// max|W| / v; input scales at the 99.9th percentile of the latent-mode layer
/// inputs on `calib_x` divided by v. An input quantizer is unsigned when the
/// calibration values it sees are all non-negative.
void attach_quantizers(NetworkSpec& net, const QuantPlan& plan, const Tensor& calib_x);

/// Removes all quantizers (latent network).
void strip_quantizers(NetworkSpec& net);

}  // namespace qatlab
