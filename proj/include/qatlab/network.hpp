// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "qatlab/quantizer.hpp"
#include "qatlab/tensor.hpp"

namespace qatlab {

enum class LayerKind { Dense, Conv2d, DepthwiseConv2d };
enum class Nonlinearity { None, Relu, Silu };
enum class Pool { None, GlobalAvg };
enum class BNMode { Train, Eval };
enum class LossKind { Mse, SoftmaxCrossEntropy };

std::string to_string(LayerKind k);
std::string to_string(Nonlinearity n);
std::string to_string(Pool p);
std::string to_string(BNMode m);
std::string to_string(LossKind l);
LayerKind layer_kind_from_string(const std::string& s);
Nonlinearity nonlinearity_from_string(const std::string& s);
Pool pool_from_string(const std::string& s);
BNMode bn_mode_from_string(const std::string& s);
LossKind loss_kind_from_string(const std::string& s);

struct BNParams {
  Tensor gain;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  BNMode mode = BNMode::Train;

  static BNParams identity(std::size_t channels);
  std::size_t channels() const { return gain.numel(); }
  void validate() const;
};

/// Affine correction h -> gamma * h + beta applied between the linear op and BN.
struct CorrectionParams {
  Tensor gamma;
  Tensor beta;
  Granularity granularity = Granularity::PerChannel;

  static CorrectionParams identity(std::size_t channels, Granularity g);
  bool is_identity() const;
};

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  /// Dense: [out, in]. Conv2d: [out, in, k, k]. Depthwise: [C, 1, k, k].
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::optional<QuantizerState> w_quant;
  /// Quantizes the layer input (the previous layer's post-activation).
  std::optional<QuantizerState> a_quant;
  std::optional<BNParams> bn;
  std::optional<CorrectionParams> correction;
  Nonlinearity nonlinearity = Nonlinearity::Silu;
  Pool pool = Pool::None;

  std::size_t out_channels() const { return weight.dim(0); }
  /// Number of multiply-accumulates and elementwise stages, for structural checks.
  std::size_t stage_count() const;
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  Shape input_shape;  // per sample, e.g. {features} or {C, H, W}
  LossKind loss = LossKind::SoftmaxCrossEntropy;

  /// Per-sample input shape of each layer, plus the network output at the end.
  std::vector<Shape> layer_shapes() const;
  /// Throws DimensionError when consecutive layers do not chain.
  void validate() const;
  void set_bn_mode(BNMode mode);
};

enum class QuantMode { Latent, Quantized, SoftRound };

struct ForwardOptions {
  QuantMode mode = QuantMode::Quantized;
  double soft_k = 0.45;
  bool soft_weights = true;
  bool soft_activations = true;
  bool keep_cache = false;
};

struct LayerCache {
  Tensor input;     // layer input a^{l-1}
  Tensor input_q;   // quantized input
  Tensor weight_q;  // quantized weight
  Tensor pre;       // h = W a + b
  Tensor corrected; // gamma h + beta (== pre without correction)
  Tensor xhat;      // BN normalized value
  Tensor bn_out;    // BN output, nonlinearity input
  Tensor act_out;   // nonlinearity output before pooling
  std::vector<double> mean;  // statistics BN actually used
  std::vector<double> inv_std;
  bool batch_stats = false;
  std::vector<double> batch_var;  // biased batch variance in train mode
};

struct ForwardResult {
  Tensor output;
  QuantMode mode = QuantMode::Quantized;
  bool has_cache = false;
  std::vector<LayerCache> cache;
};

/// Runs the batch x ([N, ...input_shape]) through the network. BN layers in
/// train mode normalize with batch statistics; eval mode uses running stats.
ForwardResult forward(const NetworkSpec& net, const Tensor& x, const ForwardOptions& opt = {});

struct LayerGrads {
  Tensor weight, bias, w_scale, a_scale, bn_gain, bn_bias, gamma, beta;
};

struct NetworkGrads {
  std::vector<LayerGrads> layers;
  Tensor input;
};

/// Zero-initialized gradients shaped like the network's parameters.
NetworkGrads zero_grads(const NetworkSpec& net);

/// Reverse pass from dL/d(output). Requires a cache from a Latent or Quantized forward.
NetworkGrads backward(const NetworkSpec& net, const ForwardResult& fwd, const Tensor& loss_grad);

/// Folds the batch statistics of a train-mode forward into BN running averages.
void update_bn_running_stats(NetworkSpec& net, const ForwardResult& fwd);

struct LossResult {
  double loss = 0.0;
  Tensor grad;
};

/// Mse: mean over all elements of (y - t)^2, targets shaped like output.
/// SoftmaxCrossEntropy: mean over the batch, targets are class indices [N].
LossResult compute_loss(LossKind kind, const Tensor& output, const Tensor& targets);

/// Fraction of rows whose argmax equals the class index target.
double accuracy(const Tensor& logits, const Tensor& labels);

/// lambda * sum over quantized layers of ||q(W) - W||^2 restricted to
/// in-range elements. Adds d/dW (with q(W) held fixed) into grads when given.
double dampening_penalty(const NetworkSpec& net, double lambda, NetworkGrads* grads = nullptr);

enum class ParamKind { Weight, Bias, WeightScale, ActScale, BNGain, BNBias, CorrGamma, CorrBeta };

bool is_scale(ParamKind k);

struct ParamRef {
  std::string name;
  ParamKind kind;
  Tensor* value;
  Tensor* grad;  // may be null when no gradient is attached
};

struct ConstParamRef {
  std::string name;
  ParamKind kind;
  const Tensor* value;
};

/// Every trainable tensor with a stable name ("layers.3.w_scale", ...).
/// When grads is non-null each entry carries its matching gradient tensor.
std::vector<ParamRef> collect_params(NetworkSpec& net, NetworkGrads* grads = nullptr);
std::vector<ConstParamRef> collect_params(const NetworkSpec& net);

/// Concatenated integer codes of all quantized weights, in layer order.
IntTensor weight_codes(const NetworkSpec& net);
/// Flattened scales of every quantizer (weights then activation per layer).
std::vector<double> all_scales(const NetworkSpec& net);

}  // namespace qatlab
