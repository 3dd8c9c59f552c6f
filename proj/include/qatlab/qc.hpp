// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "qatlab/datasets.hpp"
#include "qatlab/network.hpp"
#include "qatlab/train.hpp"

namespace qatlab {

/// gamma * h + beta over the channel axis (axis 1) of h: [N, C, ...].
Tensor apply_correction(const Tensor& h, const CorrectionParams& c);

struct QCConfig {
  double lr = 1e-4;
  Granularity granularity = Granularity::PerChannel;
  bool use_scale = true;
  bool use_shift = true;
  std::size_t batch = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct QCResult {
  NetworkSpec net;  // input network with fitted corrections attached, BN frozen
  double calib_loss_before = 0.0;
  double calib_loss_after = 0.0;
};

/// Attaches identity corrections to every layer with a weight quantizer and
/// runs Adam on gamma / beta only over the calibration split, all other
/// parameters and BN statistics frozen. A disabled scale or shift stays at
/// identity. Throws ArgumentError when the calibration split is empty.
QCResult fit_qc(const NetworkSpec& net, const Dataset& data, const QCConfig& cfg);

/// BN'(h) = BN(gamma * h + beta) with frozen statistics.
BNParams absorb_into_bn(const CorrectionParams& c, const BNParams& bn);

struct FoldResult {
  LayerSpec layer;
  /// Weight elements whose code had to change (sign-flipped channels at the
  /// lower clip level).
  std::size_t recoded = 0;
};

/// Merges an eval-mode BN into the weights and bias. A weight quantizer
/// becomes per-channel with s'_c = s_c |f_c|, f = g / sqrt(var + eps).
/// A correction on the layer is absorbed first. Throws StateError when BN is
/// missing or in train mode.
FoldResult fold_bn_into_quant_scale(const LayerSpec& layer);

/// Removes every correction: into BN when present, otherwise into the
/// weight scale and bias.
NetworkSpec absorb_corrections(const NetworkSpec& net);

struct NetworkFoldResult {
  NetworkSpec net;
  std::size_t recoded = 0;
};

/// absorb_corrections, then fold every BN layer.
NetworkFoldResult fold_network(const NetworkSpec& net);

enum class QCVariant { ScaleOnly, ShiftOnly, Both };

std::string to_string(QCVariant v);

struct AblationCell {
  Granularity granularity = Granularity::PerTensor;
  QCVariant variant = QCVariant::Both;
  bool use_scale = true;
  bool use_shift = true;
  EvalResult eval;
  double calib_loss_before = 0.0;
  double calib_loss_after = 0.0;
};

struct AblationTable {
  EvalResult baseline;  // uncorrected network
  std::vector<AblationCell> cells;

  const AblationCell& cell(Granularity g, QCVariant v) const;
};

struct AblationGrid {
  std::vector<Granularity> granularities{Granularity::PerTensor, Granularity::PerChannel};
  std::vector<QCVariant> variants{QCVariant::ScaleOnly, QCVariant::ShiftOnly, QCVariant::Both};
  /// Replaces every variant by a fully frozen fit (identity corrections).
  bool identity_only = false;
};

/// One fit_qc per (granularity, variant) cell, each from the same network,
/// evaluated on the eval split in quantized mode.
AblationTable qc_ablation(const NetworkSpec& net, const Dataset& data, const QCConfig& base,
                          const AblationGrid& grid = {});

}  // namespace qatlab
