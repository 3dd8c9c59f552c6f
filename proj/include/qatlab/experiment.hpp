// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qatlab/config.hpp"
#include "qatlab/datasets.hpp"
#include "qatlab/models.hpp"
#include "qatlab/network.hpp"
#include "qatlab/train.hpp"

namespace qatlab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "QATLAB_OUTPUT_ROOT";

Dataset build_dataset(const ExperimentConfig& cfg, std::uint64_t seed);
NetworkSpec build_network(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed);
QuantPlan quant_plan(const ExperimentConfig& cfg);

struct PipelineResult {
  Dataset data;
  NetworkSpec pretrained;  // latent network after full-precision training
  EvalResult pretrain_eval;
  TrainResult qat;
};

/// Full-precision pretraining, quantizer attachment from one calibration
/// batch, then QAT with the configured EMA / dampening settings.
PipelineResult train_pipeline(const ExperimentConfig& cfg, std::uint64_t seed);

/// Network to correct for a given QC source ("ema" falls back to live when the
/// checkpoint carries no shadows).
NetworkSpec qc_source_network(const NetworkSpec& live, const EMAState* ema, const std::string& source);

/// Runs the configured task once per seed. Each seed writes
/// <run dir>/seed-<s>/{manifest.json, metrics.csv, ...}; the report task
/// writes report.csv into the run dir. Returns kExitOk or kExitRuntime;
/// configuration problems must be caught before (ConfigError).
int run_experiment(const ExperimentConfig& cfg, std::ostream& log);

/// Output directory for a config: output_dir, else $QATLAB_OUTPUT_ROOT (or
/// ./runs) joined with "<task>-<config hash>".
std::string resolve_run_dir(const ExperimentConfig& cfg);

/// Shortest round-trip decimal text of a double, used for every CSV field.
std::string fmt_num(double v);

}  // namespace qatlab
