// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "qatlab/quantizer.hpp"

namespace qatlab {

struct DatasetConfig {
  /// patterns | blobs | spirals | regression | csv | idx
  std::string kind = "patterns";
  std::size_t n = 2400;
  std::size_t classes = 8;
  std::size_t dim = 8;                      // regression input width
  std::vector<std::size_t> teacher_hidden{16};
  std::size_t teacher_out = 1;
  double noise = 0.25;
  double separation = 4.0;
  std::size_t image_size = 8;
  double eval_fraction = 0.2;
  double calib_fraction = 0.1;
  std::string path;         // csv file, or idx images
  std::string labels_path;  // idx labels
  std::string target = "label";
};

struct NetworkConfig {
  std::string name = "cnn";  // cnn | mlp
  std::string activation = "relu";
  std::size_t width = 8;
  std::vector<std::size_t> hidden{32, 64, 32};
  bool batch_norm = true;
};

struct EmaConfig {
  bool on = true;
  double alpha = 0.99;
  double warmup = 0.01;
};

struct QCOptions {
  double lr = 3e-3;
  std::string granularity = "per_channel";
  bool use_scale = true;
  bool use_shift = true;
  std::size_t epochs = 1;
  std::size_t batch = 8;
  std::string source = "ema";  // ema | live
};

struct ToyConfig {
  std::size_t steps = 10000;
  double lr = 0.01;
  int bits_w = 1;
  int bits_x = 1;
  bool signed_w = false;
  std::size_t batch = 16;
  double ema_alpha = 0.99;
  std::size_t tail_steps = 500;
  bool ema = true;
};

/// Every option of a run. JSON keys mirror the field names; nested structs are
/// nested objects.
struct ExperimentConfig {
  std::string task = "train";  // toy | train | qc | fold | ablate | eval | report
  DatasetConfig dataset;
  NetworkConfig network;
  int bits_w = 3;
  int bits_a = 3;
  int first_last_bits = 8;
  std::string granularity = "per_tensor";
  std::size_t pretrain_epochs = 8;
  double pretrain_lr = 1e-2;
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double lr = 3e-3;
  EmaConfig ema;
  double dampening = 0.0;
  QCOptions qc;
  ToyConfig toy;
  double soft_k = 0.45;
  std::size_t flip_window = 2000;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir;   // empty: $QATLAB_OUTPUT_ROOT/<task>-<hash>, else ./runs/...
  std::string checkpoint;   // input checkpoint for qc / fold / eval / ablate
  std::vector<std::string> runs;  // report inputs
  std::string label;        // method label for reports; derived when empty

  /// Throws ConfigError listing every problem.
  void validate() const;
  Granularity weight_granularity() const;
  /// plain | dampening | ema (+qc appended by the qc task).
  std::string method() const;
};

/// Parses a JSON object; unknown or mistyped keys become ConfigError entries.
ExperimentConfig config_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json config_to_json(const ExperimentConfig& c);

/// Reads a config file. A run manifest (object with a "config" member and
/// "manifest_version") is accepted too, so a run can be repeated from it.
nlohmann::ordered_json read_config_file(const std::string& path);

/// Applies "key=value" or "--key=value" overrides with dotted keys
/// ("ema.alpha=0.999"). Values parse as JSON when possible, else as strings.
void apply_overrides(nlohmann::ordered_json& j, const std::vector<std::string>& overrides);

/// FNV-1a over the compact dump of the effective configuration.
std::string config_hash(const ExperimentConfig& c);

}  // namespace qatlab
