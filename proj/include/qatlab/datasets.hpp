// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qatlab/network.hpp"
#include "qatlab/rng.hpp"
#include "qatlab/tensor.hpp"

namespace qatlab {

enum class TaskKind { Regression, Classification };

std::string to_string(TaskKind t);
TaskKind task_kind_from_string(const std::string& s);

/// Samples stacked along axis 0, with train / eval / calibration index lists.
struct Dataset {
  Tensor inputs;   // [n, ...sample_shape]
  Tensor targets;  // regression: [n, k]; classification: [n] class indices
  TaskKind task = TaskKind::Regression;
  std::size_t num_classes = 0;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> eval_idx;
  std::vector<std::size_t> calib_idx;
  std::uint64_t seed = 0;

  std::size_t size() const { return inputs.empty() ? 0 : inputs.dim(0); }
  Shape sample_shape() const;
  Shape target_shape() const;

  Tensor gather_inputs(std::span<const std::size_t> idx) const;
  Tensor gather_targets(std::span<const std::size_t> idx) const;

  /// Throws StateError unless calib is a subset of train, train and eval are
  /// disjoint, and every index is in range.
  void validate() const;
};

struct Batch {
  Tensor x;
  Tensor y;
};

/// Fixed-size batches over `idx` in order, shuffled first when rng is given.
/// drop_last discards the trailing partial batch (training); evaluation keeps it.
std::vector<Batch> make_batches(const Dataset& d, std::vector<std::size_t> idx, std::size_t batch,
                                bool drop_last, Rng* rng);

/// Random permutation split: the last round(eval_fraction * n) items become eval.
/// Clears the calibration indices.
void assign_splits(Dataset& d, double eval_fraction, std::uint64_t seed);

/// Hidden widths of the random teacher MLP (tanh hidden units). Empty means
/// the identity map.
struct TeacherSpec {
  std::vector<std::size_t> hidden;
  std::size_t out_dim = 1;
};

Dataset gen_regression(std::uint64_t seed, std::size_t n, std::size_t dim, const TeacherSpec& teacher,
                       double noise_sigma, double eval_fraction = 0.2);

/// The noiseless teacher output for given inputs [n, dim].
Tensor teacher_outputs(std::uint64_t seed, std::size_t dim, const TeacherSpec& teacher,
                       const Tensor& inputs);

enum class ClassMode { Blobs, Spirals, Patterns };

std::string to_string(ClassMode m);
ClassMode class_mode_from_string(const std::string& s);

struct ClassificationOptions {
  double separation = 4.0;   // blob centre radius in units of the blob std
  double noise = 0.15;       // spirals: point jitter; patterns: pixel noise std
  std::size_t image_size = 8;
  double eval_fraction = 0.2;
};

/// Blobs and spirals are 2-D points; patterns are [1, S, S] images in [0, 1].
/// Labels are assigned round-robin, so class counts differ by at most one.
Dataset gen_classification(std::uint64_t seed, std::size_t n, std::size_t classes, ClassMode mode,
                           const ClassificationOptions& opt = {});

/// round(fraction * |train|) items (at least one) drawn without replacement
/// from the train split. Throws ArgumentError unless 0 < fraction <= 1.
Dataset make_calibration(const Dataset& d, double fraction, std::uint64_t seed);

/// Raw IDX array: big-endian, magic 0x0000 08 <ndim> (unsigned bytes only).
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> values;
};

IdxArray read_idx(const std::string& path);
void write_idx(const std::string& path, const IdxArray& a);

/// Images (magic 0x803, [n, rows, cols]) and labels (magic 0x801, [n]).
/// Pixels are scaled to [0, 1]; every sample lands in the train split.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Column named `target` holds the label (classification) or value (regression);
/// every other column is a numeric feature.
struct CsvSchema {
  std::string target = "label";
  TaskKind task = TaskKind::Classification;
};

/// Header row required. Throws ParseError with the 1-based line number.
Dataset load_csv(const std::string& path, const CsvSchema& schema);
/// Writes features as x0..x{d-1} followed by the target column.
void write_csv(const std::string& path, const Dataset& d, const CsvSchema& schema);

}  // namespace qatlab
