// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "qatlab/datasets.hpp"
#include "qatlab/models.hpp"
#include "qatlab/network.hpp"
#include "qatlab/numeric.hpp"
#include "qatlab/rng.hpp"
#include "qatlab/tensor.hpp"

namespace qatlab::testing {

inline Tensor randn(Rng& rng, const Shape& shape, double sd = 1.0) {
  Tensor t(shape);
  for (auto& v : t.vec()) v = sd * rng.normal();
  return t;
}

inline Tensor randu(Rng& rng, const Shape& shape, double lo, double hi) { return uniform(rng, shape, lo, hi); }

inline double rel_err(double a, double b) {
  const double d = std::abs(a - b);
  const double m = std::max(std::abs(a), std::abs(b));
  return m < 1e-12 ? d : d / m;
}

/// Fresh empty directory under the build tree, removed first if it exists.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("qatlab-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

/// Dense layer with random weights, no quantizers, no BN.
inline LayerSpec dense_layer(Rng& rng, std::size_t in, std::size_t out, Nonlinearity act) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.weight = randn(rng, {out, in}, 1.0 / std::sqrt(static_cast<double>(in)));
  l.bias = randn(rng, {out}, 0.1);
  l.nonlinearity = act;
  return l;
}

struct SmallTask {
  Dataset data;
  NetworkSpec net;  // quantizers attached, BN in train mode
};

/// Four-class blobs and a 2-16-16-4 MLP with 4-bit quantizers; cheap enough to
/// train for a few epochs inside a unit test.
inline SmallTask small_task(std::uint64_t seed, Nonlinearity act = Nonlinearity::Silu, std::size_t n = 400) {
  SmallTask t;
  ClassificationOptions o;
  o.separation = 3.0;
  t.data = make_calibration(gen_classification(seed, n, 4, ClassMode::Blobs, o), 0.25, seed);
  Rng rng(seed + 100);
  t.net = make_mlp(2, {16, 16}, 4, LossKind::SoftmaxCrossEntropy, rng, act, true);
  QuantPlan plan;
  plan.first_last_bits = 0;
  attach_quantizers(t.net, plan, t.data.gather_inputs(t.data.calib_idx));
  return t;
}

}  // namespace qatlab::testing
