// SPDX-License-Identifier: Apache-2.0
#include "qatlab/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "qatlab/error.hpp"

namespace qatlab {

namespace {

// Stream ids; each purpose draws from its own fork of the dataset seed.
constexpr std::uint64_t kStreamData = 1;
constexpr std::uint64_t kStreamTeacher = 2;
constexpr std::uint64_t kStreamNoise = 3;
constexpr std::uint64_t kStreamSplit = 4;
constexpr std::uint64_t kStreamTemplates = 5;

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  const std::size_t n = t.dim(0);
  const std::size_t row = t.numel() / n;
  Shape s = t.shape();
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw ArgumentError("sample index " + std::to_string(idx[i]) + " out of range");
    std::copy_n(t.vec().begin() + static_cast<std::ptrdiff_t>(idx[i] * row), row,
                out.vec().begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

std::vector<Tensor> teacher_weights(std::uint64_t seed, std::size_t dim, const TeacherSpec& teacher) {
  Rng rng = Rng(seed).fork(kStreamTeacher);
  std::vector<Tensor> ws;
  std::size_t in = dim;
  std::vector<std::size_t> widths = teacher.hidden;
  widths.push_back(teacher.out_dim);
  for (std::size_t out : widths) {
    Tensor w(Shape{out, in});
    const double sd = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w.vec()) v = sd * rng.normal();
    ws.push_back(std::move(w));
    in = out;
  }
  return ws;
}

}  // namespace

std::string to_string(TaskKind t) {
  return t == TaskKind::Regression ? "regression" : "classification";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "regression") return TaskKind::Regression;
  if (s == "classification") return TaskKind::Classification;
  throw ArgumentError("unknown task kind '" + s + "'");
}

std::string to_string(ClassMode m) {
  switch (m) {
    case ClassMode::Blobs: return "blobs";
    case ClassMode::Spirals: return "spirals";
    case ClassMode::Patterns: return "patterns";
  }
  return "?";
}

ClassMode class_mode_from_string(const std::string& s) {
  if (s == "blobs") return ClassMode::Blobs;
  if (s == "spirals") return ClassMode::Spirals;
  if (s == "patterns") return ClassMode::Patterns;
  throw ArgumentError("unknown classification mode '" + s + "'");
}

Shape Dataset::sample_shape() const {
  const Shape& s = inputs.shape();
  return Shape(s.begin() + 1, s.end());
}

Shape Dataset::target_shape() const {
  const Shape& s = targets.shape();
  return Shape(s.begin() + 1, s.end());
}

Tensor Dataset::gather_inputs(std::span<const std::size_t> idx) const { return gather_rows(inputs, idx); }

Tensor Dataset::gather_targets(std::span<const std::size_t> idx) const { return gather_rows(targets, idx); }

void Dataset::validate() const {
  const std::size_t n = size();
  if (targets.empty() || targets.dim(0) != n) throw StateError("dataset inputs and targets disagree on n");
  std::vector<char> in_train(n, 0);
  for (auto i : train_idx) {
    if (i >= n) throw StateError("train index out of range");
    in_train[i] = 1;
  }
  for (auto i : eval_idx) {
    if (i >= n) throw StateError("eval index out of range");
    if (in_train[i]) throw StateError("eval and train splits overlap at index " + std::to_string(i));
  }
  for (auto i : calib_idx) {
    if (i >= n || !in_train[i]) {
      throw StateError("calibration index " + std::to_string(i) + " is not in the train split");
    }
  }
}

std::vector<Batch> make_batches(const Dataset& d, std::vector<std::size_t> idx, std::size_t batch,
                                bool drop_last, Rng* rng) {
  if (batch == 0) throw ArgumentError("batch size must be positive");
  if (rng) rng->shuffle(idx);
  std::vector<Batch> out;
  for (std::size_t b = 0; b < idx.size(); b += batch) {
    const std::size_t len = std::min(batch, idx.size() - b);
    if (len < batch && drop_last) break;
    std::span<const std::size_t> part(idx.data() + b, len);
    out.push_back({d.gather_inputs(part), d.gather_targets(part)});
  }
  return out;
}

void assign_splits(Dataset& d, double eval_fraction, std::uint64_t seed) {
  if (!(eval_fraction >= 0.0 && eval_fraction < 1.0)) {
    throw ArgumentError("eval fraction must be in [0, 1)");
  }
  auto perm = iota_vec(d.size());
  Rng rng = Rng(seed).fork(kStreamSplit);
  rng.shuffle(perm);
  const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(perm.size())));
  const std::size_t n_train = perm.size() - n_eval;
  d.train_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.eval_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(d.train_idx.begin(), d.train_idx.end());
  std::sort(d.eval_idx.begin(), d.eval_idx.end());
  d.calib_idx.clear();
}

Tensor teacher_outputs(std::uint64_t seed, std::size_t dim, const TeacherSpec& teacher,
                       const Tensor& inputs) {
  if (inputs.rank() != 2 || inputs.dim(1) != dim) {
    throw DimensionError("teacher expects inputs [n, " + std::to_string(dim) + "], got " +
                         shape_str(inputs.shape()));
  }
  if (teacher.hidden.empty()) return inputs;
  const auto ws = teacher_weights(seed, dim, teacher);
  Tensor h = inputs;
  for (std::size_t l = 0; l < ws.size(); ++l) {
    const std::size_t out = ws[l].dim(0), in = ws[l].dim(1), n = h.dim(0);
    Tensor next(Shape{n, out});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t o = 0; o < out; ++o) {
        double acc = 0.0;
        for (std::size_t k = 0; k < in; ++k) acc += ws[l][o * in + k] * h[i * in + k];
        next[i * out + o] = l + 1 < ws.size() ? std::tanh(acc) : acc;
      }
    }
    h = std::move(next);
  }
  return h;
}

Dataset gen_regression(std::uint64_t seed, std::size_t n, std::size_t dim, const TeacherSpec& teacher,
                       double noise_sigma, double eval_fraction) {
  if (n == 0 || dim == 0) throw ArgumentError("gen_regression needs n > 0 and dim > 0");
  if (!(noise_sigma >= 0.0)) throw ArgumentError("noise sigma must be >= 0");
  Dataset d;
  d.seed = seed;
  d.task = TaskKind::Regression;
  Rng rng = Rng(seed).fork(kStreamData);
  d.inputs = Tensor(Shape{n, dim});
  for (auto& v : d.inputs.vec()) v = rng.uniform01();

  if (teacher.hidden.empty()) {
    d.targets = d.inputs;  // identity teacher
  } else {
    d.targets = teacher_outputs(seed, dim, teacher, d.inputs);
  }
  if (noise_sigma > 0.0) {
    Rng noise = Rng(seed).fork(kStreamNoise);
    for (auto& v : d.targets.vec()) v += noise_sigma * noise.normal();
  }
  assign_splits(d, eval_fraction, seed);
  return d;
}

Dataset gen_classification(std::uint64_t seed, std::size_t n, std::size_t classes, ClassMode mode,
                           const ClassificationOptions& opt) {
  if (classes < 2) throw ArgumentError("classification needs at least 2 classes");
  if (n == 0) throw ArgumentError("classification needs n > 0");
  Dataset d;
  d.seed = seed;
  d.task = TaskKind::Classification;
  d.num_classes = classes;
  d.targets = Tensor(Shape{n});
  Rng rng = Rng(seed).fork(kStreamData);
  const double two_pi = 2.0 * std::numbers::pi;

  if (mode == ClassMode::Patterns) {
    const std::size_t S = opt.image_size;
    if (S < 4) throw ArgumentError("pattern images must be at least 4x4");
    // Each class is two Gaussian bumps at fixed random positions.
    Rng trng = Rng(seed).fork(kStreamTemplates);
    std::vector<double> cx(classes * 2), cy(classes * 2);
    for (std::size_t i = 0; i < classes * 2; ++i) {
      cx[i] = trng.uniform(1.0, static_cast<double>(S) - 2.0);
      cy[i] = trng.uniform(1.0, static_cast<double>(S) - 2.0);
    }
    d.inputs = Tensor(Shape{n, 1, S, S});
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % classes;
      d.targets[i] = static_cast<double>(c);
      const double dx = static_cast<double>(rng.uniform_int(3)) - 1.0;
      const double dy = static_cast<double>(rng.uniform_int(3)) - 1.0;
      const double amp = rng.uniform(0.6, 1.0);
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          double v = 0.0;
          for (std::size_t b = 0; b < 2; ++b) {
            const double ex = static_cast<double>(x) - cx[c * 2 + b] - dx;
            const double ey = static_cast<double>(y) - cy[c * 2 + b] - dy;
            v += amp * std::exp(-(ex * ex + ey * ey) / (2.0 * 1.2 * 1.2));
          }
          v += opt.noise * rng.normal();
          d.inputs[(i * S + y) * S + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  } else {
    d.inputs = Tensor(Shape{n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % classes;
      d.targets[i] = static_cast<double>(c);
      const double phase = two_pi * static_cast<double>(c) / static_cast<double>(classes);
      double x = 0.0, y = 0.0;
      if (mode == ClassMode::Blobs) {
        x = opt.separation * std::cos(phase) + rng.normal();
        y = opt.separation * std::sin(phase) + rng.normal();
      } else {
        const double t = rng.uniform01();
        const double angle = phase + 1.75 * two_pi * t;
        x = t * std::cos(angle) + opt.noise * rng.normal();
        y = t * std::sin(angle) + opt.noise * rng.normal();
      }
      d.inputs[i * 2] = x;
      d.inputs[i * 2 + 1] = y;
    }
  }
  assign_splits(d, opt.eval_fraction, seed);
  return d;
}

Dataset make_calibration(const Dataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ArgumentError("calibration fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  if (d.train_idx.empty()) throw ArgumentError("calibration needs a non-empty train split");
  Dataset out = d;
  auto pool = d.train_idx;
  Rng rng(seed);
  rng.shuffle(pool);
  auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
  k = std::clamp<std::size_t>(k, 1, pool.size());
  out.calib_idx.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.calib_idx.begin(), out.calib_idx.end());
  return out;
}

// IDX ---------------------------------------------------------------------

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

IdxArray read_idx(const std::string& path) {
  const auto bytes = slurp(path);
  auto fail = [&](std::size_t off, const std::string& what) {
    throw ParseError(path + ": " + what + " at byte offset " + std::to_string(off));
  };
  if (bytes.size() < 4) fail(0, "file too short for an IDX magic number");
  if (bytes[0] != 0 || bytes[1] != 0) fail(0, "IDX magic must start with two zero bytes");
  if (bytes[2] != 0x08) fail(2, "unsupported IDX element type (only unsigned byte 0x08)");
  const std::size_t ndim = bytes[3];
  if (ndim == 0) fail(3, "IDX array must have at least one dimension");
  if (bytes.size() < 4 + 4 * ndim) fail(bytes.size(), "truncated IDX dimension list");
  IdxArray a;
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    a.dims.push_back(read_be32(bytes, 4 + 4 * i));
    count *= a.dims.back();
  }
  const std::size_t start = 4 + 4 * ndim;
  if (bytes.size() != start + count) {
    fail(std::min(bytes.size(), start + count),
         "payload holds " + std::to_string(bytes.size() - start) + " bytes, header declares " +
             std::to_string(count));
  }
  a.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.end());
  return a;
}

void write_idx(const std::string& path, const IdxArray& a) {
  if (a.dims.empty() || a.dims.size() > 255) throw ArgumentError("IDX arrays need 1..255 dimensions");
  std::size_t count = 1;
  for (auto v : a.dims) count *= v;
  if (count != a.values.size()) throw DimensionError("IDX value count does not match dims");
  std::vector<std::uint8_t> b = {0, 0, 0x08, static_cast<std::uint8_t>(a.dims.size())};
  for (auto v : a.dims) put_be32(b, v);
  b.insert(b.end(), a.values.begin(), a.values.end());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const IdxArray img = read_idx(images_path);
  const IdxArray lab = read_idx(labels_path);
  if (img.dims.size() != 3) throw ParseError(images_path + ": image file must have magic 0x00000803 at byte offset 0");
  if (lab.dims.size() != 1) throw ParseError(labels_path + ": label file must have magic 0x00000801 at byte offset 0");
  if (img.dims[0] != lab.dims[0]) {
    throw ParseError("image count " + std::to_string(img.dims[0]) + " != label count " +
                     std::to_string(lab.dims[0]));
  }
  const std::size_t n = img.dims[0], rows = img.dims[1], cols = img.dims[2];
  Dataset d;
  d.task = TaskKind::Classification;
  d.inputs = Tensor(Shape{n, 1, rows, cols});
  for (std::size_t i = 0; i < img.values.size(); ++i) d.inputs[i] = img.values[i] / 255.0;
  d.targets = Tensor(Shape{n});
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.targets[i] = lab.values[i];
    max_label = std::max<std::size_t>(max_label, lab.values[i]);
  }
  d.num_classes = n ? max_label + 1 : 0;
  d.train_idx = iota_vec(n);
  return d;
}

// CSV ---------------------------------------------------------------------

namespace {

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
    if (!trim(line).empty()) {
      header = split_row(line);
      break;
    }
  }
  if (header.empty()) throw ParseError(path + ": empty CSV (no header row) at line " + std::to_string(lineno + 1));
  for (auto& h : header) h = trim(h);
  const auto tcol_it = std::find(header.begin(), header.end(), schema.target);
  if (tcol_it == header.end()) {
    throw ParseError(path + ": line " + std::to_string(lineno) + ": no column named '" + schema.target + "'");
  }
  const auto tcol = static_cast<std::size_t>(tcol_it - header.begin());
  const std::size_t nfeat = header.size() - 1;
  if (nfeat == 0) throw ParseError(path + ": line " + std::to_string(lineno) + ": no feature columns");

  std::vector<double> xs, ys;
  std::size_t max_label = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_row(line);
    if (cells.size() != header.size()) {
      throw ParseError(path + ": line " + std::to_string(lineno) + ": expected " +
                       std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = trim(cells[c]);
      double v = 0.0;
      std::size_t used = 0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (cell.empty() || used != cell.size() || !std::isfinite(v)) {
        throw ParseError(path + ": line " + std::to_string(lineno) + ": column '" + header[c] +
                         "' is not a finite number: '" + cell + "'");
      }
      if (c == tcol) {
        if (schema.task == TaskKind::Classification) {
          if (v < 0.0 || v != std::floor(v)) {
            throw ParseError(path + ": line " + std::to_string(lineno) + ": label must be a non-negative integer");
          }
          max_label = std::max(max_label, static_cast<std::size_t>(v));
        }
        ys.push_back(v);
      } else {
        xs.push_back(v);
      }
    }
  }
  const std::size_t n = ys.size();
  if (n == 0) throw ParseError(path + ": CSV has a header but no data rows (line " + std::to_string(lineno) + ")");
  Dataset d;
  d.task = schema.task;
  d.inputs = Tensor(Shape{n, nfeat}, std::move(xs));
  d.targets = schema.task == TaskKind::Classification ? Tensor(Shape{n}, std::move(ys))
                                                      : Tensor(Shape{n, 1}, std::move(ys));
  d.num_classes = schema.task == TaskKind::Classification ? max_label + 1 : 0;
  d.train_idx = iota_vec(n);
  return d;
}

void write_csv(const std::string& path, const Dataset& d, const CsvSchema& schema) {
  const std::size_t n = d.size();
  if (n == 0) throw ArgumentError("cannot write an empty dataset");
  const std::size_t nfeat = d.inputs.numel() / n;
  if (d.targets.numel() != n) throw DimensionError("CSV export supports a single target column");
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  out.precision(17);
  for (std::size_t j = 0; j < nfeat; ++j) out << 'x' << j << ',';
  out << schema.target << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < nfeat; ++j) out << d.inputs[i * nfeat + j] << ',';
    if (schema.task == TaskKind::Classification) {
      out << static_cast<long long>(d.targets[i]) << '\n';
    } else {
      out << d.targets[i] << '\n';
    }
  }
}

}  // namespace qatlab
