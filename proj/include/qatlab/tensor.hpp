// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace qatlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles.
///
/// Storage is always 64-bit. The element count is kept equal to the product
/// of the shape; constructors that take external data reject NaN/Inf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// Builds a tensor from untrusted values; throws EvaluationError on NaN/Inf.
  static Tensor from_external(Shape shape, std::vector<double> data);
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  /// 2-D helper, mostly for tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Same data, new shape with identical element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  void fill(double v);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Integer codes produced by the quantizer.
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  friend bool operator==(const IntTensor& a, const IntTensor& b) = default;
};

/// A parameter value together with its accumulated gradient.
struct GradPair {
  Tensor value;
  Tensor grad;

  explicit GradPair(Tensor v);
  void zero_grad();
};

// Elementwise helpers. All of them require identical shapes.
void check_same_shape(const Tensor& a, const Tensor& b, const char* what);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double k);
void axpy(double k, const Tensor& x, Tensor& y);
double max_abs_diff(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);

}  // namespace qatlab
