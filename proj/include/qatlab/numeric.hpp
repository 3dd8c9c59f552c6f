// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "qatlab/rng.hpp"
#include "qatlab/tensor.hpp"

namespace qatlab {

/// [m,k] x [k,n] -> [m,n]. Each output is accumulated left to right over k.
Tensor matmul(const Tensor& a, const Tensor& b);

/// a x b^T for a:[m,k], b:[n,k]; same accumulation order as matmul.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// a^T x b for a:[k,m], b:[k,n]; accumulation runs over k in increasing order.
Tensor matmul_tn(const Tensor& a, const Tensor& b);

using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient of f at x. Throws EvaluationError if f returns
/// a non-finite value at any probe point.
Tensor finite_diff(const ScalarFn& f, const Tensor& x, double eps);

/// i.i.d. samples in [lo, hi). Throws ArgumentError unless lo < hi.
Tensor uniform(Rng& rng, const Shape& shape, double lo, double hi);

}  // namespace qatlab
