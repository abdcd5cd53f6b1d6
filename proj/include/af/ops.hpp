#pragma once

#include <optional>

#include "af/tensor.hpp"

namespace af {

// Differentiable operations over Tensors. Every function computes its result
// eagerly and, when a Tape is active and an input is tracked, records the
// local backward rule onto it. With no active tape they are plain math.
//
// Binary elementwise ops broadcast numpy-style: shapes are right-aligned and
// each dimension must match or be 1 on one side.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // b must be nonzero everywhere

Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);    // d/dx = indicator(x > 0)
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);     // domain: a > 0 elementwise
Tensor sqrt(const Tensor& a);    // domain: a >= 0 (a > 0 for the gradient)
Tensor sigmoid(const Tensor& a);
/// Hard clip to [lo, hi]; gradient is zero outside the interval.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

/// Matrix product of two rank-2 tensors [m x k] * [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched matrix product of rank-3 tensors [N x m x k] * [N x k x n].
Tensor bmm(const Tensor& a, const Tensor& b);

enum class Reduce { Sum, Mean, Max };

/// Reduces along one axis, or over all elements when axis is absent.
/// Max routes its gradient to the first (lowest flat index) maximum.
Tensor reduce(Reduce op, const Tensor& a, std::optional<std::size_t> axis,
              bool keepdims = false);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdims = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdims = false);
Tensor reduce_max(const Tensor& a);
Tensor reduce_max(const Tensor& a, std::size_t axis, bool keepdims = false);

/// Numerically stable softmax along an axis (max-subtraction form).
Tensor softmax(const Tensor& a, std::size_t axis);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);

bool all_finite(const Tensor& a);

// Expression-style sugar.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) {
  return add_scalar(neg(a), s);
}
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) {
  return mul_scalar(a, 1.0 / s);
}
inline Tensor operator/(double s, const Tensor& a) {
  return div(Tensor::scalar(s), a);
}

}  // namespace af
