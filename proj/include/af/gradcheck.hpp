#pragma once

#include <functional>
#include <vector>

#include "af/tensor.hpp"

namespace af {

/// Compares tape gradients of a scalar-valued function against central finite
/// differences. Returns the max over all probed coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
///
/// `f` must be pure in the probed tensors; they are perturbed in place and
/// restored. Probed tensors get requires_grad set and their grads overwritten.
double gradcheck(const std::function<Tensor()>& f,
                 const std::vector<Tensor>& wrt, double h = 1e-4);

/// Single-input form: probes d f(x) / dx on a private copy of x.
double gradcheck(const std::function<Tensor(const Tensor&)>& f,
                 const Tensor& x, double h = 1e-4);

}  // namespace af
