#pragma once

#include <functional>

#include "equivar/tensor.hpp"

namespace equivar {

/// Maximum over coordinates of |analytic - central difference| /
/// (|central difference| + 1e-12) for a scalar-valued `f` at `x`.
/// Throws NumericError if f or any gradient is non-finite.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double eps = 1e-6);

}  // namespace equivar
