#pragma once

#include <functional>

#include "rfc/tensor.hpp"

namespace rfc {

// Central finite differences of a scalar functional: g_i = (f(x + eps e_i) -
// f(x - eps e_i)) / (2 eps). `f` must be pure; a non-finite value is a
// NumericError.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double eps = 1e-5);

// Largest relative error between two gradients, |a-b| / max(|a|,|b|),
// evaluated only where max(|a|,|b|) exceeds `floor`. Returns 0 when every
// entry is below the floor.
double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

}  // namespace rfc
