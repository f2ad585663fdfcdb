#pragma once

#include <functional>
#include <vector>

#include "rohydr/tensor.hpp"

namespace rohydr {

using TensorFn = std::function<Tensor(const Tensor&)>;

/// Max over coordinates of |analytic - central difference| /
/// max(1, |central difference|) for a scalar-valued `f` at `x`.
double grad_check(const TensorFn& f, const Tensor& x, double h = 1e-5);

/// Same measure over every coordinate of every tensor in `params`; `loss`
/// rebuilds the scalar from the current parameter values on each call.
double grad_check_params(const std::function<Tensor()>& loss,
                         const std::vector<Tensor>& params, double h = 1e-5);

}  // namespace rohydr
