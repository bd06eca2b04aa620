#pragma once

#include <functional>
#include <vector>

#include "genatt/tensor.hpp"

namespace genatt {

// Compares reverse-mode gradients of a scalar loss against central finite
// differences and returns the max over all parameter scalars of
// |analytic - numeric| / max(1, |numeric|).
//
// The loss closure is re-evaluated many times and must be a pure function of
// the parameter values: any internal randomness has to be reseeded inside the
// closure. Parameters are perturbed in place and restored. Double precision
// only; intended for models with at most ~1e4 scalars.
double grad_check(const std::function<Tensor()>& loss_fn,
                  const std::vector<Tensor*>& params, double h = 1e-5);

}  // namespace genatt
