#pragma once

// Central finite-difference verification of analytic gradients.

#include <functional>
#include <vector>

#include "dmr/tensor.hpp"

namespace dmr {

// Compares the analytic gradient of the scalar-valued f with respect to each
// element of `params` against central finite differences (default step 1e-5)
// and returns the worst relative error, |a - n| / max(1, |a|, |n|).
// f must be deterministic and re-runnable; param data is perturbed in place
// and restored. Throws numeric_error if an analytic gradient is non-finite.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double step = 1e-5);

}  // namespace dmr
