#pragma once

#include <functional>

#include "mtnas/tensor.hpp"

namespace mtnas {

// Compares the analytic gradient of f(params) against central finite
// differences with step h. Returns the max over coordinates of
// |analytic - numeric| / max(1, |analytic|). f must be deterministic.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor params, double h);

}  // namespace mtnas
