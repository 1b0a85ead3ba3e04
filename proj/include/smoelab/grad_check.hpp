#pragma once

#include <functional>

#include "smoelab/graph.hpp"
#include "smoelab/tensor.hpp"

namespace smoelab::diff {

using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;

/// Maximum component-wise relative error between the reverse-mode gradient
/// of f at x and central differences with the given step. The relative
/// denominator is max(|a|, |b|, 1e-8). Throws ContractError if f is not
/// scalar-valued. x's values are restored on return.
double grad_check(const ScalarFn& f, Tensor x, double step = 1e-5);

}  // namespace smoelab::diff
