#pragma once

#include <cstdint>
#include <vector>

#include "smoelab/ops.hpp"
#include "smoelab/rng.hpp"
#include "smoelab/tensor.hpp"

namespace smoelab::testing {

inline diff::Tensor random_tensor(Rng& rng, diff::Shape shape, double lo = -1.0, double hi = 1.0,
                                  bool requires_grad = false)
{
    diff::Tensor t = diff::Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.values())
        v = rng.uniform(lo, hi);
    return t;
}

/// Σ w ⊙ y with fixed random weights, so every output coordinate carries a
/// gradient of order one.
inline diff::Tensor weighted_sum(diff::Graph& g, const diff::Tensor& y, std::uint64_t seed = 99)
{
    Rng rng(seed);
    diff::Tensor w = random_tensor(rng, y.shape(), 0.5, 1.5);
    return diff::sum(g, diff::mul(g, y, w));
}

}  // namespace smoelab::testing
