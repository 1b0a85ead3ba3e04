#include "smoelab/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "smoelab/errors.hpp"

namespace smoelab::diff {

double grad_check(const ScalarFn& f, Tensor x, double step)
{
    const bool had_flag = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();

    Graph graph;
    Tensor y = f(graph, x);
    if (y.size() != 1)
        throw ContractError("grad_check: function output has shape " + to_string(y.shape()) +
                            ", expected a scalar");
    graph.backward(y);
    std::vector<double> analytic(x.size(), 0.0);
    if (x.has_grad())
        std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

    auto values = x.values();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + step;
        Graph plus(false);
        const double fp = f(plus, x).item();
        values[i] = saved - step;
        Graph minus(false);
        const double fm = f(minus, x).item();
        values[i] = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    x.zero_grad();
    x.set_requires_grad(had_flag);
    return worst;
}

}  // namespace smoelab::diff
