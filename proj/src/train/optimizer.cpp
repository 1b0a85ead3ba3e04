#include "smoelab/optimizer.hpp"

#include <cmath>

namespace smoelab {

Adam::Adam(const std::vector<model::ParamRecord>& params, AdamOptions options) : options_(options)
{
    for (const auto& p : params) {
        if (!p.trainable)
            continue;
        slots_.push_back({p.name, p.tensor, std::vector<double>(p.tensor.size(), 0.0),
                          std::vector<double>(p.tensor.size(), 0.0)});
    }
}

void Adam::step(double lr)
{
    ++t_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (auto& s : slots_) {
        if (!s.param.has_grad())
            continue;
        auto w = s.param.values();
        auto g = s.param.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            s.m[i] = b1 * s.m[i] + (1 - b1) * g[i];
            s.v[i] = b2 * s.v[i] + (1 - b2) * g[i] * g[i];
            w[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + options_.eps);
        }
    }
}

void Adam::zero_grad()
{
    for (auto& s : slots_)
        s.param.zero_grad();
}

double Adam::clip_grad_norm(double max_norm)
{
    double sq = 0.0;
    for (const auto& s : slots_)
        if (s.param.has_grad())
            for (double g : s.param.grad())
                sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& s : slots_)
            if (s.param.has_grad())
                for (double& g : s.param.grad())
                    g *= scale;
    }
    return norm;
}

}  // namespace smoelab
