#pragma once

#include <string>
#include <vector>

#include "smoelab/model.hpp"

namespace smoelab {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over the trainable records of a parameter list. Frozen records get
/// no moment buffers and are never touched.
class Adam {
public:
    Adam(const std::vector<model::ParamRecord>& params, AdamOptions options = {});

    void step(double lr);
    void zero_grad();
    /// Scales gradients so their global L2 norm is at most max_norm.
    /// Returns the norm before scaling.
    double clip_grad_norm(double max_norm);

    std::uint64_t steps() const { return t_; }
    void set_steps(std::uint64_t t) { t_ = t; }

    struct Slot {
        std::string name;
        diff::Tensor param;
        std::vector<double> m, v;
    };
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }

private:
    AdamOptions options_;
    std::vector<Slot> slots_;
    std::uint64_t t_ = 0;
};

}  // namespace smoelab
