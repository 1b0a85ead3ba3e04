#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "smoelab/graph.hpp"
#include "smoelab/rng.hpp"
#include "smoelab/routing.hpp"
#include "smoelab/tensor.hpp"

namespace smoelab::moe {

using diff::Graph;
using diff::Tensor;
using routing::BatchGating;
using routing::GatingOutput;

/// One shard of the split feedforward network: d -> d_e -> d with ReLU.
struct Expert {
    Tensor w1;  // [d_e × d]
    Tensor b1;  // [d_e]
    Tensor w2;  // [d × d_e]
    Tensor b2;  // [d]
};

class ExpertBank {
public:
    ExpertBank() = default;
    /// Splits an inner dimension of `inner_dim` evenly over `n_experts`.
    ExpertBank(Rng& rng, std::size_t n_experts, std::size_t d_model, std::size_t inner_dim);

    std::size_t size() const { return experts_.size(); }
    std::size_t d_model() const { return d_model_; }
    std::size_t expert_dim() const { return expert_dim_; }

    Expert& expert(std::size_t j) { return experts_.at(j); }
    const Expert& expert(std::size_t j) const { return experts_.at(j); }

    /// Number of (token, expert) evaluations since the last reset.
    std::uint64_t evaluations() const { return evaluations_; }
    void reset_evaluations() { evaluations_ = 0; }
    void count_evaluations(std::uint64_t n) { evaluations_ += n; }

private:
    std::vector<Expert> experts_;
    std::size_t d_model_ = 0;
    std::size_t expert_dim_ = 0;
    std::uint64_t evaluations_ = 0;
};

/// The unsplit feedforward network used by the dense baselines.
struct DenseFfn {
    Tensor w1;  // [inner × d]
    Tensor b1;
    Tensor w2;  // [d × inner]
    Tensor b2;

    static DenseFfn init(Rng& rng, std::size_t d_model, std::size_t inner_dim);
};

/// y = Σ_{j ∈ selected} gates[j] · E_j(h) for every row of x[M×d].
/// Experts outside a token's selected set are never evaluated.
Tensor moe_forward(Graph& g, const Tensor& x, const BatchGating& gating, ExpertBank& bank);

/// Single-token form; h is [d].
Tensor moe_forward(const Tensor& h, const GatingOutput& gating, ExpertBank& bank);

/// FFN(h) = W2 · dropout(relu(W1·h + b1)) + b2.
Tensor dense_ffn_forward(Graph& g, const Tensor& x, const DenseFfn& ffn, double inner_dropout,
                         bool training, Rng& rng);

enum class ScheduleShape { Linear, Doubling, Fixed };

/// Training-time expert count: grows from k_start to k_end over total_steps.
struct KSchedule {
    std::size_t k_start = 1;
    std::size_t k_end = 1;
    std::uint64_t total_steps = 0;
    ScheduleShape shape = ScheduleShape::Linear;

    /// The 1 → N progressive schedule of the given shape.
    static KSchedule progressive(std::size_t n_experts, std::uint64_t total_steps,
                                 ScheduleShape shape = ScheduleShape::Linear);
    static KSchedule fixed(std::size_t k);
};

/// Linear: k_start + floor((k_end − k_start)·step / total_steps).
/// Doubling: powers of two up to k_end over equal stages.
/// Either way clamped to k_end from total_steps on.
std::size_t current_k(const KSchedule& schedule, std::uint64_t step);

struct LayerOutput {
    Tensor y;
    std::optional<BatchGating> gating;  // empty for dense strategies
};

/// The feedforward half of a decoder layer under one routing strategy.
class FeedForwardBlock {
public:
    FeedForwardBlock() = default;
    FeedForwardBlock(routing::StrategyKind kind, Rng& init_rng, std::size_t d_model,
                     std::size_t inner_dim, std::size_t n_experts, double dropout,
                     routing::RouterOptions options = {});

    routing::StrategyKind kind() const { return kind_; }
    routing::Router& router() { return router_; }
    const routing::Router& router() const { return router_; }
    ExpertBank& bank() { return bank_; }
    const ExpertBank& bank() const { return bank_; }
    DenseFfn& dense() { return dense_; }
    const DenseFfn& dense() const { return dense_; }
    double dropout() const { return dropout_; }

private:
    routing::StrategyKind kind_ = routing::StrategyKind::Dense;
    routing::Router router_;
    ExpertBank bank_;
    DenseFfn dense_;
    double dropout_ = 0.0;
};

/// Dispatches by strategy: the dense kinds run the unsplit FFN (DenseDropout
/// with dropout on its hidden layer); the others gate and combine experts.
LayerOutput layer_forward(Graph& g, const Tensor& h, FeedForwardBlock& block, std::size_t k,
                          Rng& rng, bool training);

}  // namespace smoelab::moe
