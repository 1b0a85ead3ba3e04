#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smoelab/graph.hpp"
#include "smoelab/rng.hpp"
#include "smoelab/tensor.hpp"

namespace smoelab::routing {

using diff::Graph;
using diff::Tensor;

/// Linear gating parameters: logits = weight · h + bias.
struct RouterParams {
    Tensor weight;  // [N × d]
    Tensor bias;    // [N]

    std::size_t experts() const { return weight.dim(0); }
    std::size_t dim() const { return weight.dim(1); }
};

/// Trainable per-layer vector from which the router is generated.
struct RouterEmbedding {
    Tensor e;  // [embedding_dim]
};

/// Frozen two-layer perceptron mapping a router embedding to RouterParams.
struct HypernetworkSpec {
    Tensor layer1_weight;  // [inner × embedding_dim]
    Tensor layer1_bias;    // [inner]
    Tensor layer2_weight;  // [(N·d + N) × inner]
    Tensor layer2_bias;    // [N·d + N]
    std::size_t n_experts = 0;
    std::size_t d_model = 0;

    /// Uniform ±1/√fan_in for every weight and bias, all excluded from training.
    static HypernetworkSpec init(Rng& rng, std::size_t n_experts, std::size_t d_model,
                                 std::size_t embedding_dim = 256, std::size_t inner_dim = 256);

    std::size_t output_size() const { return n_experts * d_model + n_experts; }
    std::size_t parameter_count() const;
};

/// Single-token gating result.
struct GatingOutput {
    std::vector<double> gates;        // length N, exactly k nonzero
    std::vector<std::size_t> selected;  // sorted, size k
    std::vector<double> dense_gates;  // softmax before masking
};

/// Gating for a block of M tokens. `gates` carries the graph connection used
/// by the expert combination; `dense` is the unmasked softmax.
struct BatchGating {
    std::size_t tokens = 0;
    std::size_t experts = 0;
    std::size_t k = 0;
    Tensor gates;                        // [M × N]
    Tensor dense;                        // [M × N]
    std::vector<std::uint32_t> selected;  // M × k, ascending within each token

    std::span<const std::uint32_t> selected_for(std::size_t token) const
    {
        return std::span<const std::uint32_t>(selected).subspan(token * k, k);
    }
    GatingOutput token(std::size_t i) const;
};

/// Indices of the k largest entries, ties going to the lower index, returned
/// in ascending index order.
std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k);

/// TopK(softmax(weight·h + bias), k) for every row of h[M×d]. Masked entries
/// are exact zeros and receive no gradient. Gates are left unnormalized
/// unless `renormalize` is set.
BatchGating gate(Graph& g, const Tensor& h, const RouterParams& router, std::size_t k,
                 bool renormalize = false);

/// Single-token convenience form; h is [d].
GatingOutput gate(const Tensor& h, const RouterParams& router, std::size_t k);

/// W_r = H(e): layer2(relu(layer1(e))) split row-major into weight then bias.
RouterParams generate_router(Graph& g, const HypernetworkSpec& hypernet, const RouterEmbedding& e);

/// Random router with entries uniform in ±1/√d, not trainable.
RouterParams init_frozen_router(Rng& rng, std::size_t n_experts, std::size_t d_model);

/// Trainable router with the same initialization range.
RouterParams init_trainable_router(Rng& rng, std::size_t n_experts, std::size_t d_model);

RouterEmbedding init_router_embedding(Rng& rng, std::size_t embedding_dim = 256);

/// k experts uniformly without replacement, each gated 1/k.
GatingOutput thor_select(Rng& rng, std::size_t n_experts, std::size_t k);
BatchGating thor_select(Rng& rng, std::size_t tokens, std::size_t n_experts, std::size_t k);

/// Symmetric KL between row-wise softmax(y1) and softmax(y2), averaged over rows.
Tensor thor_consistency_loss(Graph& g, const Tensor& y1, const Tensor& y2);

enum class StrategyKind { Dense, DenseDropout, SMoE, SMoEDropout, HyperRouter, THOR };

std::string_view to_string(StrategyKind kind);
StrategyKind parse_strategy(std::string_view name);
bool uses_experts(StrategyKind kind);

struct RouterOptions {
    std::size_t embedding_dim = 256;
    std::size_t hypernet_inner_dim = 256;
    bool renormalize_gates = false;
};

/// Per-layer routing state for one strategy.
class Router {
public:
    Router() = default;
    Router(StrategyKind kind, Rng& init_rng, std::size_t n_experts, std::size_t d_model,
           RouterOptions options = {});

    StrategyKind kind() const { return kind_; }
    std::size_t experts() const { return n_experts_; }
    std::size_t d_model() const { return d_model_; }

    /// Gating for h[M×d] at the given k. THOR draws from `rng`; the others
    /// are deterministic given their parameters.
    BatchGating route(Graph& g, const Tensor& h, std::size_t k, Rng& rng);

    /// Parameters used for gating: the stored router, or the hypernetwork
    /// output (from the cache when present).
    RouterParams effective_params(Graph& g);

    /// Stores H(e) so later routes skip the hypernetwork. No-op for strategies
    /// without a hypernetwork.
    void cache();
    void clear_cache() { cached_.reset(); }
    bool cached() const { return cached_.has_value(); }
    std::size_t hypernet_evaluations() const { return hypernet_evals_; }

    const RouterParams& params() const { return params_; }
    RouterParams& params() { return params_; }
    const HypernetworkSpec& hypernet() const { return hypernet_; }
    HypernetworkSpec& hypernet() { return hypernet_; }
    const RouterEmbedding& embedding() const { return embedding_; }
    RouterEmbedding& embedding() { return embedding_; }
    const RouterOptions& options() const { return options_; }

private:
    StrategyKind kind_ = StrategyKind::Dense;
    std::size_t n_experts_ = 0;
    std::size_t d_model_ = 0;
    RouterOptions options_;
    RouterParams params_;
    HypernetworkSpec hypernet_;
    RouterEmbedding embedding_;
    std::optional<RouterParams> cached_;
    std::size_t hypernet_evals_ = 0;
};

}  // namespace smoelab::routing
