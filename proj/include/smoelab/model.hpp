#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smoelab/graph.hpp"
#include "smoelab/moe_layer.hpp"
#include "smoelab/rng.hpp"
#include "smoelab/routing.hpp"
#include "smoelab/tensor.hpp"

namespace smoelab::model {

using diff::Graph;
using diff::Tensor;

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 256;
    std::size_t n_heads = 8;
    std::size_t inner_dim = 512;
    std::size_t n_experts = 16;
    double dropout = 0.1;
    std::size_t vocab_size = 256;
    std::size_t max_seq_len = 512;
    routing::StrategyKind strategy = routing::StrategyKind::HyperRouter;
    std::uint64_t seed = 0;
    std::size_t router_embedding_dim = 256;
    std::size_t hypernet_inner_dim = 256;
    bool renormalize_gates = false;

    /// Throws ConfigError on inconsistent sizes.
    void validate() const;
};

enum class Component { Transformer, RouterEmbedding, Router, Hypernetwork, ClassifierHead };

std::string_view to_string(Component c);

/// A named parameter handle. `trainable` records membership in the
/// optimizer's set; frozen tensors never carry gradients.
struct ParamRecord {
    std::string name;
    Tensor tensor;
    Component component;
    bool trainable;
};

struct DecoderLayer {
    Tensor ln1_gain, ln1_offset;
    Tensor qkv_weight, qkv_bias;  // [3d × d], [3d]
    Tensor out_weight, out_bias;  // [d × d], [d]
    Tensor ln2_gain, ln2_offset;
    moe::FeedForwardBlock ffn;
};

enum class Mode { Train, Eval };

/// Per-layer gating collected during a forward pass.
using GateTrace = std::vector<routing::BatchGating>;

/// Decoder-only transformer with strategy-dependent feedforward blocks.
class LanguageModel {
public:
    explicit LanguageModel(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }

    Mode mode() const { return mode_; }
    /// Switching to Train drops any cached routers.
    void set_mode(Mode mode);

    /// tokens is [batch × seq_len] row-major; returns logits [batch·seq_len × V].
    /// Each MoE block routes with k. Dropout and THOR draws use `rng`.
    Tensor lm_forward(Graph& g, std::span<const std::int32_t> tokens, std::size_t batch,
                      std::size_t seq_len, std::size_t k, Rng& rng, GateTrace* trace = nullptr);

    /// Mean-pools the first lengths[b] positions of each sequence and applies
    /// the classifier head; returns [batch × n_classes].
    Tensor classify_forward(Graph& g, std::span<const std::int32_t> tokens, std::size_t batch,
                            std::size_t seq_len, std::span<const std::size_t> lengths,
                            std::size_t k, Rng& rng);

    void attach_classifier(std::size_t n_classes, Rng& rng);
    bool has_classifier() const { return head_weight_.defined(); }
    std::size_t n_classes() const { return has_classifier() ? head_weight_.dim(0) : 0; }

    /// All parameters in a stable order.
    std::vector<ParamRecord> parameters() const;

    /// Stores every layer's generated router. Requires Eval mode.
    void cache_routers();
    std::size_t hypernet_evaluations() const;

    std::size_t n_layers() const { return layers_.size(); }
    DecoderLayer& layer(std::size_t i) { return layers_.at(i); }
    const DecoderLayer& layer(std::size_t i) const { return layers_.at(i); }

private:
    Tensor trunk(Graph& g, std::span<const std::int32_t> tokens, std::size_t batch,
                 std::size_t seq_len, std::size_t k, Rng& rng, GateTrace* trace);

    ModelConfig config_;
    Mode mode_ = Mode::Train;
    Tensor token_embedding_;     // [V × d]
    Tensor position_embedding_;  // [max_seq_len × d]
    std::vector<DecoderLayer> layers_;
    Tensor final_gain_, final_offset_;
    Tensor output_weight_, output_bias_;  // [V × d], [V]
    Tensor head_weight_, head_bias_;      // [n_classes × d], [n_classes]
};

/// Same as LanguageModel::cache_routers().
void cache_routers(LanguageModel& model);

struct ComponentCount {
    Component component;
    std::size_t trainable = 0;
    std::size_t frozen = 0;
    std::size_t generated = 0;
};

/// Parameter census split into trainable, frozen and generated (the
/// hypernetwork's router output, which belongs to neither set).
struct Census {
    std::vector<ComponentCount> components;

    const ComponentCount& at(Component c) const;
    std::size_t trainable() const;
    std::size_t frozen() const;
    std::size_t generated() const;
};

Census count_params(const LanguageModel& model);

}  // namespace smoelab::model
