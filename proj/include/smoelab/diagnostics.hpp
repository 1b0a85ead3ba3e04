#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smoelab/model.hpp"

namespace smoelab::diagnostics {

/// Shannon entropy in nats.
double entropy(std::span<const double> p);

struct LayerEntropy {
    double mean = 0.0;
    double std = 0.0;
    std::size_t tokens = 0;
};

struct EntropyReport {
    std::vector<LayerEntropy> layers;
    double mean() const;
};

/// Entropy of every token's dense gate distribution, per layer, over
/// non-overlapping windows of the split. Runs in eval mode with cached
/// routers and restores the model's mode. Dense strategies yield no layers.
EntropyReport router_entropy(model::LanguageModel& model, std::span<const std::uint32_t> tokens,
                             std::size_t seq_len, std::size_t batch, std::size_t k,
                             std::size_t max_batches = 0);

/// FLOP counts: 2 per multiply-add, 5 per element for softmax and
/// normalization nonlinearities.
struct FlopsReport {
    double embeddings = 0;
    double projections = 0;  // qkv and attention output
    double attention = 0;    // scores, softmax, weighted values
    double norms = 0;
    double router = 0;
    double experts = 0;
    double output = 0;        // vocabulary projection and its softmax
    double hypernetwork = 0;  // router generation when not cached

    double total() const;
};

/// Dense strategies always count the whole feedforward network. An
/// uncached HyperRouter adds one hypernetwork evaluation per layer.
FlopsReport count_flops(const model::ModelConfig& config, std::size_t k, std::size_t seq_len, std::size_t batch,
                        bool routers_cached = true);

struct GateRow {
    std::size_t layer, position, expert;
    double probability;
};

/// [layers × positions × N] dense gate rows for a sample of batch × seq_len
/// tokens; position runs over the flattened batch.
std::vector<GateRow> gate_distributions(model::LanguageModel& model, std::span<const std::int32_t> sample,
                                        std::size_t batch, std::size_t seq_len, std::size_t k);

std::string gate_table_csv(const std::vector<GateRow>& rows);
std::vector<GateRow> parse_gate_table(const std::string& csv);

/// Writes gate_table_csv atomically; returns the number of rows.
std::size_t export_gate_distributions(model::LanguageModel& model, std::span<const std::int32_t> sample,
                                      std::size_t batch, std::size_t seq_len, std::size_t k,
                                      const std::string& path);

/// Mean per-(layer, position) entropy recomputed from a gate table.
double table_mean_entropy(const std::vector<GateRow>& rows);

}  // namespace smoelab::diagnostics
