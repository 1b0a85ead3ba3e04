#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "smoelab/model.hpp"
#include "smoelab/moe_layer.hpp"

namespace smoelab {

struct ScheduleConfig {
    moe::ScheduleShape shape = moe::ScheduleShape::Linear;
    std::size_t k_start = 1;
    std::size_t k_end = 0;          // 0 means n_experts
    std::uint64_t total_steps = 0;  // 0 means train.iterations
};

struct TrainConfig {
    double lr = 2.5e-4;
    std::size_t batch_size = 22;
    std::size_t seq_len = 512;
    std::uint64_t iterations = 400000;
    double clip_norm = 0.25;  // 0 disables clipping
    bool cosine_decay = false;
    std::uint64_t eval_every = 0;
    std::uint64_t checkpoint_every = 0;
    std::size_t eval_batches = 0;  // 0 evaluates the whole split
    std::vector<std::size_t> eval_ks{1, 2, 4, 8, 16};
    double thor_weight = 1.0;
};

struct FinetuneConfig {
    double lr = 1e-4;
    std::size_t batch_size = 16;
    std::size_t epochs = 3;
    std::size_t max_len = 128;
};

struct DataConfig {
    std::string manifest;
    std::string pretrained;  // checkpoint used by finetune
};

/// Everything a run needs. Parsed from `key = value` text with [section]
/// headers; keys are addressed as section.key in overrides.
struct RunConfig {
    model::ModelConfig model;
    ScheduleConfig schedule;
    TrainConfig train;
    FinetuneConfig finetune;
    DataConfig data;

    /// Throws ConfigError.
    void validate() const;

    /// The k schedule implied by the schedule section and n_experts.
    moe::KSchedule k_schedule() const;

    /// Every key in a fixed order, one per line under section headers.
    std::string canonical_text() const;
    std::uint64_t hash() const;
    /// 16 hex digits of hash().
    std::string hash_hex() const;
};

/// Preset names: "full" (defaults) and "desk".
RunConfig preset(const std::string& name);
std::vector<std::string> preset_names();

/// All addressable keys, e.g. "model.d_model".
std::vector<std::string> config_keys();

/// Sets one dotted key. Unknown keys raise ConfigError listing every valid key.
void set_key(RunConfig& config, const std::string& key, const std::string& value);
std::string get_key(const RunConfig& config, const std::string& key);

/// Parses config text. A `preset` key under [run] is applied before the
/// other keys regardless of position. Overrides are "section.key=value".
RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

/// Splits text into (key, value) pairs, keeping the section prefix. Unknown
/// sections are preserved verbatim so callers can read extra blocks.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

std::uint64_t fnv1a64(const void* data, std::size_t size);
std::uint64_t fnv1a64(const std::string& text);

}  // namespace smoelab
