#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smoelab/checkpoint.hpp"
#include "smoelab/config.hpp"
#include "smoelab/data.hpp"
#include "smoelab/model.hpp"
#include "smoelab/optimizer.hpp"
#include "smoelab/rng.hpp"

namespace smoelab::train {

struct MetricRow {
    std::uint64_t step;
    std::size_t k;
    std::string split;
    std::string metric;
    double value;
};

/// Rows of `step,k,split,metric,value`.
class MetricsLog {
public:
    void add(std::uint64_t step, std::size_t k, std::string split, std::string metric, double value);
    const std::vector<MetricRow>& rows() const { return rows_; }
    std::vector<MetricRow> select(const std::string& split, const std::string& metric) const;
    /// Drops rows logged at or after `step`; used when resuming.
    void truncate_from(std::uint64_t step);

    std::string to_csv() const;
    static MetricsLog from_csv(const std::string& text);

private:
    std::vector<MetricRow> rows_;
};

/// Contiguous (seq_len + 1)-token chunks, reshuffled every epoch from the
/// seed. A batch is a pure function of the step so resumed runs see the
/// same data.
class LmBatcher {
public:
    /// Throws DataError if the tokens hold fewer chunks than one batch.
    LmBatcher(std::span<const std::uint32_t> tokens, std::size_t seq_len, std::size_t batch,
              std::uint64_t seed);

    std::size_t chunks() const { return n_chunks_; }
    std::size_t batch() const { return batch_; }
    std::size_t seq_len() const { return seq_len_; }

    void fill(std::uint64_t step, std::vector<std::int32_t>& inputs, std::vector<std::int32_t>& targets) const;

private:
    const std::vector<std::size_t>& permutation(std::uint64_t epoch) const;

    std::span<const std::uint32_t> tokens_;
    std::size_t seq_len_, batch_, n_chunks_;
    std::uint64_t seed_;
    mutable std::uint64_t cached_epoch_ = UINT64_MAX;
    mutable std::vector<std::size_t> perm_;
};

struct ClassBatch {
    std::vector<std::int32_t> tokens;  // [batch × seq_len], zero padded
    std::vector<std::size_t> lengths;
    std::vector<std::int32_t> labels;
    std::size_t batch = 0, seq_len = 0;
};

/// Truncates records to max_len and right-pads each batch to its longest.
ClassBatch make_class_batch(std::span<const data::Record> records, std::span<const std::size_t> order,
                            std::size_t max_len);

class ClassBatcher {
public:
    ClassBatcher(std::span<const data::Record> records, std::size_t batch, std::size_t max_len,
                 std::uint64_t seed);

    std::size_t steps_per_epoch() const { return steps_per_epoch_; }
    ClassBatch get(std::uint64_t step) const;

private:
    std::span<const data::Record> records_;
    std::size_t batch_, max_len_, steps_per_epoch_;
    std::uint64_t seed_;
};

enum class Phase { Pretrain, Finetune };

/// Everything a checkpoint captures.
struct TrainState {
    RunConfig config;
    std::unique_ptr<model::LanguageModel> model;
    std::unique_ptr<Adam> optimizer;
    Rng rng;
    std::uint64_t step = 0;
    Phase phase = Phase::Pretrain;

    Checkpoint to_checkpoint() const;
    static TrainState from_checkpoint(const Checkpoint& ckpt);
};

TrainState init_pretrain(const RunConfig& config);

/// k used by a training step: the schedule for expert models, N otherwise.
std::size_t training_k(const RunConfig& config, std::uint64_t step);

/// One optimizer step on a language-model batch. Returns the mean token
/// cross-entropy (averaged over both THOR passes).
double lm_train_step(TrainState& state, const std::vector<std::int32_t>& inputs,
                     const std::vector<std::int32_t>& targets, std::size_t batch, std::size_t seq_len,
                     std::size_t k);

/// Runs steps until state.step == until, logging loss and bpc (or
/// perplexity) for each.
void pretrain_steps(TrainState& state, const LmBatcher& batcher, std::uint64_t until, MetricsLog& log,
                    bool word_level = false);

struct LmEval {
    double loss = 0.0;
    double bpc = 0.0;
    double perplexity = 0.0;
    std::size_t tokens = 0;
};

/// Mean cross-entropy over non-overlapping windows in split order, in eval
/// mode with cached routers. The model's mode is restored afterwards.
/// max_batches = 0 covers the whole split.
LmEval evaluate_lm(model::LanguageModel& model, std::span<const std::uint32_t> tokens, std::size_t seq_len,
                   std::size_t batch, std::size_t k, std::size_t max_batches = 0);

struct PretrainOptions {
    std::string out_dir;  // empty: nothing written
    bool resume = true;
};

struct PretrainSummary {
    double initial_train_bpc = 0.0;
    double final_train_bpc = 0.0;
    std::vector<std::pair<std::size_t, LmEval>> eval;  // per eval_ks entry on the valid split
    MetricsLog log;
};

/// Full pretraining run. Writes metrics.csv and checkpoint.bin under
/// out_dir and resumes from an existing checkpoint when asked.
PretrainSummary pretrain(const RunConfig& config, const data::Corpus& corpus, const PretrainOptions& options,
                         TrainState* final_state = nullptr);

/// Loads the pretrained trunk, attaches a fresh classifier head and new
/// optimizer. Throws ContractError when the architecture differs.
TrainState init_finetune(const RunConfig& config, const Checkpoint& pretrained, std::size_t n_classes);

/// Steps until state.step == until with k = N. At each epoch boundary logs
/// train accuracy (and valid accuracy when a valid set is given).
void finetune_steps(TrainState& state, const ClassBatcher& batcher, std::span<const data::Record> train,
                    std::span<const data::Record> valid, std::uint64_t until, MetricsLog& log);

double evaluate_classifier(model::LanguageModel& model, std::span<const data::Record> records,
                           std::size_t batch, std::size_t max_len, std::size_t k);

struct FinetuneSummary {
    std::vector<double> train_accuracy;  // per epoch
    std::vector<double> valid_accuracy;
    MetricsLog log;
};

FinetuneSummary finetune(const RunConfig& config, const data::Corpus& corpus, const Checkpoint& pretrained,
                         const PretrainOptions& options, TrainState* final_state = nullptr);

/// Restores model weights from a checkpoint (no optimizer state).
std::unique_ptr<model::LanguageModel> load_model(const Checkpoint& ckpt);

/// Splits a checkpoint's text block into the run config and the [state] section.
RunConfig checkpoint_config(const Checkpoint& ckpt);

}  // namespace smoelab::train
