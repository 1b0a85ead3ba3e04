#include "smoelab/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "smoelab/errors.hpp"
#include "smoelab/io.hpp"
#include "smoelab/ops.hpp"
#include "smoelab/routing.hpp"

namespace smoelab::train {

namespace {

constexpr std::uint64_t kTrainTag = 0x747261696e;  // "train"
constexpr std::uint64_t kBatchTag = 0x6261746368;  // "batch"
constexpr std::uint64_t kEvalTag = 0x6576616c;     // "eval"
constexpr std::uint64_t kHeadTag = 0x68656164;     // "head"

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed)
{
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i)
        p[i] = i;
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i)
        std::swap(p[i - 1], p[rng.below(i)]);
    return p;
}

double current_lr(const RunConfig& c, double base, std::uint64_t step, std::uint64_t total)
{
    if (!c.train.cosine_decay || total == 0)
        return base;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void copy_params(const Checkpoint& ckpt, model::LanguageModel& m)
{
    for (const auto& p : m.parameters()) {
        const TensorRecord* r = ckpt.find(p.name);
        if (!r)
            throw DataError("checkpoint lacks parameter " + p.name);
        if (r->shape != p.tensor.shape())
            throw DataError("checkpoint shape mismatch for " + p.name + ": " + diff::to_string(r->shape) +
                            " vs " + diff::to_string(p.tensor.shape()));
        diff::Tensor t = p.tensor;
        std::copy(r->values.begin(), r->values.end(), t.values().begin());
    }
}

const std::vector<std::string> kArchitectureKeys = {
    "model.layers",     "model.d_model",     "model.heads",    "model.inner_dim",
    "model.experts",    "model.vocab_size",  "model.max_seq_len", "model.strategy",
    "model.router_embedding_dim", "model.hypernet_inner_dim",
};

std::string csv_double(double v)
{
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

}  // namespace

void MetricsLog::add(std::uint64_t step, std::size_t k, std::string split, std::string metric, double value)
{
    rows_.push_back({step, k, std::move(split), std::move(metric), value});
}

std::vector<MetricRow> MetricsLog::select(const std::string& split, const std::string& metric) const
{
    std::vector<MetricRow> out;
    for (const auto& r : rows_)
        if (r.split == split && r.metric == metric)
            out.push_back(r);
    return out;
}

void MetricsLog::truncate_from(std::uint64_t step)
{
    std::erase_if(rows_, [step](const MetricRow& r) { return r.step >= step; });
}

std::string MetricsLog::to_csv() const
{
    std::string out = "step,k,split,metric,value\n";
    for (const auto& r : rows_)
        out += std::to_string(r.step) + "," + std::to_string(r.k) + "," + r.split + "," + r.metric + "," +
               csv_double(r.value) + "\n";
    return out;
}

MetricsLog MetricsLog::from_csv(const std::string& text)
{
    MetricsLog log;
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::istringstream ls(line);
        std::string step, k, split, metric, value;
        std::getline(ls, step, ',');
        std::getline(ls, k, ',');
        std::getline(ls, split, ',');
        std::getline(ls, metric, ',');
        std::getline(ls, value);
        try {
            log.add(std::stoull(step), std::stoull(k), split, metric, std::stod(value));
        } catch (const std::exception&) {
            throw DataError("bad metrics line: " + line);
        }
    }
    return log;
}

LmBatcher::LmBatcher(std::span<const std::uint32_t> tokens, std::size_t seq_len, std::size_t batch,
                     std::uint64_t seed)
    : tokens_(tokens), seq_len_(seq_len), batch_(batch),
      n_chunks_(tokens.size() > 1 ? (tokens.size() - 1) / seq_len : 0), seed_(seed)
{
    if (n_chunks_ < batch_)
        throw DataError("dataset has " + std::to_string(tokens.size()) + " tokens, fewer than one batch of " +
                        std::to_string(batch_) + " x " + std::to_string(seq_len_ + 1));
}

const std::vector<std::size_t>& LmBatcher::permutation(std::uint64_t epoch) const
{
    if (epoch != cached_epoch_) {
        perm_ = shuffled(n_chunks_, derive_seed(derive_seed(seed_, kBatchTag), epoch));
        cached_epoch_ = epoch;
    }
    return perm_;
}

void LmBatcher::fill(std::uint64_t step, std::vector<std::int32_t>& inputs,
                     std::vector<std::int32_t>& targets) const
{
    inputs.resize(batch_ * seq_len_);
    targets.resize(batch_ * seq_len_);
    for (std::size_t b = 0; b < batch_; ++b) {
        const std::uint64_t i = step * batch_ + b;
        const std::size_t chunk = permutation(i / n_chunks_)[i % n_chunks_];
        const std::uint32_t* src = tokens_.data() + chunk * seq_len_;
        for (std::size_t t = 0; t < seq_len_; ++t) {
            inputs[b * seq_len_ + t] = static_cast<std::int32_t>(src[t]);
            targets[b * seq_len_ + t] = static_cast<std::int32_t>(src[t + 1]);
        }
    }
}

ClassBatch make_class_batch(std::span<const data::Record> records, std::span<const std::size_t> order,
                            std::size_t max_len)
{
    ClassBatch b;
    b.batch = order.size();
    for (auto i : order)
        b.seq_len = std::max(b.seq_len, std::min(max_len, records[i].ids.size()));
    b.seq_len = std::max<std::size_t>(b.seq_len, 1);
    b.tokens.assign(b.batch * b.seq_len, 0);
    for (std::size_t r = 0; r < b.batch; ++r) {
        const auto& rec = records[order[r]];
        const std::size_t len = std::max<std::size_t>(1, std::min(max_len, rec.ids.size()));
        for (std::size_t t = 0; t < len && t < rec.ids.size(); ++t)
            b.tokens[r * b.seq_len + t] = static_cast<std::int32_t>(rec.ids[t]);
        b.lengths.push_back(len);
        b.labels.push_back(static_cast<std::int32_t>(rec.label));
    }
    return b;
}

ClassBatcher::ClassBatcher(std::span<const data::Record> records, std::size_t batch, std::size_t max_len,
                           std::uint64_t seed)
    : records_(records), batch_(batch), max_len_(max_len),
      steps_per_epoch_((records.size() + batch - 1) / batch), seed_(seed)
{
    if (records.empty())
        throw DataError("no classification records to train on");
}

ClassBatch ClassBatcher::get(std::uint64_t step) const
{
    const std::uint64_t epoch = step / steps_per_epoch_;
    const std::size_t pos = step % steps_per_epoch_;
    const auto perm = shuffled(records_.size(), derive_seed(derive_seed(seed_, kBatchTag), epoch));
    const std::size_t begin = pos * batch_, end = std::min(records_.size(), begin + batch_);
    return make_class_batch(records_, std::span(perm).subspan(begin, end - begin), max_len_);
}

Checkpoint TrainState::to_checkpoint() const
{
    Checkpoint c;
    c.config_text = config.canonical_text() + "\n[state]\n";
    c.config_text += std::string("phase = ") + (phase == Phase::Pretrain ? "pretrain" : "finetune") + "\n";
    c.config_text += "step = " + std::to_string(step) + "\n";
    c.config_text += "n_classes = " + std::to_string(model->n_classes()) + "\n";
    c.config_text += "adam_steps = " + std::to_string(optimizer->steps()) + "\n";
    c.config_text += "rng = " + rng.state() + "\n";
    for (const auto& p : model->parameters()) {
        TensorRecord r{p.name, p.tensor.shape(), static_cast<std::uint8_t>(p.trainable ? kTrainable : 0),
                       std::vector<double>(p.tensor.values().begin(), p.tensor.values().end())};
        c.records.push_back(std::move(r));
    }
    for (const auto& s : optimizer->slots()) {
        c.records.push_back({"adam_m." + s.name, s.param.shape(), kOptimizerMoment, s.m});
        c.records.push_back({"adam_v." + s.name, s.param.shape(), kOptimizerMoment, s.v});
    }
    return c;
}

RunConfig checkpoint_config(const Checkpoint& ckpt)
{
    RunConfig config;
    for (const auto& [k, v] : parse_key_values(ckpt.config_text))
        if (!k.starts_with("state."))
            set_key(config, k, v);
    config.validate();
    return config;
}

TrainState TrainState::from_checkpoint(const Checkpoint& ckpt)
{
    TrainState s;
    s.config = checkpoint_config(ckpt);
    std::size_t n_classes = 0;
    std::uint64_t adam_steps = 0;
    for (const auto& [k, v] : parse_key_values(ckpt.config_text)) {
        if (k == "state.phase")
            s.phase = v == "finetune" ? Phase::Finetune : Phase::Pretrain;
        else if (k == "state.step")
            s.step = std::stoull(v);
        else if (k == "state.n_classes")
            n_classes = std::stoull(v);
        else if (k == "state.adam_steps")
            adam_steps = std::stoull(v);
        else if (k == "state.rng")
            s.rng.set_state(v);
    }
    s.model = std::make_unique<model::LanguageModel>(s.config.model);
    if (n_classes > 0) {
        Rng head_rng(0);
        s.model->attach_classifier(n_classes, head_rng);
    }
    copy_params(ckpt, *s.model);
    s.optimizer = std::make_unique<Adam>(s.model->parameters());
    s.optimizer->set_steps(adam_steps);
    for (auto& slot : s.optimizer->slots()) {
        const TensorRecord* m = ckpt.find("adam_m." + slot.name);
        const TensorRecord* v = ckpt.find("adam_v." + slot.name);
        if (!m || !v || m->values.size() != slot.m.size() || v->values.size() != slot.v.size())
            throw DataError("checkpoint lacks optimizer moments for " + slot.name);
        slot.m = m->values;
        slot.v = v->values;
    }
    return s;
}

std::unique_ptr<model::LanguageModel> load_model(const Checkpoint& ckpt)
{
    return std::move(TrainState::from_checkpoint(ckpt).model);
}

TrainState init_pretrain(const RunConfig& config)
{
    config.validate();
    TrainState s;
    s.config = config;
    s.model = std::make_unique<model::LanguageModel>(config.model);
    s.optimizer = std::make_unique<Adam>(s.model->parameters());
    s.rng = Rng(derive_seed(config.model.seed, kTrainTag));
    return s;
}

std::size_t training_k(const RunConfig& config, std::uint64_t step)
{
    if (!routing::uses_experts(config.model.strategy))
        return config.model.n_experts;
    return moe::current_k(config.k_schedule(), step);
}

double lm_train_step(TrainState& state, const std::vector<std::int32_t>& inputs,
                     const std::vector<std::int32_t>& targets, std::size_t batch, std::size_t seq_len,
                     std::size_t k)
{
    auto& m = *state.model;
    m.set_mode(model::Mode::Train);
    diff::Graph g;
    diff::Tensor logits = m.lm_forward(g, inputs, batch, seq_len, k, state.rng);
    diff::Tensor ce = diff::cross_entropy(g, logits, targets);
    double reported = ce.item();
    diff::Tensor loss = ce;
    if (state.config.model.strategy == routing::StrategyKind::THOR) {
        diff::Tensor logits2 = m.lm_forward(g, inputs, batch, seq_len, k, state.rng);
        diff::Tensor ce2 = diff::cross_entropy(g, logits2, targets);
        reported = 0.5 * (ce.item() + ce2.item());
        loss = diff::scale(g, diff::add(g, ce, ce2), 0.5);
        if (state.config.train.thor_weight > 0)
            loss = diff::add(g, loss, diff::scale(g, routing::thor_consistency_loss(g, logits, logits2),
                                                  state.config.train.thor_weight));
    }
    state.optimizer->zero_grad();
    g.backward(loss);
    state.optimizer->clip_grad_norm(state.config.train.clip_norm);
    const double lr = state.phase == Phase::Pretrain
                          ? current_lr(state.config, state.config.train.lr, state.step, state.config.train.iterations)
                          : state.config.finetune.lr;
    state.optimizer->step(lr);
    state.optimizer->zero_grad();
    ++state.step;
    return reported;
}

void pretrain_steps(TrainState& state, const LmBatcher& batcher, std::uint64_t until, MetricsLog& log,
                    bool word_level)
{
    std::vector<std::int32_t> inputs, targets;
    while (state.step < until) {
        const std::uint64_t step = state.step;
        const std::size_t k = training_k(state.config, step);
        batcher.fill(step, inputs, targets);
        const double loss = lm_train_step(state, inputs, targets, batcher.batch(), batcher.seq_len(), k);
        log.add(step, k, "train", "loss", loss);
        if (word_level)
            log.add(step, k, "train", "perplexity", std::exp(loss));
        else
            log.add(step, k, "train", "bpc", loss / std::numbers::ln2);
    }
}

LmEval evaluate_lm(model::LanguageModel& model, std::span<const std::uint32_t> tokens, std::size_t seq_len,
                   std::size_t batch, std::size_t k, std::size_t max_batches)
{
    LmEval out;
    if (tokens.size() < 2)
        return out;
    const model::Mode previous = model.mode();
    model.set_mode(model::Mode::Eval);
    model.cache_routers();
    Rng rng(derive_seed(model.config().seed, kEvalTag));

    const std::size_t T = std::min(seq_len, tokens.size() - 1);
    const std::size_t windows = (tokens.size() - 1) / T;
    double total = 0.0;
    std::vector<std::int32_t> in, tg;
    std::size_t done_batches = 0;
    for (std::size_t w0 = 0; w0 < windows; w0 += batch) {
        if (max_batches && done_batches == max_batches)
            break;
        const std::size_t B = std::min(batch, windows - w0);
        in.resize(B * T);
        tg.resize(B * T);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t) {
                in[b * T + t] = static_cast<std::int32_t>(tokens[(w0 + b) * T + t]);
                tg[b * T + t] = static_cast<std::int32_t>(tokens[(w0 + b) * T + t + 1]);
            }
        diff::Graph g(false);
        const double ce = diff::cross_entropy(g, model.lm_forward(g, in, B, T, k, rng), tg).item();
        total += ce * static_cast<double>(B * T);
        out.tokens += B * T;
        ++done_batches;
    }
    model.set_mode(previous);
    out.loss = total / static_cast<double>(out.tokens);
    out.bpc = out.loss / std::numbers::ln2;
    out.perplexity = std::exp(out.loss);
    return out;
}

PretrainSummary pretrain(const RunConfig& config, const data::Corpus& corpus, const PretrainOptions& options,
                         TrainState* final_state)
{
    namespace fs = std::filesystem;
    if (corpus.manifest.kind == data::DatasetKind::Classification)
        throw DataError("pretraining needs a language-model dataset");
    if (corpus.manifest.vocab_size > config.model.vocab_size)
        throw ConfigError("dataset vocabulary " + std::to_string(corpus.manifest.vocab_size) +
                          " exceeds model.vocab_size " + std::to_string(config.model.vocab_size));
    const bool word_level = corpus.manifest.kind == data::DatasetKind::WordLm;
    const auto train_tokens = data::split_tokens(corpus, corpus.manifest.train);
    const auto valid_tokens = data::split_tokens(corpus, corpus.manifest.valid);
    LmBatcher batcher(train_tokens, config.train.seq_len, config.train.batch_size, config.model.seed);

    PretrainSummary summary;
    const std::string ckpt_path = options.out_dir.empty() ? "" : (fs::path(options.out_dir) / "checkpoint.bin").string();
    const std::string metrics_path = options.out_dir.empty() ? "" : (fs::path(options.out_dir) / "metrics.csv").string();

    TrainState state;
    if (options.resume && !ckpt_path.empty() && fs::exists(ckpt_path)) {
        state = TrainState::from_checkpoint(Checkpoint::load(ckpt_path));
        if (state.config.canonical_text() != config.canonical_text())
            throw ContractError("existing checkpoint in " + options.out_dir + " was written by a different config");
        if (fs::exists(metrics_path))
            summary.log = MetricsLog::from_csv(read_file(metrics_path));
        summary.log.truncate_from(state.step);
    } else {
        state = init_pretrain(config);
    }
    auto persist = [&] {
        if (ckpt_path.empty())
            return;
        state.to_checkpoint().save(ckpt_path);
        write_file_atomic(metrics_path, summary.log.to_csv());
    };
    if (state.step == 0)
        persist();

    const std::uint64_t total = config.train.iterations;
    const auto metric_name = word_level ? "perplexity" : "bpc";
    while (state.step < total) {
        std::uint64_t next = total;
        for (std::uint64_t every : {config.train.eval_every, config.train.checkpoint_every})
            if (every)
                next = std::min(next, (state.step / every + 1) * every);
        pretrain_steps(state, batcher, next, summary.log, word_level);
        if (config.train.eval_every && state.step % config.train.eval_every == 0 && state.step < total) {
            const std::size_t k = training_k(config, state.step);
            LmEval e = evaluate_lm(*state.model, valid_tokens, config.train.seq_len, config.train.batch_size, k,
                                   config.train.eval_batches);
            summary.log.add(state.step, k, "valid", metric_name, word_level ? e.perplexity : e.bpc);
        }
        if (config.train.checkpoint_every && state.step % config.train.checkpoint_every == 0)
            persist();
    }

    for (std::size_t k : config.train.eval_ks) {
        LmEval e = evaluate_lm(*state.model, valid_tokens, config.train.seq_len, config.train.batch_size, k,
                               config.train.eval_batches);
        summary.eval.emplace_back(k, e);
        summary.log.add(state.step, k, "valid", metric_name, word_level ? e.perplexity : e.bpc);
    }
    persist();

    const auto bpc = summary.log.select("train", "loss");
    if (!bpc.empty()) {
        summary.initial_train_bpc = bpc.front().value / std::numbers::ln2;
        const std::size_t tail = std::min<std::size_t>(50, bpc.size());
        double s = 0.0;
        for (std::size_t i = bpc.size() - tail; i < bpc.size(); ++i)
            s += bpc[i].value;
        summary.final_train_bpc = s / static_cast<double>(tail) / std::numbers::ln2;
    }
    if (final_state)
        *final_state = std::move(state);
    return summary;
}

TrainState init_finetune(const RunConfig& config, const Checkpoint& pretrained, std::size_t n_classes)
{
    config.validate();
    const RunConfig source = checkpoint_config(pretrained);
    for (const auto& key : kArchitectureKeys)
        if (get_key(source, key) != get_key(config, key))
            throw ContractError("architecture mismatch on " + key + ": checkpoint has " + get_key(source, key) +
                                ", config has " + get_key(config, key));
    TrainState s;
    s.config = config;
    s.phase = Phase::Finetune;
    s.model = std::make_unique<model::LanguageModel>(config.model);
    for (const auto& p : s.model->parameters()) {
        const TensorRecord* r = pretrained.find(p.name);
        if (!r)
            throw DataError("pretrained checkpoint lacks " + p.name);
        diff::Tensor t = p.tensor;
        std::copy(r->values.begin(), r->values.end(), t.values().begin());
    }
    Rng head_rng(derive_seed(config.model.seed, kHeadTag));
    s.model->attach_classifier(n_classes, head_rng);
    s.optimizer = std::make_unique<Adam>(s.model->parameters());
    s.rng = Rng(derive_seed(config.model.seed, kTrainTag));
    return s;
}

double evaluate_classifier(model::LanguageModel& model, std::span<const data::Record> records,
                           std::size_t batch, std::size_t max_len, std::size_t k)
{
    if (records.empty())
        return 0.0;
    const model::Mode previous = model.mode();
    model.set_mode(model::Mode::Eval);
    model.cache_routers();
    Rng rng(derive_seed(model.config().seed, kEvalTag));
    std::size_t correct = 0;
    std::vector<std::size_t> order;
    for (std::size_t i0 = 0; i0 < records.size(); i0 += batch) {
        order.clear();
        for (std::size_t i = i0; i < std::min(records.size(), i0 + batch); ++i)
            order.push_back(i);
        ClassBatch b = make_class_batch(records, order, max_len);
        diff::Graph g(false);
        diff::Tensor logits = model.classify_forward(g, b.tokens, b.batch, b.seq_len, b.lengths, k, rng);
        const std::size_t c = model.n_classes();
        for (std::size_t r = 0; r < b.batch; ++r) {
            auto row = logits.values().subspan(r * c, c);
            const auto best = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
            correct += best == b.labels[r];
        }
    }
    model.set_mode(previous);
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

void finetune_steps(TrainState& state, const ClassBatcher& batcher, std::span<const data::Record> train,
                    std::span<const data::Record> valid, std::uint64_t until, MetricsLog& log)
{
    const auto& c = state.config;
    const std::size_t k = c.model.n_experts;
    while (state.step < until) {
        const std::uint64_t step = state.step;
        ClassBatch b = batcher.get(step);
        auto& m = *state.model;
        m.set_mode(model::Mode::Train);
        diff::Graph g;
        diff::Tensor logits = m.classify_forward(g, b.tokens, b.batch, b.seq_len, b.lengths, k, state.rng);
        diff::Tensor loss = diff::cross_entropy(g, logits, b.labels);
        state.optimizer->zero_grad();
        g.backward(loss);
        state.optimizer->clip_grad_norm(c.train.clip_norm);
        state.optimizer->step(c.finetune.lr);
        state.optimizer->zero_grad();
        ++state.step;
        log.add(step, k, "train", "loss", loss.item());
        if (state.step % batcher.steps_per_epoch() == 0) {
            const double epoch = static_cast<double>(state.step / batcher.steps_per_epoch());
            log.add(step, k, "train", "epoch", epoch);
            log.add(step, k, "train", "accuracy",
                    evaluate_classifier(m, train, c.finetune.batch_size, c.finetune.max_len, k));
            if (!valid.empty())
                log.add(step, k, "valid", "accuracy",
                        evaluate_classifier(m, valid, c.finetune.batch_size, c.finetune.max_len, k));
        }
    }
}

FinetuneSummary finetune(const RunConfig& config, const data::Corpus& corpus, const Checkpoint& pretrained,
                         const PretrainOptions& options, TrainState* final_state)
{
    namespace fs = std::filesystem;
    if (corpus.manifest.kind != data::DatasetKind::Classification)
        throw DataError("finetuning needs a classification dataset");
    const auto& man = corpus.manifest;
    std::span<const data::Record> all(corpus.records);
    const auto train = all.subspan(man.train.begin, man.train.size());
    const auto valid = all.subspan(man.valid.begin, man.valid.size());
    ClassBatcher batcher(train, config.finetune.batch_size, config.finetune.max_len, config.model.seed);

    FinetuneSummary summary;
    const std::string ckpt_path = options.out_dir.empty() ? "" : (fs::path(options.out_dir) / "finetune.bin").string();
    const std::string metrics_path = options.out_dir.empty() ? "" : (fs::path(options.out_dir) / "finetune_metrics.csv").string();

    TrainState state;
    if (options.resume && !ckpt_path.empty() && fs::exists(ckpt_path)) {
        state = TrainState::from_checkpoint(Checkpoint::load(ckpt_path));
        if (fs::exists(metrics_path))
            summary.log = MetricsLog::from_csv(read_file(metrics_path));
        summary.log.truncate_from(state.step);
    } else {
        state = init_finetune(config, pretrained, man.labels.size());
    }
    const std::uint64_t total = batcher.steps_per_epoch() * config.finetune.epochs;
    while (state.step < total) {
        std::uint64_t next = total;
        if (config.train.checkpoint_every)
            next = std::min(next, (state.step / config.train.checkpoint_every + 1) * config.train.checkpoint_every);
        finetune_steps(state, batcher, train, valid, next, summary.log);
        if (!ckpt_path.empty()) {
            state.to_checkpoint().save(ckpt_path);
            write_file_atomic(metrics_path, summary.log.to_csv());
        }
    }
    for (const auto& r : summary.log.select("train", "accuracy"))
        summary.train_accuracy.push_back(r.value);
    for (const auto& r : summary.log.select("valid", "accuracy"))
        summary.valid_accuracy.push_back(r.value);
    if (final_state)
        *final_state = std::move(state);
    return summary;
}

}  // namespace smoelab::train
