#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "smoelab/errors.hpp"
#include "smoelab/io.hpp"
#include "smoelab/training.hpp"
#include "support/synthetic_corpus.hpp"

using namespace smoelab;
using namespace smoelab::train;
using routing::StrategyKind;
namespace fs = std::filesystem;

namespace {

RunConfig tiny(StrategyKind kind)
{
    RunConfig c = preset("desk");
    c.model.n_layers = 1;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.inner_dim = 32;
    c.model.n_experts = 4;
    c.model.max_seq_len = 32;
    c.model.router_embedding_dim = 8;
    c.model.hypernet_inner_dim = 8;
    c.model.strategy = kind;
    c.train.seq_len = 32;
    c.finetune.max_len = 32;
    c.train.batch_size = 4;
    c.train.iterations = 24;
    c.train.eval_ks = {1, 4};
    c.train.eval_batches = 2;
    return c;
}

const data::Corpus& corpus()
{
    static const data::Corpus c = data::ingest_text(smoelab::testing::synthetic_corpus(40000), data::DatasetKind::CharLm);
    return c;
}

LmBatcher batcher_for(const RunConfig& c)
{
    return LmBatcher(data::split_tokens(corpus(), corpus().manifest.train), c.train.seq_len, c.train.batch_size,
                     c.model.seed);
}

fs::path scratch(const std::string& name)
{
    fs::path p = fs::temp_directory_path() / ("smoelab_train_" + name);
    fs::remove_all(p);
    return p;
}

const std::vector<StrategyKind> kAll = {StrategyKind::Dense,       StrategyKind::DenseDropout,
                                        StrategyKind::SMoE,        StrategyKind::SMoEDropout,
                                        StrategyKind::HyperRouter, StrategyKind::THOR};

std::vector<double> values_of(const model::LanguageModel& m, const std::string& prefix)
{
    std::vector<double> out;
    for (const auto& p : m.parameters())
        if (p.name.find(prefix) != std::string::npos)
            out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
    return out;
}

}  // namespace

TEST(Batcher, CoversEachChunkOncePerEpoch)
{
    std::vector<std::uint32_t> tokens(1 + 10 * 8);
    for (std::size_t i = 0; i < tokens.size(); ++i)
        tokens[i] = static_cast<std::uint32_t>(i);
    LmBatcher b(tokens, 8, 2, 7);
    ASSERT_EQ(b.chunks(), 10u);
    std::vector<int> seen(10, 0);
    std::vector<std::int32_t> in, tg;
    for (std::uint64_t step = 0; step < 5; ++step) {
        b.fill(step, in, tg);
        for (std::size_t r = 0; r < 2; ++r) {
            EXPECT_EQ(in[r * 8] % 8, 0);
            ++seen[in[r * 8] / 8];
            for (std::size_t t = 0; t < 8; ++t)
                EXPECT_EQ(tg[r * 8 + t], in[r * 8 + t] + 1);
        }
    }
    for (int s : seen)
        EXPECT_EQ(s, 1);
    std::vector<std::int32_t> again, tg2;
    b.fill(3, again, tg2);
    b.fill(3, in, tg);
    EXPECT_EQ(in, again);
    EXPECT_THROW(LmBatcher(std::span(tokens).first(20), 8, 3, 0), DataError);
}

TEST(Pretrain, ZeroIterationsWritesInitialCheckpointOnly)
{
    RunConfig c = tiny(StrategyKind::HyperRouter);
    c.train.iterations = 0;
    const fs::path dir = scratch("zero");
    PretrainSummary s = pretrain(c, corpus(), {dir.string(), true});
    ASSERT_TRUE(fs::exists(dir / "checkpoint.bin"));
    auto fresh = init_pretrain(c);
    auto loaded = load_model(Checkpoint::load((dir / "checkpoint.bin").string()));
    EXPECT_EQ(values_of(*loaded, ""), values_of(*fresh.model, ""));
    EXPECT_TRUE(s.log.select("train", "loss").empty());
}

TEST(Pretrain, IdenticalConfigsGiveIdenticalCheckpoints)
{
    for (auto kind : kAll) {
        RunConfig c = tiny(kind);
        TrainState a = init_pretrain(c), b = init_pretrain(c);
        MetricsLog la, lb;
        pretrain_steps(a, batcher_for(c), 12, la);
        pretrain_steps(b, batcher_for(c), 12, lb);
        EXPECT_EQ(a.to_checkpoint().serialize(), b.to_checkpoint().serialize()) << routing::to_string(kind);
        EXPECT_EQ(la.to_csv(), lb.to_csv());
    }
}

TEST(Pretrain, ResumeMatchesUninterrupted)
{
    for (auto kind : kAll) {
        RunConfig c = tiny(kind);
        TrainState straight = init_pretrain(c);
        MetricsLog log;
        pretrain_steps(straight, batcher_for(c), 20, log);

        TrainState first = init_pretrain(c);
        pretrain_steps(first, batcher_for(c), 9, log);
        const std::string bytes = first.to_checkpoint().serialize();
        TrainState resumed = TrainState::from_checkpoint(Checkpoint::deserialize(bytes));
        EXPECT_EQ(resumed.step, 9u);
        pretrain_steps(resumed, batcher_for(c), 20, log);
        EXPECT_EQ(resumed.to_checkpoint().serialize(), straight.to_checkpoint().serialize())
            << routing::to_string(kind);
    }
}

TEST(Pretrain, OutputDirectoryResume)
{
    RunConfig c = tiny(StrategyKind::SMoE);
    c.train.checkpoint_every = 8;
    const fs::path a = scratch("dir_a"), b = scratch("dir_b");
    TrainState straight;
    pretrain(c, corpus(), {a.string(), true}, &straight);

    // Interrupt by running a shorter job into the same directory, then
    // restore the original iteration count by editing the checkpoint.
    TrainState partial = init_pretrain(c);
    MetricsLog log;
    pretrain_steps(partial, batcher_for(c), 8, log);
    fs::create_directories(b);
    partial.to_checkpoint().save((b / "checkpoint.bin").string());
    write_file_atomic((b / "metrics.csv").string(), log.to_csv());
    TrainState resumed;
    PretrainSummary s = pretrain(c, corpus(), {b.string(), true}, &resumed);
    EXPECT_EQ(resumed.to_checkpoint().serialize(), straight.to_checkpoint().serialize());
    EXPECT_EQ(read_file((a / "metrics.csv").string()), read_file((b / "metrics.csv").string()));
    EXPECT_EQ(s.log.select("train", "loss").size(), c.train.iterations);

    RunConfig other = c;
    other.train.lr = 1e-3;
    EXPECT_THROW(pretrain(other, corpus(), {b.string(), true}), ContractError);
}

TEST(Pretrain, FrozenParametersStayFixed)
{
    RunConfig c = tiny(StrategyKind::SMoEDropout);
    c.train.iterations = 40;
    TrainState s = init_pretrain(c);
    const auto router0 = values_of(*s.model, "ffn.router.");
    MetricsLog log;
    pretrain_steps(s, batcher_for(c), 40, log);
    EXPECT_EQ(values_of(*s.model, "ffn.router."), router0);
    for (const auto& slot : s.optimizer->slots())
        EXPECT_EQ(slot.name.find("router."), std::string::npos);

    c.model.strategy = StrategyKind::HyperRouter;
    TrainState h = init_pretrain(c);
    const auto hyper0 = values_of(*h.model, "hypernet");
    const auto e0 = values_of(*h.model, "router_embedding");
    const auto census0 = model::count_params(*h.model);
    pretrain_steps(h, batcher_for(c), 40, log);
    EXPECT_EQ(values_of(*h.model, "hypernet"), hyper0);
    const auto e1 = values_of(*h.model, "router_embedding");
    double delta = 0.0;
    for (std::size_t i = 0; i < e0.size(); ++i)
        delta += (e1[i] - e0[i]) * (e1[i] - e0[i]);
    EXPECT_GT(std::sqrt(delta), 0.0);
    const auto census1 = model::count_params(*h.model);
    EXPECT_EQ(census0.trainable(), census1.trainable());
    EXPECT_EQ(census0.frozen(), census1.frozen());
    for (const auto& slot : h.optimizer->slots())
        EXPECT_EQ(slot.name.find("hypernet"), std::string::npos);
}

TEST(Pretrain, LoggedKFollowsSchedule)
{
    for (auto kind : {StrategyKind::SMoE, StrategyKind::SMoEDropout, StrategyKind::HyperRouter, StrategyKind::THOR}) {
        RunConfig c = tiny(kind);
        c.train.iterations = 16;
        TrainState s = init_pretrain(c);
        MetricsLog log;
        pretrain_steps(s, batcher_for(c), 16, log);
        const auto rows = log.select("train", "loss");
        ASSERT_EQ(rows.size(), 16u);
        for (const auto& r : rows)
            EXPECT_EQ(r.k, moe::current_k(c.k_schedule(), r.step));
        EXPECT_EQ(rows.front().k, 1u);
        EXPECT_EQ(rows.back().k, 3u);  // 1 + floor(3 * 15 / 16)
    }
}

TEST(Evaluate, UntrainedByteModelNearEightBits)
{
    RunConfig c = preset("desk");
    c.model.n_layers = 1;
    TrainState s = init_pretrain(c);
    const auto valid = data::split_tokens(corpus(), corpus().manifest.valid);
    LmEval e = evaluate_lm(*s.model, valid, 128, 8, 8);
    EXPECT_NEAR(e.bpc, 8.0, 0.1);
    EXPECT_NEAR(e.perplexity, std::exp(e.loss), 1e-9);
    LmEval again = evaluate_lm(*s.model, valid, 128, 8, 8);
    EXPECT_EQ(e.loss, again.loss);
    EXPECT_EQ(s.model->mode(), model::Mode::Train);
}

TEST(Finetune, SeparableDatasetAtFullK)
{
    RunConfig c = preset("desk");
    const data::Corpus cls =
        data::ingest_text(smoelab::testing::separable_classification(800), data::DatasetKind::Classification);
    TrainState base = init_pretrain(c);
    const Checkpoint pretrained = base.to_checkpoint();
    FinetuneSummary s = finetune(c, cls, pretrained, {});
    ASSERT_EQ(s.train_accuracy.size(), 3u);
    EXPECT_GT(s.train_accuracy.back(), 0.95);
    for (const auto& r : s.log.select("train", "loss"))
        EXPECT_EQ(r.k, c.model.n_experts);
}

TEST(Finetune, ResumeMidEpochMatchesUninterrupted)
{
    RunConfig c = tiny(StrategyKind::HyperRouter);
    c.finetune.batch_size = 8;
    c.finetune.max_len = 16;
    const data::Corpus cls =
        data::ingest_text(smoelab::testing::separable_classification(60), data::DatasetKind::Classification);
    const auto train = std::span(cls.records).first(cls.manifest.train.size());
    const Checkpoint pretrained = init_pretrain(c).to_checkpoint();
    ClassBatcher batcher(train, 8, 16, c.model.seed);
    ASSERT_EQ(batcher.steps_per_epoch(), 7u);

    TrainState straight = init_finetune(c, pretrained, 2);
    MetricsLog log;
    finetune_steps(straight, batcher, train, {}, 14, log);

    TrainState first = init_finetune(c, pretrained, 2);
    finetune_steps(first, batcher, train, {}, 4, log);
    TrainState resumed = TrainState::from_checkpoint(Checkpoint::deserialize(first.to_checkpoint().serialize()));
    EXPECT_EQ(resumed.phase, Phase::Finetune);
    finetune_steps(resumed, batcher, train, {}, 14, log);
    EXPECT_EQ(resumed.to_checkpoint().serialize(), straight.to_checkpoint().serialize());
}

TEST(Finetune, ArchitectureMismatchIsAContractError)
{
    RunConfig c = tiny(StrategyKind::SMoE);
    const Checkpoint pretrained = init_pretrain(c).to_checkpoint();
    RunConfig other = c;
    other.model.n_experts = 2;
    other.train.eval_ks = {1, 2};
    EXPECT_THROW(init_finetune(other, pretrained, 2), ContractError);
    other = c;
    other.model.strategy = StrategyKind::HyperRouter;
    EXPECT_THROW(init_finetune(other, pretrained, 2), ContractError);
}

TEST(MetricsLog, CsvRoundTrip)
{
    MetricsLog log;
    log.add(0, 1, "train", "bpc", 7.123456789012345);
    log.add(5, 8, "valid", "bpc", 2.5);
    EXPECT_EQ(log.to_csv().substr(0, 26), "step,k,split,metric,value\n");
    MetricsLog back = MetricsLog::from_csv(log.to_csv());
    EXPECT_EQ(back.to_csv(), log.to_csv());
    back.truncate_from(5);
    EXPECT_EQ(back.rows().size(), 1u);
}
