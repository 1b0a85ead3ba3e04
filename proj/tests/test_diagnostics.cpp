#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "smoelab/diagnostics.hpp"
#include "smoelab/errors.hpp"
#include "smoelab/io.hpp"

using namespace smoelab;
using namespace smoelab::diagnostics;
using routing::StrategyKind;

namespace {

model::ModelConfig small(StrategyKind kind, std::size_t n = 16)
{
    model::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.inner_dim = 32;
    c.n_experts = n;
    c.vocab_size = 64;
    c.max_seq_len = 16;
    c.strategy = kind;
    c.router_embedding_dim = 8;
    c.hypernet_inner_dim = 8;
    return c;
}

std::vector<std::uint32_t> stream(std::size_t n)
{
    std::vector<std::uint32_t> t(n);
    Rng rng(3);
    for (auto& v : t)
        v = static_cast<std::uint32_t>(rng.below(64));
    return t;
}

void zero_router(model::LanguageModel& m)
{
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
        auto& router = m.layer(l).ffn.router();
        for (double& v : router.params().weight.values())
            v = 0.0;
        for (double& v : router.params().bias.values())
            v = 0.0;
    }
}

}  // namespace

TEST(Entropy, Bounds)
{
    EXPECT_NEAR(entropy(std::vector<double>(16, 1.0 / 16)), std::log(16.0), 1e-12);
    EXPECT_EQ(entropy(std::vector<double>{0, 1, 0, 0}), 0.0);
    EXPECT_NEAR(entropy(std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
}

TEST(Entropy, UniformRouterGivesLogN)
{
    model::LanguageModel m(small(StrategyKind::SMoE));
    zero_router(m);
    EntropyReport r = router_entropy(m, stream(200), 16, 4, 2);
    ASSERT_EQ(r.layers.size(), 2u);
    for (const auto& l : r.layers) {
        EXPECT_NEAR(l.mean, std::log(16.0), 1e-9);
        EXPECT_NEAR(l.std, 0.0, 1e-6);
        EXPECT_EQ(l.tokens, 192u);
    }
}

TEST(Entropy, ReportsStayInRange)
{
    for (auto kind : {StrategyKind::SMoE, StrategyKind::SMoEDropout, StrategyKind::HyperRouter, StrategyKind::THOR}) {
        model::LanguageModel m(small(kind, 4));
        EntropyReport r = router_entropy(m, stream(120), 16, 4, 1);
        ASSERT_EQ(r.layers.size(), 2u);
        for (const auto& l : r.layers) {
            EXPECT_GE(l.mean, 0.0);
            EXPECT_LE(l.mean, std::log(4.0) + 1e-12);
        }
        EXPECT_EQ(m.mode(), model::Mode::Train);
    }
    model::LanguageModel dense(small(StrategyKind::Dense));
    EXPECT_TRUE(router_entropy(dense, stream(50), 16, 4, 1).layers.empty());
}

TEST(Entropy, OneHotGatesGiveZero)
{
    model::LanguageModel m(small(StrategyKind::SMoE, 4));
    // Large bias on expert 2 saturates the softmax to an exact one-hot.
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
        auto& p = m.layer(l).ffn.router().params();
        for (double& v : p.weight.values())
            v = 0.0;
        p.bias.values()[2] = 1e4;
    }
    EntropyReport r = router_entropy(m, stream(60), 16, 2, 1);
    for (const auto& l : r.layers)
        EXPECT_EQ(l.mean, 0.0);
}

TEST(Flops, ToyHandCount)
{
    model::ModelConfig c;
    c.n_layers = 1;
    c.d_model = 4;
    c.n_heads = 2;
    c.inner_dim = 4;
    c.n_experts = 2;
    c.vocab_size = 8;
    c.strategy = StrategyKind::SMoE;
    FlopsReport r = count_flops(c, 1, 1, 1);
    EXPECT_EQ(r.embeddings, 4);
    EXPECT_EQ(r.projections, 2 * 4 * 12 + 2 * 4 * 4);
    EXPECT_EQ(r.attention, 2 * 2 * 4 + 5 * 2);
    EXPECT_EQ(r.norms, 3 * 5 * 4);
    EXPECT_EQ(r.output, 2 * 4 * 8 + 5 * 8);
    EXPECT_EQ(r.experts, 2 * 2 * 4 * 2);  // one expert of inner width 2
    EXPECT_EQ(r.router, 2 * 2 * 4 + 5 * 2);
    EXPECT_EQ(r.total(), 380);
    EXPECT_EQ(count_flops(c, 2, 1, 1).total(), 412);
}

TEST(Flops, MonotoneAdditiveAndLinearInBatch)
{
    model::ModelConfig c;  // default dimensions
    double prev = 0;
    for (std::size_t k : {1u, 2u, 4u, 8u, 16u}) {
        FlopsReport r = count_flops(c, k, 512, 1);
        EXPECT_GT(r.total(), prev);
        prev = r.total();
        EXPECT_EQ(r.total(), r.embeddings + r.projections + r.attention + r.norms + r.router + r.experts +
                                 r.output + r.hypernetwork);
        FlopsReport twice = count_flops(c, k, 512, 2);
        EXPECT_EQ(twice.attention, 2 * r.attention);
        EXPECT_EQ(twice.experts, 2 * r.experts);
        EXPECT_EQ(twice.router, 2 * r.router);
        EXPECT_EQ(twice.total(), 2 * r.total());
        EXPECT_EQ(r.router, count_flops(c, 1, 512, 1).router);
    }
    EXPECT_THROW(count_flops(c, 0, 512, 1), ContractError);
    EXPECT_THROW(count_flops(c, 17, 512, 1), ContractError);
}

TEST(Flops, RouterCostMatchesAcrossStrategies)
{
    model::ModelConfig c;
    for (std::size_t k : {1u, 4u, 16u}) {
        c.strategy = StrategyKind::SMoE;
        const FlopsReport smoe = count_flops(c, k, 512, 1);
        c.strategy = StrategyKind::SMoEDropout;
        const FlopsReport dropout = count_flops(c, k, 512, 1);
        c.strategy = StrategyKind::HyperRouter;
        const FlopsReport hyper = count_flops(c, k, 512, 1, true);
        const FlopsReport uncached = count_flops(c, k, 512, 1, false);
        EXPECT_EQ(smoe.router, dropout.router);
        EXPECT_EQ(smoe.router, hyper.router);
        EXPECT_EQ(smoe.total(), hyper.total());
        EXPECT_GT(uncached.total(), hyper.total());
    }
}

TEST(GateExport, RowsAndNormalization)
{
    model::LanguageModel m(small(StrategyKind::HyperRouter, 4));
    const auto s = stream(24);
    std::vector<std::int32_t> sample(s.begin(), s.end());
    const auto path = std::filesystem::temp_directory_path() / "smoelab_gates.csv";
    const std::size_t n = export_gate_distributions(m, sample, 2, 12, 2, path.string());
    EXPECT_EQ(n, 2u * 24 * 4);
    const std::string csv = read_file(path.string());
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,position,expert,probability");
    auto rows = parse_gate_table(csv);
    ASSERT_EQ(rows.size(), n);
    std::map<std::pair<std::size_t, std::size_t>, double> sums;
    for (const auto& r : rows)
        sums[{r.layer, r.position}] += r.probability;
    EXPECT_EQ(sums.size(), 48u);
    for (const auto& [key, total] : sums)
        EXPECT_NEAR(total, 1.0, 1e-9);

    std::vector<std::uint32_t> tokens(s.begin(), s.end());
    tokens.push_back(0);
    EntropyReport report = router_entropy(m, tokens, 12, 2, 2);
    EXPECT_NEAR(table_mean_entropy(rows), report.mean(), 1e-9);
}
