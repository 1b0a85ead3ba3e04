#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "smoelab/errors.hpp"
#include "smoelab/grad_check.hpp"
#include "smoelab/model.hpp"
#include "smoelab/ops.hpp"

using namespace smoelab;
using namespace smoelab::model;
using diff::Graph;
using diff::Tensor;
using routing::StrategyKind;

namespace {

ModelConfig small_config(StrategyKind kind)
{
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.inner_dim = 32;
    c.n_experts = 4;
    c.vocab_size = 32;
    c.max_seq_len = 16;
    c.strategy = kind;
    c.seed = 5;
    c.router_embedding_dim = 8;
    c.hypernet_inner_dim = 8;
    return c;
}

std::vector<std::int32_t> random_tokens(Rng& rng, std::size_t n, std::size_t vocab)
{
    std::vector<std::int32_t> t(n);
    for (auto& v : t)
        v = static_cast<std::int32_t>(rng.below(vocab));
    return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b)
{
    return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

const std::vector<StrategyKind> kAll = {StrategyKind::Dense,       StrategyKind::DenseDropout,
                                        StrategyKind::SMoE,        StrategyKind::SMoEDropout,
                                        StrategyKind::HyperRouter, StrategyKind::THOR};

}  // namespace

TEST(Model, InitialLossNearUniform)
{
    for (auto kind : kAll) {
        ModelConfig c = small_config(kind);
        c.vocab_size = 256;
        LanguageModel m(c);
        m.set_mode(Mode::Eval);
        Rng rng(1);
        auto tokens = random_tokens(rng, 4 * 16, 256);
        std::vector<std::int32_t> targets(tokens.begin() + 1, tokens.end());
        targets.push_back(0);
        Graph g(false);
        Tensor logits = m.lm_forward(g, tokens, 4, 16, 2, rng);
        EXPECT_EQ(logits.shape(), (diff::Shape{64, 256}));
        const double ce = diff::cross_entropy(g, logits, targets).item();
        EXPECT_NEAR(ce, std::log(256.0), 0.1 * std::log(256.0)) << routing::to_string(kind);
    }
}

TEST(Model, DeterministicAcrossInstances)
{
    for (auto kind : kAll) {
        LanguageModel a(small_config(kind)), b(small_config(kind));
        Rng data(2), ra(3), rb(3);
        auto tokens = random_tokens(data, 2 * 12, 32);
        Graph g(false);
        EXPECT_TRUE(bitwise_equal(a.lm_forward(g, tokens, 2, 12, 2, ra), b.lm_forward(g, tokens, 2, 12, 2, rb)));
    }
}

TEST(Model, CausalUnderPerturbation)
{
    for (auto kind : kAll) {
        LanguageModel m(small_config(kind));
        m.set_mode(Mode::Eval);
        Rng data(4);
        auto tokens = random_tokens(data, 16, 32);
        Rng r1(0), r2(0);
        Graph g(false);
        Tensor base = m.lm_forward(g, tokens, 1, 16, 2, r1);
        for (std::size_t j : {1u, 7u, 15u}) {
            auto changed = tokens;
            changed[j] = (changed[j] + 1) % 32;
            Rng r(0);
            Tensor other = m.lm_forward(g, changed, 1, 16, 2, r);
            for (std::size_t i = 0; i < j * 32; ++i)
                ASSERT_EQ(base[i], other[i]) << routing::to_string(kind) << " j=" << j;
            double diff = 0.0;
            for (std::size_t i = j * 32; i < (j + 1) * 32; ++i)
                diff += std::abs(base[i] - other[i]);
            EXPECT_GT(diff, 0.0);
        }
    }
}

TEST(Model, RejectsBadInputs)
{
    LanguageModel m(small_config(StrategyKind::SMoE));
    Rng rng(5);
    Graph g(false);
    std::vector<std::int32_t> too_long(17, 1), bad(4, 40);
    EXPECT_THROW(m.lm_forward(g, too_long, 1, 17, 1, rng), ContractError);
    EXPECT_THROW(m.lm_forward(g, bad, 1, 4, 1, rng), IndexError);
    ModelConfig c = small_config(StrategyKind::SMoE);
    c.n_heads = 3;
    EXPECT_THROW(LanguageModel{c}, ConfigError);
    c = small_config(StrategyKind::SMoE);
    c.n_experts = 5;
    EXPECT_THROW(LanguageModel{c}, ConfigError);
}

TEST(Model, CachedRoutersAreTransparent)
{
    LanguageModel m(small_config(StrategyKind::HyperRouter));
    Rng data(6);
    auto tokens = random_tokens(data, 3 * 10, 32);
    EXPECT_THROW(m.cache_routers(), ContractError);
    m.set_mode(Mode::Eval);
    Rng r1(0), r2(0);
    Graph g(false);
    Tensor uncached = m.lm_forward(g, tokens, 3, 10, 4, r1);
    const std::size_t before = m.hypernet_evaluations();
    cache_routers(m);
    EXPECT_EQ(m.hypernet_evaluations(), before + m.n_layers());
    for (int rep = 0; rep < 5; ++rep) {
        Tensor cached = m.lm_forward(g, tokens, 3, 10, 4, r2);
        EXPECT_TRUE(bitwise_equal(uncached, cached));
    }
    EXPECT_EQ(m.hypernet_evaluations(), before + m.n_layers());
}

TEST(Model, EquivalentRoutersGiveIdenticalLogits)
{
    ModelConfig cs = small_config(StrategyKind::SMoE), ch = small_config(StrategyKind::HyperRouter);
    LanguageModel smoe(cs), hyper(ch);
    auto sp = smoe.parameters();
    auto hp = hyper.parameters();
    // Copy the shared backbone, then force W_r equal.
    for (const auto& h : hp)
        for (const auto& s : sp)
            if (s.name == h.name && s.component == Component::Transformer) {
                Tensor dst = s.tensor;
                std::copy(h.tensor.values().begin(), h.tensor.values().end(), dst.values().begin());
            }
    Graph g(false);
    for (std::size_t l = 0; l < cs.n_layers; ++l) {
        auto generated = hyper.layer(l).ffn.router().effective_params(g);
        auto& target = smoe.layer(l).ffn.router().params();
        std::copy(generated.weight.values().begin(), generated.weight.values().end(), target.weight.values().begin());
        std::copy(generated.bias.values().begin(), generated.bias.values().end(), target.bias.values().begin());
    }
    smoe.set_mode(Mode::Eval);
    hyper.set_mode(Mode::Eval);
    Rng data(7), r1(0), r2(0);
    auto tokens = random_tokens(data, 2 * 8, 32);
    EXPECT_TRUE(bitwise_equal(smoe.lm_forward(g, tokens, 2, 8, 2, r1), hyper.lm_forward(g, tokens, 2, 8, 2, r2)));
}

TEST(Classifier, SingleClassAndBatchPermutation)
{
    LanguageModel m(small_config(StrategyKind::HyperRouter));
    m.set_mode(Mode::Eval);
    Rng rng(8);
    m.attach_classifier(3, rng);
    auto tokens = random_tokens(rng, 3 * 8, 32);
    std::vector<std::size_t> lengths{8, 5, 2};
    Graph g(false);
    Tensor logits = m.classify_forward(g, tokens, 3, 8, lengths, 4, rng);
    EXPECT_EQ(logits.shape(), (diff::Shape{3, 3}));

    const std::vector<std::size_t> perm{2, 0, 1};
    std::vector<std::int32_t> permuted;
    std::vector<std::size_t> plen;
    for (auto p : perm) {
        permuted.insert(permuted.end(), tokens.begin() + p * 8, tokens.begin() + (p + 1) * 8);
        plen.push_back(lengths[p]);
    }
    Tensor plogits = m.classify_forward(g, permuted, 3, 8, plen, 4, rng);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c)
            EXPECT_NEAR(plogits[r * 3 + c], logits[perm[r] * 3 + c], 1e-12);

    // padding past the valid length leaves the prediction alone
    auto padded = tokens;
    for (std::size_t t = 2; t < 8; ++t)
        padded[2 * 8 + t] = 0;
    Tensor logits_padded = m.classify_forward(g, padded, 3, 8, lengths, 4, rng);
    for (std::size_t c = 0; c < 3; ++c)
        EXPECT_EQ(logits_padded[2 * 3 + c], logits[2 * 3 + c]);

    LanguageModel single(small_config(StrategyKind::SMoE));
    single.set_mode(Mode::Eval);
    single.attach_classifier(1, rng);
    Tensor one = single.classify_forward(g, tokens, 3, 8, lengths, 4, rng);
    EXPECT_EQ(one.shape(), (diff::Shape{3, 1}));
}

TEST(Classifier, HeadGradientMatchesFiniteDifferences)
{
    LanguageModel m(small_config(StrategyKind::SMoE));
    m.set_mode(Mode::Eval);
    Rng rng(9);
    m.attach_classifier(4, rng);
    auto tokens = random_tokens(rng, 3 * 6, 32);
    std::vector<std::size_t> lengths{6, 4, 3};
    std::vector<std::int32_t> labels{0, 3, 1};
    Tensor head;
    for (const auto& p : m.parameters())
        if (p.name == "head.weight")
            head = p.tensor;
    ASSERT_TRUE(head.defined());
    auto loss_at = [&](Graph& g, const Tensor& t) {
        std::copy(t.values().begin(), t.values().end(), head.values().begin());
        Rng r(0);
        return diff::cross_entropy(g, m.classify_forward(g, tokens, 3, 6, lengths, 2, r), labels);
    };
    // The head lives inside the model, so difference it in place.
    Tensor start = head.clone();
    Graph g;
    g.backward(loss_at(g, start));
    std::vector<double> analytic(head.grad().begin(), head.grad().end());
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < start.size(); ++i) {
        Tensor plus = start.clone(), minus = start.clone();
        plus.values()[i] += h;
        minus.values()[i] -= h;
        Graph g1(false), g2(false);
        const double numeric = (loss_at(g1, plus).item() - loss_at(g2, minus).item()) / (2 * h);
        worst = std::max(worst, std::abs(numeric - analytic[i]) /
                                    std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8}));
    }
    std::copy(start.values().begin(), start.values().end(), head.values().begin());
    EXPECT_LT(worst, 1e-4);
}

TEST(Census, DefaultConfigurationCounts)
{
    ModelConfig c;  // defaults
    c.strategy = StrategyKind::HyperRouter;
    Census hyper = count_params(LanguageModel(c));
    EXPECT_EQ(hyper.at(Component::RouterEmbedding).trainable, 1024u);
    EXPECT_EQ(hyper.at(Component::Router).generated, 4u * 16 * 257);
    EXPECT_EQ(hyper.at(Component::Hypernetwork).frozen, 4490304u);
    EXPECT_EQ(hyper.at(Component::Router).trainable + hyper.at(Component::Router).frozen, 0u);

    c.strategy = StrategyKind::SMoEDropout;
    Census dropout = count_params(LanguageModel(c));
    EXPECT_EQ(dropout.at(Component::Router).frozen, 16448u);
    EXPECT_EQ(dropout.at(Component::Router).trainable, 0u);
    EXPECT_EQ(hyper.trainable() - dropout.trainable(), 4u * 256);
}

TEST(Census, ToyConfigurationHandCount)
{
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.inner_dim = 4;
    c.n_experts = 2;
    c.vocab_size = 10;
    c.max_seq_len = 16;
    // per layer: ln 16+16, qkv 192+24, out 64+8, experts 2 x (16+2+16+8)
    const std::size_t layer = 16 + 216 + 72 + 16 + 84;
    const std::size_t backbone = 10 * 8 + 16 * 8 + 2 * layer + 16 + 80 + 10;
    ASSERT_EQ(backbone, 1122u);

    c.strategy = StrategyKind::SMoE;
    Census smoe = count_params(LanguageModel(c));
    EXPECT_EQ(smoe.at(Component::Transformer).trainable, backbone);
    EXPECT_EQ(smoe.at(Component::Router).trainable, 36u);
    EXPECT_EQ(smoe.frozen(), 0u);

    c.strategy = StrategyKind::SMoEDropout;
    Census frozen = count_params(LanguageModel(c));
    EXPECT_EQ(frozen.at(Component::Router).frozen, 36u);
    EXPECT_EQ(frozen.trainable(), backbone);

    c.strategy = StrategyKind::HyperRouter;
    Census hyper = count_params(LanguageModel(c));
    EXPECT_EQ(hyper.at(Component::RouterEmbedding).trainable, 512u);
    EXPECT_EQ(hyper.at(Component::Hypernetwork).frozen, 2u * (256 * 256 + 256 + 18 * 256 + 18));
    EXPECT_EQ(hyper.generated(), 36u);
    EXPECT_EQ(hyper.trainable(), backbone + 512);

    c.strategy = StrategyKind::Dense;
    Census dense = count_params(LanguageModel(c));
    // unsplit: w1 32 + b1 4 + w2 32 + b2 8 = 76 per layer vs 84 split
    EXPECT_EQ(dense.trainable(), backbone - 2 * 84 + 2 * 76);
}

TEST(Census, GeneratedNeverTrainable)
{
    LanguageModel m(small_config(StrategyKind::HyperRouter));
    std::size_t trainable = 0, frozen = 0;
    for (const auto& p : m.parameters()) {
        EXPECT_EQ(p.tensor.requires_grad(), p.trainable) << p.name;
        (p.trainable ? trainable : frozen) += p.tensor.size();
    }
    Census c = count_params(m);
    EXPECT_EQ(c.trainable(), trainable);
    EXPECT_EQ(c.frozen(), frozen);
}
