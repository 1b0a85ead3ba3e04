#include <gtest/gtest.h>

#include <cmath>

#include "smoelab/errors.hpp"
#include "smoelab/grad_check.hpp"
#include "smoelab/moe_layer.hpp"
#include "smoelab/ops.hpp"
#include "support/test_util.hpp"

using namespace smoelab;
using namespace smoelab::moe;
using diff::Graph;
using diff::Tensor;
using routing::BatchGating;
using routing::GatingOutput;
using smoelab::testing::random_tensor;

namespace {

// Plain-loop evaluation of one expert, independent of the batched kernel.
std::vector<double> expert_oracle(const Expert& e, std::span<const double> h)
{
    const std::size_t de = e.b1.size(), d = e.b2.size();
    std::vector<double> hidden(de), out(d);
    for (std::size_t i = 0; i < de; ++i) {
        double s = e.b1[i];
        for (std::size_t c = 0; c < d; ++c)
            s += e.w1[i * d + c] * h[c];
        hidden[i] = std::max(0.0, s);
    }
    for (std::size_t c = 0; c < d; ++c) {
        double s = e.b2[c];
        for (std::size_t i = 0; i < de; ++i)
            s += e.w2[c * de + i] * hidden[i];
        out[c] = s;
    }
    return out;
}

// Σ_{j=1}^{N} gates[j] · E_j(h) over every expert, masked or not.
std::vector<double> dense_sum_oracle(const ExpertBank& bank, std::span<const double> h,
                                     std::span<const double> gates)
{
    std::vector<double> y(bank.d_model(), 0.0);
    for (std::size_t j = 0; j < bank.size(); ++j) {
        const auto ej = expert_oracle(bank.expert(j), h);
        for (std::size_t c = 0; c < y.size(); ++c)
            y[c] += gates[j] * ej[c];
    }
    return y;
}

GatingOutput random_gating(Rng& rng, std::size_t n, std::size_t k)
{
    Tensor logits = random_tensor(rng, {n}, -2, 2);
    Graph g(false);
    Tensor p = diff::softmax(g, logits);
    GatingOutput out;
    out.dense_gates.assign(p.values().begin(), p.values().end());
    out.selected = routing::top_k_indices(out.dense_gates, k);
    out.gates.assign(n, 0.0);
    for (auto j : out.selected)
        out.gates[j] = out.dense_gates[j];
    return out;
}

}  // namespace

TEST(MoeForward, SingleExpertTerm)
{
    Rng rng(41);
    ExpertBank bank(rng, 4, 3, 8);
    Tensor h = random_tensor(rng, {3});
    GatingOutput gating{{0, 0, 0.7, 0}, {2}, {0.1, 0.1, 0.7, 0.1}};
    Tensor y = moe_forward(h, gating, bank);
    const auto e2 = expert_oracle(bank.expert(2), h.values());
    for (std::size_t c = 0; c < 3; ++c)
        EXPECT_NEAR(y[c], 0.7 * e2[c], 1e-14);
}

TEST(MoeForward, UniformGatesOverIdenticalExperts)
{
    Rng rng(42);
    ExpertBank bank(rng, 4, 3, 8);
    for (std::size_t j = 1; j < 4; ++j) {
        for (auto [dst, src] : {std::pair{&bank.expert(j).w1, &bank.expert(0).w1},
                                {&bank.expert(j).b1, &bank.expert(0).b1},
                                {&bank.expert(j).w2, &bank.expert(0).w2},
                                {&bank.expert(j).b2, &bank.expert(0).b2}})
            std::copy(src->values().begin(), src->values().end(), dst->values().begin());
    }
    Tensor h = random_tensor(rng, {3});
    GatingOutput gating{{0.25, 0.25, 0.25, 0.25}, {0, 1, 2, 3}, {0.25, 0.25, 0.25, 0.25}};
    Tensor y = moe_forward(h, gating, bank);
    const auto e = expert_oracle(bank.expert(0), h.values());
    for (std::size_t c = 0; c < 3; ++c)
        EXPECT_NEAR(y[c], e[c], 1e-12);
}

TEST(MoeForward, SparseMatchesDenseSum)
{
    Rng rng(43);
    ExpertBank bank(rng, 4, 3, 8);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor h = random_tensor(rng, {3});
        GatingOutput gating = random_gating(rng, 4, 1 + rng.below(4));
        Tensor y = moe_forward(h, gating, bank);
        const auto expected = dense_sum_oracle(bank, h.values(), gating.gates);
        for (std::size_t c = 0; c < 3; ++c)
            EXPECT_NEAR(y[c], expected[c], 1e-12);
    }
}

TEST(MoeForward, SparseDenseEquivalenceProperty)
{
    Rng rng(44);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(16), de = 1 + rng.below(4);
        const std::size_t k = 1 + rng.below(n), m = 1 + rng.below(4);
        ExpertBank bank(rng, n, d, n * de);
        Tensor x = random_tensor(rng, {m, d});
        BatchGating b;
        b.tokens = m;
        b.experts = n;
        b.k = k;
        b.gates = Tensor::zeros({m, n});
        b.dense = Tensor::zeros({m, n});
        for (std::size_t t = 0; t < m; ++t) {
            GatingOutput gt = random_gating(rng, n, k);
            for (std::size_t j = 0; j < n; ++j) {
                b.gates.values()[t * n + j] = gt.gates[j];
                b.dense.values()[t * n + j] = gt.dense_gates[j];
            }
            for (auto s : gt.selected)
                b.selected.push_back(static_cast<std::uint32_t>(s));
        }
        Graph g(false);
        Tensor y = moe_forward(g, x, b, bank);
        EXPECT_EQ(bank.evaluations(), m * k);
        for (std::size_t t = 0; t < m; ++t) {
            const auto expected = dense_sum_oracle(bank, x.values().subspan(t * d, d),
                                                   b.gates.values().subspan(t * n, n));
            for (std::size_t c = 0; c < d; ++c)
                ASSERT_NEAR(y[t * d + c], expected[c], 1e-12) << "trial " << trial;
        }
    }
}

TEST(MoeForward, GradientMatchesFiniteDifferences)
{
    Rng rng(45);
    ExpertBank bank(rng, 3, 4, 6);
    Tensor x = random_tensor(rng, {5, 4});
    Tensor w = random_tensor(rng, {3, 4});
    auto gating_for = [&](Graph& g, const Tensor& xin, const Tensor& win) {
        return routing::gate(g, xin, routing::RouterParams{win, Tensor::zeros({3})}, 2);
    };
    auto f_x = [&](Graph& g, const Tensor& t) {
        return smoelab::testing::weighted_sum(g, moe_forward(g, t, gating_for(g, t, w), bank));
    };
    auto f_w = [&](Graph& g, const Tensor& t) {
        return smoelab::testing::weighted_sum(g, moe_forward(g, x, gating_for(g, x, t), bank));
    };
    auto f_w1 = [&](Graph& g, const Tensor& t) {
        ExpertBank copy = bank;
        copy.expert(1).w1 = t;
        return smoelab::testing::weighted_sum(g, moe_forward(g, x, gating_for(g, x, w), copy));
    };
    EXPECT_LT(diff::grad_check(f_x, x), 1e-4);
    EXPECT_LT(diff::grad_check(f_w, w), 1e-4);
    EXPECT_LT(diff::grad_check(f_w1, bank.expert(1).w1.clone()), 1e-4);
}

TEST(MoeForward, RejectsMismatchedExpertCount)
{
    Rng rng(46);
    ExpertBank bank(rng, 4, 3, 8);
    GatingOutput gating{{0, 1, 0}, {1}, {0, 1, 0}};
    EXPECT_THROW(moe_forward(random_tensor(rng, {3}), gating, bank), ContractError);
    EXPECT_THROW(ExpertBank(rng, 3, 4, 8), ContractError);
}

TEST(MoeForward, SingleExpertIsTheDenseNetwork)
{
    Rng rng(47);
    FeedForwardBlock block(routing::StrategyKind::SMoE, rng, 5, 12, 1, 0.0);
    Tensor h = random_tensor(rng, {7, 5});
    Graph g(false);
    LayerOutput out = layer_forward(g, h, block, 1, rng, false);
    for (std::size_t t = 0; t < 7; ++t) {
        EXPECT_EQ(out.gating->gates[t], 1.0);
        const auto e = expert_oracle(block.bank().expert(0), h.values().subspan(t * 5, 5));
        for (std::size_t c = 0; c < 5; ++c)
            EXPECT_NEAR(out.y[t * 5 + c], e[c], 1e-12);
    }
}

TEST(Schedule, ExamplesAndBoundaries)
{
    KSchedule s = KSchedule::progressive(16, 1500);
    EXPECT_EQ(current_k(s, 0), 1u);
    EXPECT_EQ(current_k(s, 750), 8u);
    EXPECT_EQ(current_k(s, 1500), 16u);
    EXPECT_EQ(current_k(s, 999999), 16u);
    for (std::size_t n : {2u, 4u, 8u, 16u}) {
        for (auto shape : {ScheduleShape::Linear, ScheduleShape::Doubling}) {
            KSchedule p = KSchedule::progressive(n, 1000, shape);
            EXPECT_EQ(current_k(p, 0), 1u);
            EXPECT_EQ(current_k(p, 1000), n);
            std::size_t prev = 1;
            for (std::uint64_t t = 0; t <= 1100; ++t) {
                const std::size_t k = current_k(p, t);
                EXPECT_GE(k, prev);
                EXPECT_GE(k, 1u);
                EXPECT_LE(k, n);
                prev = k;
            }
        }
    }
    // linear closed form
    for (std::uint64_t t = 0; t < 1500; t += 37)
        EXPECT_EQ(current_k(s, t), std::min<std::size_t>(16, 1 + 15 * t / 1500));
    KSchedule doubling = KSchedule::progressive(16, 1000, ScheduleShape::Doubling);
    EXPECT_EQ(current_k(doubling, 250), 2u);
    EXPECT_EQ(current_k(doubling, 500), 4u);
    EXPECT_EQ(current_k(KSchedule::fixed(3), 0), 3u);
}

TEST(LayerForward, DenseStrategyIsTheUnsplitNetwork)
{
    Rng rng(48);
    FeedForwardBlock block(routing::StrategyKind::Dense, rng, 4, 8, 2, 0.1);
    Tensor h = random_tensor(rng, {3, 4});
    Graph g(false);
    LayerOutput out = layer_forward(g, h, block, 1, rng, true);
    EXPECT_FALSE(out.gating.has_value());
    Tensor expected = dense_ffn_forward(g, h, block.dense(), 0.0, false, rng);
    for (std::size_t i = 0; i < expected.size(); ++i)
        EXPECT_EQ(out.y[i], expected[i]);
}

TEST(LayerForward, HyperRouterMatchesSMoEWithSameRouter)
{
    Rng a(49), b(49), r(50);
    FeedForwardBlock smoe(routing::StrategyKind::SMoE, a, 6, 12, 4, 0.0);
    FeedForwardBlock hyper(routing::StrategyKind::HyperRouter, b, 6, 12, 4, 0.0, {8, 8, false});
    // Same experts; SMoE router set to the hypernetwork output.
    for (std::size_t j = 0; j < 4; ++j)
        hyper.bank().expert(j) = smoe.bank().expert(j);
    Graph g(false);
    routing::RouterParams generated = hyper.router().effective_params(g);
    std::copy(generated.weight.values().begin(), generated.weight.values().end(),
              smoe.router().params().weight.values().begin());
    std::copy(generated.bias.values().begin(), generated.bias.values().end(),
              smoe.router().params().bias.values().begin());
    Tensor h = random_tensor(r, {9, 6});
    for (std::size_t k : {1u, 4u}) {
        LayerOutput x = layer_forward(g, h, smoe, k, r, false);
        LayerOutput y = layer_forward(g, h, hyper, k, r, false);
        for (std::size_t i = 0; i < x.y.size(); ++i)
            EXPECT_EQ(x.y[i], y.y[i]);
    }
}

TEST(LayerForward, FrozenRouterSelectionsAreReproducible)
{
    Rng init_a(51), init_b(51), data(52), ra(1), rb(2);
    FeedForwardBlock a(routing::StrategyKind::SMoEDropout, init_a, 6, 16, 8, 0.0);
    FeedForwardBlock b(routing::StrategyKind::SMoEDropout, init_b, 6, 16, 8, 0.0);
    Graph g(false);
    for (int batch = 0; batch < 5; ++batch) {
        Tensor h = random_tensor(data, {12, 6});
        auto sa = layer_forward(g, h, a, 3, ra, true).gating->selected;
        auto sb = layer_forward(g, h, b, 3, rb, true).gating->selected;
        EXPECT_EQ(sa, sb);
    }
}

TEST(LayerForward, CountsExactlyKExpertCallsPerToken)
{
    Rng rng(53);
    for (auto kind : {routing::StrategyKind::SMoE, routing::StrategyKind::THOR,
                      routing::StrategyKind::HyperRouter}) {
        FeedForwardBlock block(kind, rng, 8, 16, 8, 0.0, {8, 8, false});
        Tensor h = random_tensor(rng, {11, 8});
        Graph g(false);
        for (std::size_t k = 1; k <= 8; ++k) {
            block.bank().reset_evaluations();
            layer_forward(g, h, block, k, rng, false);
            EXPECT_EQ(block.bank().evaluations(), 11u * k);
        }
    }
}
