#include "smoelab/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smoelab/errors.hpp"
#include "smoelab/ops.hpp"

namespace smoelab::routing {

namespace {

Tensor uniform_tensor(Rng& rng, diff::Shape shape, double bound, bool trainable)
{
    Tensor t = Tensor::zeros(std::move(shape), trainable);
    for (double& v : t.values())
        v = rng.uniform(-bound, bound);
    return t;
}

void check_k(std::size_t k, std::size_t n)
{
    if (k < 1 || k > n)
        throw ContractError("k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
}

// Keeps the selected entries of p; backward passes gradient only through them.
Tensor mask_selected(Graph& g, const Tensor& p, std::span<const std::uint32_t> selected,
                     std::size_t k)
{
    const std::size_t rows = p.rows(), n = p.cols();
    Tensor out = Tensor::zeros(p.shape());
    auto y = out.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t s = 0; s < k; ++s) {
            const std::size_t j = selected[r * k + s];
            y[r * n + j] = p[r * n + j];
        }
    if (g.needs_grad({&p})) {
        std::vector<std::uint32_t> sel(selected.begin(), selected.end());
        g.record(out, "topk_mask", {p.node_id()}, [p, out, sel = std::move(sel), rows, n, k]() mutable {
            auto gy = out.grad();
            auto gp = p.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t s = 0; s < k; ++s) {
                    const std::size_t j = sel[r * k + s];
                    gp[r * n + j] += gy[r * n + j];
                }
        });
    }
    return out;
}

// Divides each row by its sum (the row holds only the kept gates).
Tensor normalize_rows(Graph& g, const Tensor& m)
{
    const std::size_t rows = m.rows(), n = m.cols();
    Tensor out = Tensor::zeros(m.shape());
    std::vector<double> sums(rows, 0.0);
    auto y = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j)
            sums[r] += m[r * n + j];
        for (std::size_t j = 0; j < n; ++j)
            y[r * n + j] = m[r * n + j] / sums[r];
    }
    if (g.needs_grad({&m})) {
        g.record(out, "normalize_rows", {m.node_id()}, [m, out, sums = std::move(sums), rows, n]() mutable {
            auto gy = out.grad();
            auto gm = m.grad();
            auto yv = out.values();
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += gy[r * n + j] * yv[r * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    gm[r * n + j] += (gy[r * n + j] - dot) / sums[r];
            }
        });
    }
    return out;
}

}  // namespace

HypernetworkSpec HypernetworkSpec::init(Rng& rng, std::size_t n_experts, std::size_t d_model,
                                        std::size_t embedding_dim, std::size_t inner_dim)
{
    HypernetworkSpec h;
    h.n_experts = n_experts;
    h.d_model = d_model;
    const double b1 = 1.0 / std::sqrt(static_cast<double>(embedding_dim));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(inner_dim));
    h.layer1_weight = uniform_tensor(rng, {inner_dim, embedding_dim}, b1, false);
    h.layer1_bias = uniform_tensor(rng, {inner_dim}, b1, false);
    h.layer2_weight = uniform_tensor(rng, {h.output_size(), inner_dim}, b2, false);
    h.layer2_bias = uniform_tensor(rng, {h.output_size()}, b2, false);
    return h;
}

std::size_t HypernetworkSpec::parameter_count() const
{
    return layer1_weight.size() + layer1_bias.size() + layer2_weight.size() + layer2_bias.size();
}

GatingOutput BatchGating::token(std::size_t i) const
{
    GatingOutput out;
    const auto g = gates.values().subspan(i * experts, experts);
    const auto d = dense.values().subspan(i * experts, experts);
    out.gates.assign(g.begin(), g.end());
    out.dense_gates.assign(d.begin(), d.end());
    for (auto s : selected_for(i))
        out.selected.push_back(s);
    return out;
}

std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k)
{
    check_k(k, row.size());
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

BatchGating gate(Graph& g, const Tensor& h, const RouterParams& router, std::size_t k,
                 bool renormalize)
{
    const std::size_t n = router.experts();
    check_k(k, n);
    if (h.cols() != router.dim())
        throw DimensionError("gate: representation " + diff::to_string(h.shape()) +
                             " for router " + diff::to_string(router.weight.shape()));
    BatchGating out;
    out.tokens = h.rows();
    out.experts = n;
    out.k = k;
    Tensor flat = h.rank() == 2 ? h : diff::reshape(g, h, {h.rows(), h.cols()});
    Tensor logits = diff::linear(g, flat, router.weight, router.bias);
    out.dense = diff::softmax(g, logits);
    out.selected.reserve(out.tokens * k);
    for (std::size_t r = 0; r < out.tokens; ++r)
        for (auto j : top_k_indices(out.dense.values().subspan(r * n, n), k))
            out.selected.push_back(static_cast<std::uint32_t>(j));
    out.gates = mask_selected(g, out.dense, out.selected, k);
    if (renormalize)
        out.gates = normalize_rows(g, out.gates);
    return out;
}

GatingOutput gate(const Tensor& h, const RouterParams& router, std::size_t k)
{
    Graph g(false);
    Tensor row = diff::reshape(g, h, {1, h.size()});
    return gate(g, row, router, k).token(0);
}

RouterParams generate_router(Graph& g, const HypernetworkSpec& hypernet, const RouterEmbedding& e)
{
    const std::size_t n = hypernet.n_experts, d = hypernet.d_model;
    if (e.e.size() != hypernet.layer1_weight.dim(1))
        throw DimensionError("generate_router: embedding " + diff::to_string(e.e.shape()) +
                             " for hypernetwork input " +
                             diff::to_string(hypernet.layer1_weight.shape()));
    Tensor row = diff::reshape(g, e.e, {1, e.e.size()});
    Tensor hidden = diff::relu(g, diff::linear(g, row, hypernet.layer1_weight, hypernet.layer1_bias));
    Tensor flat = diff::linear(g, hidden, hypernet.layer2_weight, hypernet.layer2_bias);
    RouterParams out;
    out.weight = diff::slice(g, flat, 0, {n, d});
    out.bias = diff::slice(g, flat, n * d, {n});
    return out;
}

RouterParams init_frozen_router(Rng& rng, std::size_t n_experts, std::size_t d_model)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
    RouterParams p;
    p.weight = uniform_tensor(rng, {n_experts, d_model}, bound, false);
    p.bias = uniform_tensor(rng, {n_experts}, bound, false);
    return p;
}

RouterParams init_trainable_router(Rng& rng, std::size_t n_experts, std::size_t d_model)
{
    RouterParams p = init_frozen_router(rng, n_experts, d_model);
    p.weight.set_requires_grad(true);
    p.bias.set_requires_grad(true);
    return p;
}

RouterEmbedding init_router_embedding(Rng& rng, std::size_t embedding_dim)
{
    RouterEmbedding e{Tensor::zeros({embedding_dim}, true)};
    for (double& v : e.e.values())
        v = rng.normal();
    return e;
}

GatingOutput thor_select(Rng& rng, std::size_t n_experts, std::size_t k)
{
    BatchGating b = thor_select(rng, 1, n_experts, k);
    return b.token(0);
}

BatchGating thor_select(Rng& rng, std::size_t tokens, std::size_t n_experts, std::size_t k)
{
    check_k(k, n_experts);
    BatchGating out;
    out.tokens = tokens;
    out.experts = n_experts;
    out.k = k;
    out.gates = Tensor::zeros({tokens, n_experts});
    out.dense = Tensor::full({tokens, n_experts}, 1.0 / static_cast<double>(n_experts));
    out.selected.reserve(tokens * k);
    std::vector<std::uint32_t> pool(n_experts);
    const double w = 1.0 / static_cast<double>(k);
    auto gv = out.gates.values();
    for (std::size_t t = 0; t < tokens; ++t) {
        std::iota(pool.begin(), pool.end(), std::uint32_t{0});
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + rng.below(n_experts - i);
            std::swap(pool[i], pool[j]);
        }
        std::sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
        for (std::size_t i = 0; i < k; ++i) {
            out.selected.push_back(pool[i]);
            gv[t * n_experts + pool[i]] = w;
        }
    }
    return out;
}

Tensor thor_consistency_loss(Graph& g, const Tensor& y1, const Tensor& y2)
{
    if (y1.shape() != y2.shape())
        throw DimensionError("thor_consistency_loss: shape mismatch " + diff::to_string(y1.shape()) +
                             " vs " + diff::to_string(y2.shape()));
    Tensor dp = diff::sub(g, diff::softmax(g, y1), diff::softmax(g, y2));
    Tensor dlp = diff::sub(g, diff::log_softmax(g, y1), diff::log_softmax(g, y2));
    return diff::scale(g, diff::sum(g, diff::mul(g, dp, dlp)), 1.0 / static_cast<double>(y1.rows()));
}

std::string_view to_string(StrategyKind kind)
{
    switch (kind) {
    case StrategyKind::Dense: return "dense";
    case StrategyKind::DenseDropout: return "dense_dropout";
    case StrategyKind::SMoE: return "smoe";
    case StrategyKind::SMoEDropout: return "smoe_dropout";
    case StrategyKind::HyperRouter: return "hyper_router";
    case StrategyKind::THOR: return "thor";
    }
    return "unknown";
}

StrategyKind parse_strategy(std::string_view name)
{
    for (auto k : {StrategyKind::Dense, StrategyKind::DenseDropout, StrategyKind::SMoE,
                   StrategyKind::SMoEDropout, StrategyKind::HyperRouter, StrategyKind::THOR})
        if (to_string(k) == name)
            return k;
    throw ConfigError("unknown strategy '" + std::string(name) +
                      "' (expected dense, dense_dropout, smoe, smoe_dropout, hyper_router, thor)");
}

bool uses_experts(StrategyKind kind)
{
    return kind != StrategyKind::Dense && kind != StrategyKind::DenseDropout;
}

Router::Router(StrategyKind kind, Rng& init_rng, std::size_t n_experts, std::size_t d_model,
               RouterOptions options)
    : kind_(kind), n_experts_(n_experts), d_model_(d_model), options_(options)
{
    switch (kind) {
    case StrategyKind::SMoE:
        params_ = init_trainable_router(init_rng, n_experts, d_model);
        break;
    case StrategyKind::SMoEDropout:
        params_ = init_frozen_router(init_rng, n_experts, d_model);
        break;
    case StrategyKind::HyperRouter:
        hypernet_ = HypernetworkSpec::init(init_rng, n_experts, d_model, options.embedding_dim,
                                           options.hypernet_inner_dim);
        embedding_ = init_router_embedding(init_rng, options.embedding_dim);
        break;
    default:
        break;
    }
}

RouterParams Router::effective_params(Graph& g)
{
    if (kind_ != StrategyKind::HyperRouter)
        return params_;
    if (cached_)
        return *cached_;
    ++hypernet_evals_;
    return generate_router(g, hypernet_, embedding_);
}

void Router::cache()
{
    if (kind_ != StrategyKind::HyperRouter || cached_)
        return;
    Graph g(false);
    ++hypernet_evals_;
    cached_ = generate_router(g, hypernet_, embedding_);
}

BatchGating Router::route(Graph& g, const Tensor& h, std::size_t k, Rng& rng)
{
    switch (kind_) {
    case StrategyKind::THOR:
        return thor_select(rng, h.rows(), n_experts_, k);
    case StrategyKind::SMoE:
    case StrategyKind::SMoEDropout:
    case StrategyKind::HyperRouter:
        return gate(g, h, effective_params(g), k, options_.renormalize_gates);
    default:
        throw ContractError("route() called for dense strategy " + std::string(to_string(kind_)));
    }
}

}  // namespace smoelab::routing
