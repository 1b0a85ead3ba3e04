#include "smoelab/moe_layer.hpp"

#include <Eigen/Core>
#include <bit>
#include <cmath>

#include "smoelab/errors.hpp"
#include "smoelab/ops.hpp"

namespace smoelab::moe {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using MutVec = Eigen::Map<Eigen::VectorXd>;

Tensor uniform_tensor(Rng& rng, diff::Shape shape, double bound)
{
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.values())
        v = rng.uniform(-bound, bound);
    return t;
}

ConstMat view(const Tensor& t, std::size_t rows, std::size_t cols)
{
    return ConstMat(t.values().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMat grad_view(Tensor& t, std::size_t rows, std::size_t cols)
{
    return MutMat(t.grad().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct ExpertActivations {
    RowMat hidden;  // [m_j × d_e], post-ReLU
    RowMat output;  // [m_j × d]
};

}  // namespace

ExpertBank::ExpertBank(Rng& rng, std::size_t n_experts, std::size_t d_model, std::size_t inner_dim)
    : d_model_(d_model)
{
    if (n_experts == 0 || inner_dim % n_experts != 0)
        throw ContractError("inner dimension " + std::to_string(inner_dim) +
                            " is not divisible by " + std::to_string(n_experts) + " experts");
    expert_dim_ = inner_dim / n_experts;
    const double b1 = 1.0 / std::sqrt(static_cast<double>(d_model));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(expert_dim_));
    experts_.reserve(n_experts);
    for (std::size_t j = 0; j < n_experts; ++j) {
        Expert e;
        e.w1 = uniform_tensor(rng, {expert_dim_, d_model}, b1);
        e.b1 = uniform_tensor(rng, {expert_dim_}, b1);
        e.w2 = uniform_tensor(rng, {d_model, expert_dim_}, b2);
        e.b2 = uniform_tensor(rng, {d_model}, b2);
        experts_.push_back(std::move(e));
    }
}

DenseFfn DenseFfn::init(Rng& rng, std::size_t d_model, std::size_t inner_dim)
{
    const double b1 = 1.0 / std::sqrt(static_cast<double>(d_model));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(inner_dim));
    DenseFfn f;
    f.w1 = uniform_tensor(rng, {inner_dim, d_model}, b1);
    f.b1 = uniform_tensor(rng, {inner_dim}, b1);
    f.w2 = uniform_tensor(rng, {d_model, inner_dim}, b2);
    f.b2 = uniform_tensor(rng, {d_model}, b2);
    return f;
}

Tensor moe_forward(Graph& g, const Tensor& x, const BatchGating& gating, ExpertBank& bank)
{
    const std::size_t n = bank.size(), d = bank.d_model(), de = bank.expert_dim();
    if (gating.experts != n)
        throw ContractError("moe_forward: gating over " + std::to_string(gating.experts) +
                            " experts for a bank of " + std::to_string(n));
    if (x.cols() != d || x.rows() != gating.tokens)
        throw DimensionError("moe_forward: input " + diff::to_string(x.shape()) + " for " +
                             std::to_string(gating.tokens) + " gated tokens of width " +
                             std::to_string(d));
    const std::size_t m = x.rows();
    const auto di = static_cast<Eigen::Index>(d);

    std::vector<std::vector<std::uint32_t>> routed(n);
    for (std::size_t t = 0; t < m; ++t)
        for (auto j : gating.selected_for(t))
            routed[j].push_back(static_cast<std::uint32_t>(t));

    Tensor out = Tensor::zeros({m, d});
    double* y = out.values().data();
    const double* xv = x.values().data();
    const auto gates = gating.gates.values();
    std::vector<ExpertActivations> acts(n);
    std::uint64_t evaluated = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const auto& rows = routed[j];
        if (rows.empty())
            continue;
        const auto mj = static_cast<Eigen::Index>(rows.size());
        const Expert& e = bank.expert(j);
        RowMat xj(mj, di);
        for (Eigen::Index r = 0; r < mj; ++r)
            xj.row(r) = ConstVec(xv + rows[r] * d, di).transpose();
        auto& a = acts[j];
        a.hidden.noalias() = xj * view(e.w1, de, d).transpose();
        a.hidden.rowwise() += ConstVec(e.b1.values().data(), static_cast<Eigen::Index>(de)).transpose();
        a.hidden = a.hidden.cwiseMax(0.0);
        a.output.noalias() = a.hidden * view(e.w2, d, de).transpose();
        a.output.rowwise() += ConstVec(e.b2.values().data(), di).transpose();
        for (Eigen::Index r = 0; r < mj; ++r) {
            const double w = gates[rows[r] * n + j];
            MutVec(y + rows[r] * d, di) += w * a.output.row(r).transpose();
        }
        evaluated += rows.size();
    }
    bank.count_evaluations(evaluated);

    std::vector<Tensor> params;
    for (std::size_t j = 0; j < n; ++j) {
        const Expert& e = bank.expert(j);
        params.insert(params.end(), {e.w1, e.b1, e.w2, e.b2});
    }
    bool needs = g.needs_grad({&x, &gating.gates});
    for (const Tensor& p : params)
        needs = needs || g.needs_grad({&p});
    if (!needs)
        return out;

    std::vector<std::int64_t> inputs{x.node_id(), gating.gates.node_id()};
    g.record(out, "moe_forward", std::move(inputs),
             [x, gates_t = gating.gates, out, params = std::move(params), routed = std::move(routed),
              acts = std::move(acts), n, d, de]() mutable {
                 const auto di = static_cast<Eigen::Index>(d);
                 const auto dei = static_cast<Eigen::Index>(de);
                 const double* gy = out.grad().data();
                 const double* xv = x.values().data();
                 const auto gates = gates_t.values();
                 const bool want_x = x.requires_grad();
                 const bool want_gates = gates_t.requires_grad();
                 double* ggates = want_gates ? gates_t.grad().data() : nullptr;
                 double* gx = want_x ? x.grad().data() : nullptr;
                 for (std::size_t j = 0; j < n; ++j) {
                     const auto& rows = routed[j];
                     if (rows.empty())
                         continue;
                     const auto mj = static_cast<Eigen::Index>(rows.size());
                     Tensor& w1 = params[4 * j];
                     Tensor& b1 = params[4 * j + 1];
                     Tensor& w2 = params[4 * j + 2];
                     Tensor& b2 = params[4 * j + 3];
                     const auto& a = acts[j];
                     RowMat dout(mj, di);
                     RowMat xj(mj, di);
                     for (Eigen::Index r = 0; r < mj; ++r) {
                         const std::size_t t = rows[r];
                         const auto gyr = ConstVec(gy + t * d, di);
                         dout.row(r) = gates[t * n + j] * gyr.transpose();
                         if (ggates != nullptr)
                             ggates[t * n + j] += a.output.row(r).dot(gyr.transpose());
                         xj.row(r) = ConstVec(xv + t * d, di).transpose();
                     }
                     if (w2.requires_grad())
                         grad_view(w2, d, de).noalias() += dout.transpose() * a.hidden;
                     if (b2.requires_grad())
                         MutVec(b2.grad().data(), di) += dout.colwise().sum().transpose();
                     RowMat dh = dout * view(w2, d, de);
                     dh = dh.cwiseProduct((a.hidden.array() > 0.0).cast<double>().matrix());
                     if (w1.requires_grad())
                         grad_view(w1, de, d).noalias() += dh.transpose() * xj;
                     if (b1.requires_grad())
                         MutVec(b1.grad().data(), dei) += dh.colwise().sum().transpose();
                     if (gx != nullptr) {
                         RowMat dxj = dh * view(w1, de, d);
                         for (Eigen::Index r = 0; r < mj; ++r)
                             MutVec(gx + rows[r] * d, di) += dxj.row(r).transpose();
                     }
                 }
             });
    return out;
}

Tensor moe_forward(const Tensor& h, const GatingOutput& gating, ExpertBank& bank)
{
    const std::size_t n = gating.gates.size();
    BatchGating b;
    b.tokens = 1;
    b.experts = n;
    b.k = gating.selected.size();
    b.gates = Tensor::from({1, n}, gating.gates);
    b.dense = Tensor::from({1, n}, gating.dense_gates.empty() ? gating.gates : gating.dense_gates);
    for (auto s : gating.selected)
        b.selected.push_back(static_cast<std::uint32_t>(s));
    Graph g(false);
    Tensor row = diff::reshape(g, h, {1, h.size()});
    Tensor y = moe_forward(g, row, b, bank);
    return diff::reshape(g, y, {h.size()});
}

Tensor dense_ffn_forward(Graph& g, const Tensor& x, const DenseFfn& ffn, double inner_dropout,
                         bool training, Rng& rng)
{
    Tensor hidden = diff::relu(g, diff::linear(g, x, ffn.w1, ffn.b1));
    hidden = diff::dropout(g, hidden, inner_dropout, training, rng);
    return diff::linear(g, hidden, ffn.w2, ffn.b2);
}

KSchedule KSchedule::progressive(std::size_t n_experts, std::uint64_t total_steps, ScheduleShape shape)
{
    return KSchedule{1, n_experts, total_steps, shape};
}

KSchedule KSchedule::fixed(std::size_t k)
{
    return KSchedule{k, k, 0, ScheduleShape::Fixed};
}

std::size_t current_k(const KSchedule& s, std::uint64_t step)
{
    if (s.shape == ScheduleShape::Fixed || s.k_start >= s.k_end || step >= s.total_steps)
        return s.k_end;
    const std::uint64_t span = s.k_end - s.k_start;
    if (s.shape == ScheduleShape::Linear)
        return s.k_start + static_cast<std::size_t>(span * step / s.total_steps);
    // doubling: stages k_start, 2·k_start, 4·k_start, ... ≤ k_end
    std::uint64_t stages = 0;
    while ((s.k_start << (stages + 1)) <= s.k_end)
        ++stages;
    const std::uint64_t stage = stages * step / s.total_steps;
    return std::min<std::size_t>(s.k_end, s.k_start << stage);
}

FeedForwardBlock::FeedForwardBlock(routing::StrategyKind kind, Rng& init_rng, std::size_t d_model,
                                   std::size_t inner_dim, std::size_t n_experts, double dropout,
                                   routing::RouterOptions options)
    : kind_(kind), dropout_(dropout)
{
    if (routing::uses_experts(kind)) {
        bank_ = ExpertBank(init_rng, n_experts, d_model, inner_dim);
        router_ = routing::Router(kind, init_rng, n_experts, d_model, options);
    } else {
        dense_ = DenseFfn::init(init_rng, d_model, inner_dim);
    }
}

LayerOutput layer_forward(Graph& g, const Tensor& h, FeedForwardBlock& block, std::size_t k,
                          Rng& rng, bool training)
{
    using routing::StrategyKind;
    LayerOutput out;
    switch (block.kind()) {
    case StrategyKind::Dense:
        out.y = dense_ffn_forward(g, h, block.dense(), 0.0, training, rng);
        break;
    case StrategyKind::DenseDropout:
        out.y = dense_ffn_forward(g, h, block.dense(), block.dropout(), training, rng);
        break;
    default: {
        BatchGating gating = block.router().route(g, h, k, rng);
        out.y = moe_forward(g, h, gating, block.bank());
        out.gating = std::move(gating);
        break;
    }
    }
    return out;
}

}  // namespace smoelab::moe
