#include "smoelab/diagnostics.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "smoelab/errors.hpp"
#include "smoelab/io.hpp"
#include "smoelab/routing.hpp"

namespace smoelab::diagnostics {

namespace {

constexpr double kNonlinearity = 5.0;

struct EvalScope {
    explicit EvalScope(model::LanguageModel& m) : model(m), previous(m.mode())
    {
        model.set_mode(model::Mode::Eval);
        model.cache_routers();
    }
    ~EvalScope() { model.set_mode(previous); }
    model::LanguageModel& model;
    model::Mode previous;
};

}  // namespace

double entropy(std::span<const double> p)
{
    double h = 0.0;
    for (double v : p)
        if (v > 0)
            h -= v * std::log(v);
    return h;
}

double EntropyReport::mean() const
{
    if (layers.empty())
        return 0.0;
    double s = 0.0;
    for (const auto& l : layers)
        s += l.mean;
    return s / static_cast<double>(layers.size());
}

EntropyReport router_entropy(model::LanguageModel& model, std::span<const std::uint32_t> tokens,
                             std::size_t seq_len, std::size_t batch, std::size_t k, std::size_t max_batches)
{
    EntropyReport report;
    if (!routing::uses_experts(model.config().strategy) || tokens.size() < 2)
        return report;
    EvalScope scope(model);
    Rng rng(0);
    const std::size_t L = model.n_layers(), n = model.config().n_experts;
    std::vector<double> sum(L, 0.0), sumsq(L, 0.0);
    std::size_t count = 0;

    const std::size_t T = std::min(seq_len, tokens.size() - 1);
    const std::size_t windows = (tokens.size() - 1) / T;
    std::vector<std::int32_t> in;
    std::size_t batches = 0;
    for (std::size_t w0 = 0; w0 < windows && !(max_batches && batches == max_batches); w0 += batch, ++batches) {
        const std::size_t B = std::min(batch, windows - w0);
        in.resize(B * T);
        for (std::size_t i = 0; i < B * T; ++i)
            in[i] = static_cast<std::int32_t>(tokens[w0 * T + i]);
        diff::Graph g(false);
        model::GateTrace trace;
        model.lm_forward(g, in, B, T, k, rng, &trace);
        for (std::size_t l = 0; l < L; ++l) {
            auto dense = trace[l].dense.values();
            for (std::size_t t = 0; t < B * T; ++t) {
                const double h = entropy(dense.subspan(t * n, n));
                sum[l] += h;
                sumsq[l] += h * h;
            }
        }
        count += B * T;
    }
    for (std::size_t l = 0; l < L; ++l) {
        const double mean = sum[l] / static_cast<double>(count);
        const double var = std::max(0.0, sumsq[l] / static_cast<double>(count) - mean * mean);
        report.layers.push_back({mean, std::sqrt(var), count});
    }
    return report;
}

double FlopsReport::total() const
{
    return embeddings + projections + attention + norms + router + experts + output + hypernetwork;
}

FlopsReport count_flops(const model::ModelConfig& c, std::size_t k, std::size_t seq_len, std::size_t batch,
                        bool routers_cached)
{
    const std::size_t n = c.n_experts;
    if (k < 1 || k > n)
        throw ContractError("count_flops: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    const double T = static_cast<double>(seq_len), B = static_cast<double>(batch);
    const double tokens = T * B, d = static_cast<double>(c.d_model), L = static_cast<double>(c.n_layers);
    const double inner = static_cast<double>(c.inner_dim), N = static_cast<double>(n);
    const double heads = static_cast<double>(c.n_heads), V = static_cast<double>(c.vocab_size);

    FlopsReport r;
    r.embeddings = tokens * d;  // token + position add
    r.projections = L * tokens * (2 * d * 3 * d + 2 * d * d);
    // QKᵀ and PV per head are T×dh by dh×T and T×T by T×dh.
    r.attention = L * B * (2 * 2 * T * T * d + kNonlinearity * heads * T * T);
    r.norms = (2 * L + 1) * tokens * kNonlinearity * d;
    r.output = tokens * (2 * d * V + kNonlinearity * V);

    const double full_ffn = tokens * 2 * (2 * d * inner);
    if (routing::uses_experts(c.strategy)) {
        r.experts = L * full_ffn * static_cast<double>(k) / N;
        if (c.strategy != routing::StrategyKind::THOR)
            r.router = L * tokens * (2 * N * d + kNonlinearity * N);
        if (c.strategy == routing::StrategyKind::HyperRouter && !routers_cached) {
            const double emb = static_cast<double>(c.router_embedding_dim);
            const double hid = static_cast<double>(c.hypernet_inner_dim);
            r.hypernetwork = L * (2 * emb * hid + 2 * hid * (N * d + N));
        }
    } else {
        r.experts = L * full_ffn;
    }
    return r;
}

std::vector<GateRow> gate_distributions(model::LanguageModel& model, std::span<const std::int32_t> sample,
                                        std::size_t batch, std::size_t seq_len, std::size_t k)
{
    std::vector<GateRow> rows;
    if (!routing::uses_experts(model.config().strategy))
        return rows;
    EvalScope scope(model);
    Rng rng(0);
    diff::Graph g(false);
    model::GateTrace trace;
    model.lm_forward(g, sample, batch, seq_len, k, rng, &trace);
    const std::size_t n = model.config().n_experts;
    for (std::size_t l = 0; l < trace.size(); ++l) {
        auto dense = trace[l].dense.values();
        for (std::size_t t = 0; t < batch * seq_len; ++t)
            for (std::size_t j = 0; j < n; ++j)
                rows.push_back({l, t, j, dense[t * n + j]});
    }
    return rows;
}

std::string gate_table_csv(const std::vector<GateRow>& rows)
{
    std::ostringstream out;
    out.precision(17);
    out << "layer,position,expert,probability\n";
    for (const auto& r : rows)
        out << r.layer << ',' << r.position << ',' << r.expert << ',' << r.probability << '\n';
    return out.str();
}

std::vector<GateRow> parse_gate_table(const std::string& csv)
{
    std::vector<GateRow> rows;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        GateRow r{};
        char c1, c2, c3;
        std::istringstream ls(line);
        if (!(ls >> r.layer >> c1 >> r.position >> c2 >> r.expert >> c3 >> r.probability))
            throw DataError("bad gate table line: " + line);
        rows.push_back(r);
    }
    return rows;
}

std::size_t export_gate_distributions(model::LanguageModel& model, std::span<const std::int32_t> sample,
                                      std::size_t batch, std::size_t seq_len, std::size_t k,
                                      const std::string& path)
{
    const auto rows = gate_distributions(model, sample, batch, seq_len, k);
    write_file_atomic(path, gate_table_csv(rows));
    return rows.size();
}

double table_mean_entropy(const std::vector<GateRow>& rows)
{
    std::map<std::pair<std::size_t, std::size_t>, double> h;
    for (const auto& r : rows)
        if (r.probability > 0)
            h[{r.layer, r.position}] -= r.probability * std::log(r.probability);
        else
            h.try_emplace({r.layer, r.position}, 0.0);
    if (h.empty())
        return 0.0;
    double s = 0.0;
    for (const auto& [key, v] : h)
        s += v;
    return s / static_cast<double>(h.size());
}

}  // namespace smoelab::diagnostics
