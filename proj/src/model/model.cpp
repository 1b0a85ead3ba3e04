#include "smoelab/model.hpp"

#include <cmath>

#include "smoelab/errors.hpp"
#include "smoelab/ops.hpp"

namespace smoelab::model {

namespace {

Tensor uniform_param(Rng& rng, diff::Shape shape, double bound)
{
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.values())
        v = rng.uniform(-bound, bound);
    return t;
}

Tensor normal_param(Rng& rng, diff::Shape shape, double stddev)
{
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.values())
        v = stddev * rng.normal();
    return t;
}

std::vector<std::int32_t> positions(std::size_t batch, std::size_t seq_len)
{
    std::vector<std::int32_t> pos(batch * seq_len);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < seq_len; ++t)
            pos[b * seq_len + t] = static_cast<std::int32_t>(t);
    return pos;
}

}  // namespace

void ModelConfig::validate() const
{
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || inner_dim == 0 || vocab_size == 0 ||
        max_seq_len == 0 || n_experts == 0)
        fail("model sizes must be positive");
    if (d_model % n_heads != 0)
        fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
             std::to_string(n_heads));
    if (inner_dim % n_experts != 0)
        fail("inner_dim " + std::to_string(inner_dim) + " is not divisible by n_experts " +
             std::to_string(n_experts));
    if (!(dropout >= 0.0 && dropout < 1.0))
        fail("dropout must lie in [0, 1)");
}

std::string_view to_string(Component c)
{
    switch (c) {
    case Component::Transformer: return "transformer";
    case Component::RouterEmbedding: return "router_embedding";
    case Component::Router: return "router";
    case Component::Hypernetwork: return "hypernetwork";
    case Component::ClassifierHead: return "classifier_head";
    }
    return "unknown";
}

LanguageModel::LanguageModel(const ModelConfig& config) : config_(config)
{
    config_.validate();
    Rng rng(derive_seed(config_.seed, 0x6d6f64656cULL));
    const std::size_t d = config_.d_model;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    token_embedding_ = normal_param(rng, {config_.vocab_size, d}, 0.02);
    position_embedding_ = normal_param(rng, {config_.max_seq_len, d}, 0.02);
    routing::RouterOptions options{config_.router_embedding_dim, config_.hypernet_inner_dim,
                                   config_.renormalize_gates};
    layers_.reserve(config_.n_layers);
    for (std::size_t i = 0; i < config_.n_layers; ++i) {
        DecoderLayer layer;
        layer.ln1_gain = Tensor::full({d}, 1.0, true);
        layer.ln1_offset = Tensor::zeros({d}, true);
        layer.qkv_weight = uniform_param(rng, {3 * d, d}, bound);
        layer.qkv_bias = uniform_param(rng, {3 * d}, bound);
        layer.out_weight = uniform_param(rng, {d, d}, bound);
        layer.out_bias = uniform_param(rng, {d}, bound);
        layer.ln2_gain = Tensor::full({d}, 1.0, true);
        layer.ln2_offset = Tensor::zeros({d}, true);
        layer.ffn = moe::FeedForwardBlock(config_.strategy, rng, d, config_.inner_dim,
                                          config_.n_experts, config_.dropout, options);
        layers_.push_back(std::move(layer));
    }
    final_gain_ = Tensor::full({d}, 1.0, true);
    final_offset_ = Tensor::zeros({d}, true);
    output_weight_ = normal_param(rng, {config_.vocab_size, d}, 0.02);
    output_bias_ = Tensor::zeros({config_.vocab_size}, true);
}

void LanguageModel::set_mode(Mode mode)
{
    mode_ = mode;
    if (mode == Mode::Train)
        for (auto& layer : layers_)
            layer.ffn.router().clear_cache();
}

Tensor LanguageModel::trunk(Graph& g, std::span<const std::int32_t> tokens, std::size_t batch,
                            std::size_t seq_len, std::size_t k, Rng& rng, GateTrace* trace)
{
    if (seq_len == 0 || seq_len > config_.max_seq_len)
        throw ContractError("sequence length " + std::to_string(seq_len) + " outside [1, " +
                            std::to_string(config_.max_seq_len) + "]");
    if (tokens.size() != batch * seq_len)
        throw DimensionError("expected " + std::to_string(batch * seq_len) + " tokens, got " +
                             std::to_string(tokens.size()));
    const bool training = mode_ == Mode::Train;
    const double rate = config_.dropout;
    const auto pos = positions(batch, seq_len);
    Tensor x = diff::add(g, diff::embedding(g, token_embedding_, tokens),
                         diff::embedding(g, position_embedding_, pos));
    x = diff::dropout(g, x, rate, training, rng);
    for (auto& layer : layers_) {
        Tensor h = diff::layer_norm(g, x, layer.ln1_gain, layer.ln1_offset);
        Tensor qkv = diff::linear(g, h, layer.qkv_weight, layer.qkv_bias);
        Tensor att = diff::causal_attention(g, qkv, batch, seq_len, config_.n_heads);
        Tensor o = diff::linear(g, att, layer.out_weight, layer.out_bias);
        x = diff::add(g, x, diff::dropout(g, o, rate, training, rng));
        Tensor h2 = diff::layer_norm(g, x, layer.ln2_gain, layer.ln2_offset);
        moe::LayerOutput f = moe::layer_forward(g, h2, layer.ffn, k, rng, training);
        x = diff::add(g, x, diff::dropout(g, f.y, rate, training, rng));
        if (trace != nullptr && f.gating)
            trace->push_back(std::move(*f.gating));
    }
    return diff::layer_norm(g, x, final_gain_, final_offset_);
}

Tensor LanguageModel::lm_forward(Graph& g, std::span<const std::int32_t> tokens, std::size_t batch,
                                 std::size_t seq_len, std::size_t k, Rng& rng, GateTrace* trace)
{
    for (auto t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size)
            throw IndexError("token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(config_.vocab_size));
    Tensor h = trunk(g, tokens, batch, seq_len, k, rng, trace);
    return diff::linear(g, h, output_weight_, output_bias_);
}

Tensor LanguageModel::classify_forward(Graph& g, std::span<const std::int32_t> tokens,
                                       std::size_t batch, std::size_t seq_len,
                                       std::span<const std::size_t> lengths, std::size_t k, Rng& rng)
{
    if (!has_classifier())
        throw ContractError("classify_forward: no classifier head attached");
    Tensor h = trunk(g, tokens, batch, seq_len, k, rng, nullptr);
    Tensor pooled = diff::segment_mean(g, h, batch, seq_len, lengths);
    return diff::linear(g, pooled, head_weight_, head_bias_);
}

void LanguageModel::attach_classifier(std::size_t n_classes, Rng& rng)
{
    if (n_classes == 0)
        throw ContractError("classifier needs at least one class");
    const double bound = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
    head_weight_ = uniform_param(rng, {n_classes, config_.d_model}, bound);
    head_bias_ = Tensor::zeros({n_classes}, true);
}

std::vector<ParamRecord> LanguageModel::parameters() const
{
    using C = Component;
    std::vector<ParamRecord> out;
    auto add = [&](std::string name, const Tensor& t, C c, bool trainable) {
        out.push_back({std::move(name), t, c, trainable});
    };
    add("embed.token", token_embedding_, C::Transformer, true);
    add("embed.position", position_embedding_, C::Transformer, true);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const DecoderLayer& l = layers_[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        add(p + "ln1.gain", l.ln1_gain, C::Transformer, true);
        add(p + "ln1.offset", l.ln1_offset, C::Transformer, true);
        add(p + "attn.qkv.weight", l.qkv_weight, C::Transformer, true);
        add(p + "attn.qkv.bias", l.qkv_bias, C::Transformer, true);
        add(p + "attn.out.weight", l.out_weight, C::Transformer, true);
        add(p + "attn.out.bias", l.out_bias, C::Transformer, true);
        add(p + "ln2.gain", l.ln2_gain, C::Transformer, true);
        add(p + "ln2.offset", l.ln2_offset, C::Transformer, true);
        const auto& ffn = l.ffn;
        if (!routing::uses_experts(ffn.kind())) {
            add(p + "ffn.dense.w1", ffn.dense().w1, C::Transformer, true);
            add(p + "ffn.dense.b1", ffn.dense().b1, C::Transformer, true);
            add(p + "ffn.dense.w2", ffn.dense().w2, C::Transformer, true);
            add(p + "ffn.dense.b2", ffn.dense().b2, C::Transformer, true);
            continue;
        }
        for (std::size_t j = 0; j < ffn.bank().size(); ++j) {
            const auto& e = ffn.bank().expert(j);
            const std::string q = p + "ffn.experts." + std::to_string(j) + ".";
            add(q + "w1", e.w1, C::Transformer, true);
            add(q + "b1", e.b1, C::Transformer, true);
            add(q + "w2", e.w2, C::Transformer, true);
            add(q + "b2", e.b2, C::Transformer, true);
        }
        const auto& r = ffn.router();
        switch (ffn.kind()) {
        case routing::StrategyKind::SMoE:
        case routing::StrategyKind::SMoEDropout: {
            const bool trainable = ffn.kind() == routing::StrategyKind::SMoE;
            add(p + "ffn.router.weight", r.params().weight, C::Router, trainable);
            add(p + "ffn.router.bias", r.params().bias, C::Router, trainable);
            break;
        }
        case routing::StrategyKind::HyperRouter:
            add(p + "ffn.router_embedding", r.embedding().e, C::RouterEmbedding, true);
            add(p + "ffn.hypernet.layer1.weight", r.hypernet().layer1_weight, C::Hypernetwork, false);
            add(p + "ffn.hypernet.layer1.bias", r.hypernet().layer1_bias, C::Hypernetwork, false);
            add(p + "ffn.hypernet.layer2.weight", r.hypernet().layer2_weight, C::Hypernetwork, false);
            add(p + "ffn.hypernet.layer2.bias", r.hypernet().layer2_bias, C::Hypernetwork, false);
            break;
        default:
            break;
        }
    }
    add("final_ln.gain", final_gain_, C::Transformer, true);
    add("final_ln.offset", final_offset_, C::Transformer, true);
    add("output.weight", output_weight_, C::Transformer, true);
    add("output.bias", output_bias_, C::Transformer, true);
    if (has_classifier()) {
        add("head.weight", head_weight_, C::ClassifierHead, true);
        add("head.bias", head_bias_, C::ClassifierHead, true);
    }
    return out;
}

void LanguageModel::cache_routers()
{
    if (mode_ != Mode::Eval)
        throw ContractError("cache_routers requires eval mode: router embeddings may still change");
    for (auto& layer : layers_)
        if (routing::uses_experts(layer.ffn.kind()))
            layer.ffn.router().cache();
}

std::size_t LanguageModel::hypernet_evaluations() const
{
    std::size_t total = 0;
    for (const auto& layer : layers_)
        total += layer.ffn.router().hypernet_evaluations();
    return total;
}

void cache_routers(LanguageModel& model)
{
    model.cache_routers();
}

const ComponentCount& Census::at(Component c) const
{
    for (const auto& cc : components)
        if (cc.component == c)
            return cc;
    throw ContractError("census has no component " + std::string(to_string(c)));
}

std::size_t Census::trainable() const
{
    std::size_t n = 0;
    for (const auto& c : components)
        n += c.trainable;
    return n;
}

std::size_t Census::frozen() const
{
    std::size_t n = 0;
    for (const auto& c : components)
        n += c.frozen;
    return n;
}

std::size_t Census::generated() const
{
    std::size_t n = 0;
    for (const auto& c : components)
        n += c.generated;
    return n;
}

Census count_params(const LanguageModel& model)
{
    Census census;
    for (auto c : {Component::Transformer, Component::RouterEmbedding, Component::Router,
                   Component::Hypernetwork, Component::ClassifierHead})
        census.components.push_back({c});
    auto slot = [&](Component c) -> ComponentCount& {
        for (auto& cc : census.components)
            if (cc.component == c)
                return cc;
        throw ContractError("unreachable");
    };
    for (const auto& p : model.parameters()) {
        auto& cc = slot(p.component);
        (p.trainable ? cc.trainable : cc.frozen) += p.tensor.size();
    }
    for (std::size_t i = 0; i < model.n_layers(); ++i) {
        const auto& ffn = model.layer(i).ffn;
        if (ffn.kind() == routing::StrategyKind::HyperRouter)
            slot(Component::Router).generated += ffn.router().hypernet().output_size();
    }
    return census;
}

}  // namespace smoelab::model
