#include "smoelab/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "smoelab/config.hpp"
#include "smoelab/data.hpp"
#include "smoelab/diagnostics.hpp"
#include "smoelab/errors.hpp"
#include "smoelab/io.hpp"
#include "smoelab/training.hpp"

namespace smoelab::cli {

namespace fs = std::filesystem;

namespace {

RunConfig resolve_config(const Command& c)
{
    std::string text;
    if (!c.preset.empty())
        text = "[run]\npreset = " + c.preset + "\n";
    if (!c.config_path.empty()) {
        std::string body;
        try {
            body = read_file(c.config_path);
        } catch (const DataError&) {
            throw ConfigError("cannot read config file " + c.config_path);
        }
        text += body;
    }
    return parse_config(text, c.overrides);
}

fs::path run_dir(const RunConfig& config)
{
    return fs::path(output_root()) / config.hash_hex();
}

std::string tag(const RunConfig& config, std::size_t k)
{
    return config.hash_hex() + "_k" + std::to_string(k);
}

data::Corpus require_corpus(const RunConfig& config)
{
    if (config.data.manifest.empty())
        throw ConfigError("data.manifest is not set");
    return data::load_corpus(config.data.manifest);
}

std::vector<std::size_t> ks_for(const Command& c, const RunConfig& config)
{
    const auto ks = c.ks.empty() ? config.train.eval_ks : c.ks;
    for (std::size_t k : ks)
        if (k < 1 || k > config.model.n_experts)
            throw ConfigError("k=" + std::to_string(k) + " outside [1, " + std::to_string(config.model.n_experts) + "]");
    return ks;
}

data::Split split_of(const data::Manifest& m, const std::string& name)
{
    if (name == "train")
        return m.train;
    if (name == "valid")
        return m.valid;
    if (name == "test")
        return m.test;
    throw ConfigError("unknown split '" + name + "' (train, valid or test)");
}

std::unique_ptr<model::LanguageModel> load_trained(const Command& c, const RunConfig& config)
{
    const std::string path = c.checkpoint.empty() ? (run_dir(config) / "checkpoint.bin").string() : c.checkpoint;
    if (!fs::exists(path))
        throw DataError("checkpoint " + path + " not found; run pretrain first or pass --checkpoint");
    return train::load_model(Checkpoint::load(path));
}

int do_ingest(const Command& c, std::ostream& out)
{
    if (c.source.empty())
        throw ConfigError("ingest needs --source");
    const auto kind = data::parse_kind(c.kind);
    const std::string text = read_file(c.source);
    char name[17];
    std::snprintf(name, sizeof name, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(text + "\n" + std::string(data::to_string(kind)))));
    const fs::path dir = fs::path(output_root()) / "datasets" / name;
    const std::string manifest = data::ingest_file(c.source, kind, dir.string());
    const data::Manifest m = data::manifest_from_json(read_file(manifest));
    out << "manifest " << manifest << "\n";
    out << "kind " << data::to_string(m.kind) << ", vocabulary " << m.vocab_size << ", "
        << (m.kind == data::DatasetKind::Classification ? m.n_records : m.n_tokens)
        << (m.kind == data::DatasetKind::Classification ? " records" : " tokens") << "\n";
    return kExitOk;
}

int do_pretrain(const Command& c, std::ostream& out)
{
    const RunConfig config = resolve_config(c);
    const data::Corpus corpus = require_corpus(config);
    const fs::path dir = run_dir(config);
    write_file_atomic((dir / "config.txt").string(), config.canonical_text());
    train::PretrainSummary s = train::pretrain(config, corpus, {dir.string(), true});
    out << "run " << dir.string() << "\n";
    out << std::fixed << std::setprecision(4) << "train bpc " << s.initial_train_bpc << " -> " << s.final_train_bpc
        << "\n";
    for (const auto& [k, e] : s.eval)
        out << "valid k=" << k << " bpc " << e.bpc << " perplexity " << e.perplexity << "\n";
    return kExitOk;
}

int do_finetune(const Command& c, std::ostream& out)
{
    const RunConfig config = resolve_config(c);
    const data::Corpus corpus = require_corpus(config);
    if (config.data.pretrained.empty())
        throw ConfigError("data.pretrained is not set");
    const Checkpoint pretrained = Checkpoint::load(config.data.pretrained);
    const fs::path dir = run_dir(config);
    write_file_atomic((dir / "config.txt").string(), config.canonical_text());
    train::FinetuneSummary s = train::finetune(config, corpus, pretrained, {dir.string(), true});
    out << "run " << dir.string() << "\n" << std::fixed << std::setprecision(4);
    for (std::size_t e = 0; e < s.train_accuracy.size(); ++e) {
        out << "epoch " << e + 1 << " train accuracy " << s.train_accuracy[e];
        if (e < s.valid_accuracy.size())
            out << " valid accuracy " << s.valid_accuracy[e];
        out << "\n";
    }
    return kExitOk;
}

int do_eval(const Command& c, std::ostream& out)
{
    const RunConfig config = resolve_config(c);
    const data::Corpus corpus = require_corpus(config);
    auto model = load_trained(c, config);
    const auto split = split_of(corpus.manifest, c.split);
    train::MetricsLog log;
    out << std::fixed << std::setprecision(4);
    const bool word = corpus.manifest.kind == data::DatasetKind::WordLm;
    for (std::size_t k : ks_for(c, config)) {
        if (corpus.manifest.kind == data::DatasetKind::Classification) {
            if (!model->has_classifier())
                throw ContractError("checkpoint has no classifier head");
            std::span<const data::Record> all(corpus.records);
            const double acc = train::evaluate_classifier(*model, all.subspan(split.begin, split.size()),
                                                          config.finetune.batch_size, config.finetune.max_len, k);
            log.add(0, k, c.split, "accuracy", acc);
            out << "k=" << k << " accuracy " << acc << "\n";
            continue;
        }
        const auto e = train::evaluate_lm(*model, data::split_tokens(corpus, split), config.train.seq_len,
                                          config.train.batch_size, k, config.train.eval_batches);
        log.add(0, k, c.split, word ? "perplexity" : "bpc", word ? e.perplexity : e.bpc);
        out << "k=" << k << (word ? " perplexity " : " bpc ") << (word ? e.perplexity : e.bpc) << "\n";
    }
    const fs::path path = run_dir(config) / ("eval_" + config.hash_hex() + "_" + c.split + ".csv");
    write_file_atomic(path.string(), log.to_csv());
    out << "wrote " << path.string() << "\n";
    return kExitOk;
}

int do_entropy(const Command& c, std::ostream& out)
{
    const RunConfig config = resolve_config(c);
    const data::Corpus corpus = require_corpus(config);
    auto model = load_trained(c, config);
    const auto tokens = data::split_tokens(corpus, split_of(corpus.manifest, c.split));
    for (std::size_t k : ks_for(c, config)) {
        const auto r = diagnostics::router_entropy(*model, tokens, config.train.seq_len, config.train.batch_size, k,
                                                   config.train.eval_batches);
        std::ostringstream csv;
        csv.precision(17);
        csv << "layer,mean,std,tokens\n";
        for (std::size_t l = 0; l < r.layers.size(); ++l)
            csv << l << ',' << r.layers[l].mean << ',' << r.layers[l].std << ',' << r.layers[l].tokens << '\n';
        const fs::path path = run_dir(config) / ("entropy_" + tag(config, k) + ".csv");
        write_file_atomic(path.string(), csv.str());
        out << "k=" << k << std::fixed << std::setprecision(4);
        for (const auto& l : r.layers)
            out << "  " << l.mean << " +- " << l.std;
        out << "\n";
    }
    return kExitOk;
}

int do_flops(const Command& c, std::ostream& out)
{
    const RunConfig config = resolve_config(c);
    std::vector<std::size_t> ks = c.ks;
    if (ks.empty())
        for (std::size_t k = 1; k <= config.model.n_experts; k *= 2)
            ks.push_back(k);
    ks = ks_for(Command{.ks = ks}, config);
    double base = 0.0;
    for (std::size_t k : ks) {
        const auto r = diagnostics::count_flops(config.model, k, config.train.seq_len, c.batch);
        std::ostringstream csv;
        csv.precision(17);
        csv << "component,flops\n"
            << "embeddings," << r.embeddings << "\nprojections," << r.projections << "\nattention," << r.attention
            << "\nnorms," << r.norms << "\nrouter," << r.router << "\nexperts," << r.experts << "\noutput,"
            << r.output << "\nhypernetwork," << r.hypernetwork << "\ntotal," << r.total() << "\n";
        write_file_atomic((run_dir(config) / ("flops_" + tag(config, k) + ".csv")).string(), csv.str());
        if (base == 0.0)
            base = diagnostics::count_flops(config.model, config.model.n_experts, config.train.seq_len, c.batch).total();
        out << "k=" << k << " total " << std::scientific << std::setprecision(4) << r.total() << std::fixed
            << " (" << std::setprecision(3) << r.total() / base << " of k=" << config.model.n_experts << ")\n";
    }
    return kExitOk;
}

int do_export_gates(const Command& c, std::ostream& out)
{
    const RunConfig config = resolve_config(c);
    const data::Corpus corpus = require_corpus(config);
    auto model = load_trained(c, config);
    const auto tokens = data::split_tokens(corpus, split_of(corpus.manifest, c.split));
    const std::size_t T = std::min({c.positions, tokens.size(), config.model.max_seq_len});
    if (T == 0)
        throw DataError("split is empty");
    std::vector<std::int32_t> sample(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(T));
    for (std::size_t k : ks_for(c, config)) {
        const fs::path path = run_dir(config) / ("gates_" + tag(config, k) + ".csv");
        const std::size_t rows = diagnostics::export_gate_distributions(*model, sample, 1, T, k, path.string());
        out << "k=" << k << " wrote " << rows << " rows to " << path.string() << "\n";
    }
    return kExitOk;
}

int do_census(const Command& c, std::ostream& out)
{
    const RunConfig config = resolve_config(c);
    model::LanguageModel m(config.model);
    const model::Census census = model::count_params(m);
    std::ostringstream csv;
    csv << "component,trainable,frozen,generated\n";
    out << std::left << std::setw(18) << "component" << std::right << std::setw(12) << "trainable"
        << std::setw(12) << "frozen" << std::setw(12) << "generated" << "\n";
    for (const auto& cc : census.components) {
        csv << model::to_string(cc.component) << ',' << cc.trainable << ',' << cc.frozen << ',' << cc.generated
            << '\n';
        out << std::left << std::setw(18) << model::to_string(cc.component) << std::right << std::setw(12)
            << cc.trainable << std::setw(12) << cc.frozen << std::setw(12) << cc.generated << "\n";
    }
    csv << "total," << census.trainable() << ',' << census.frozen() << ',' << census.generated() << '\n';
    out << std::left << std::setw(18) << "total" << std::right << std::setw(12) << census.trainable()
        << std::setw(12) << census.frozen() << std::setw(12) << census.generated() << "\n";
    write_file_atomic((run_dir(config) / ("census_" + config.hash_hex() + ".csv")).string(), csv.str());
    return kExitOk;
}

}  // namespace

std::string output_root()
{
    const char* env = std::getenv("SMOELAB_OUT");
    return env && *env ? env : "runs";
}

const std::vector<std::string>& verbs()
{
    static const std::vector<std::string> v = {"ingest", "pretrain",     "finetune", "eval",
                                               "entropy", "flops", "export-gates", "census"};
    return v;
}

int run(const Command& command, std::ostream& out, std::ostream& err)
{
    try {
        const auto& v = command.verb;
        if (v == "ingest")
            return do_ingest(command, out);
        if (v == "pretrain")
            return do_pretrain(command, out);
        if (v == "finetune")
            return do_finetune(command, out);
        if (v == "eval")
            return do_eval(command, out);
        if (v == "entropy")
            return do_entropy(command, out);
        if (v == "flops")
            return do_flops(command, out);
        if (v == "export-gates")
            return do_export_gates(command, out);
        if (v == "census")
            return do_census(command, out);
        throw ConfigError("unknown command '" + v + "'");
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitContract;
    }
}

}  // namespace smoelab::cli
