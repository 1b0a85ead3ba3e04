#include <iostream>

#include <CLI11.hpp>

#include "smoelab/cli.hpp"

int main(int argc, char** argv)
{
    using smoelab::cli::Command;
    CLI::App app{"Sparse mixture-of-experts language model lab"};
    app.require_subcommand(1);
    Command cmd;

    auto common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", cmd.config_path, "config file (key = value with [sections])");
        sub->add_option("-p,--preset", cmd.preset, "base preset: full or desk");
        sub->add_option("-s,--set", cmd.overrides, "override, e.g. --set model.experts=8")->take_all();
    };
    auto with_ks = [&](CLI::App* sub) {
        sub->add_option("-k,--k", cmd.ks, "comma-separated k values")->delimiter(',');
    };
    auto with_checkpoint = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", cmd.checkpoint, "checkpoint file (default: the run's checkpoint.bin)");
        sub->add_option("--split", cmd.split, "train, valid or test")->capture_default_str();
    };

    auto* ingest = app.add_subcommand("ingest", "tokenize a source file into a dataset");
    ingest->add_option("--source", cmd.source, "input text file")->required();
    ingest->add_option("--kind", cmd.kind, "char-lm, word-lm or classification")->capture_default_str();

    auto* pretrain = app.add_subcommand("pretrain", "train a language model");
    common(pretrain);
    auto* finetune = app.add_subcommand("finetune", "dense finetuning on a classification dataset");
    common(finetune);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint at several k");
    common(eval);
    with_ks(eval);
    with_checkpoint(eval);
    auto* entropy = app.add_subcommand("entropy", "router entropy per layer");
    common(entropy);
    with_ks(entropy);
    with_checkpoint(entropy);
    auto* flops = app.add_subcommand("flops", "analytic FLOP counts");
    common(flops);
    with_ks(flops);
    flops->add_option("--batch", cmd.batch, "batch size")->capture_default_str();
    auto* gates = app.add_subcommand("export-gates", "write dense gate distributions");
    common(gates);
    with_ks(gates);
    with_checkpoint(gates);
    gates->add_option("--positions", cmd.positions, "sample length")->capture_default_str();
    auto* census = app.add_subcommand("census", "parameter census");
    common(census);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return smoelab::cli::kExitConfig;
    }
    cmd.verb = app.get_subcommands().front()->get_name();
    return smoelab::cli::run(cmd, std::cout, std::cerr);
}
