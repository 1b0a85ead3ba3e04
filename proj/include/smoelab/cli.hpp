#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

namespace smoelab::cli {

struct Command {
    std::string verb{};  // ingest, pretrain, finetune, eval, entropy, flops, export-gates, census
    std::string config_path{};
    std::string preset{};
    std::vector<std::string> overrides{};  // "section.key=value"

    // ingest
    std::string source{};
    std::string kind = "char-lm";
    // eval, entropy, export-gates
    std::string checkpoint{};  // default: <run dir>/checkpoint.bin
    std::string split = "test";
    std::vector<std::size_t> ks{};  // default: train.eval_ks
    std::size_t positions = 128;
    // flops
    std::size_t batch = 1;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitData = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitContract = 3;

/// Output root: $SMOELAB_OUT, else "runs".
std::string output_root();

/// Dispatches one command. Results go under <root>/<config hash>/;
/// ingest writes <root>/datasets/<source checksum>/. Returns an exit code.
int run(const Command& command, std::ostream& out, std::ostream& err);

const std::vector<std::string>& verbs();

}  // namespace smoelab::cli
