#pragma once

// Command-line surface: run configuration, subcommands and exit codes.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "rf/checkpoint.hpp"
#include "rf/eval.hpp"
#include "rf/kvtext.hpp"
#include "rf/model.hpp"
#include "rf/synth_data.hpp"
#include "rf/training.hpp"

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace rf::cli {

inline constexpr int kExitOk = 0, kExitUsage = 1, kExitRuntime = 2;
inline constexpr long long kConfigVersion = 1;

struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Every setting of a run as one flat key = value table.
struct RunConfig {
    data::DynamicsSpec data;
    std::size_t data_count = 256;
    model::ModelConfig model;
    train::TrainConfig train;
    eval::RolloutConfig eval;  // eval.seed is unused; rollouts take `seed`
    std::size_t eval_seeds = 10;
    std::size_t target_frame = 21;
    std::string dataset = "data/dataset.rfds";
    std::string checkpoint_dir = "runs/train";
    std::string output_dir = "out";
    std::uint64_t seed = 1;
    ckpt::Precision precision = ckpt::Precision::F64;

    kv::Table table() const;
    std::string text() const { return kv::format(table()); }
    std::string hash() const;
    // Unknown keys and a different config_version are rejected.
    static RunConfig from_table(const kv::Table& t);
    void validate() const;
};

// Default key list with values, as printed by `rf config`.
std::string default_config_text();

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rf::cli
