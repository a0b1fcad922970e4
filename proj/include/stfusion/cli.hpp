#pragma once

// Command-line front end: one JSON run config per experiment, five
// subcommands sharing a work directory.
//
//   stfusion <generate|train|sample-eval|report|oracle> --config PATH
//            [--workdir PATH] [--seed INT] [--jobs INT]
//
// Exit codes: 0 ok, 1 unexpected failure, 2 config, 3 divergence,
// 4 missing or unreadable artifact, 5 size guard.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "stfusion/lab.hpp"

namespace stf::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitMissingArtifact = 4;
inline constexpr int kExitSizeGuard = 5;

// Work-directory file names.
inline constexpr const char* kDatasetFile = "dataset.stfd";
inline constexpr const char* kWeightsFile = "weights.json";
inline constexpr const char* kGatesFile = "gates.json";
inline constexpr const char* kHistoryFile = "history.json";
inline constexpr const char* kEvaluationsFile = "evaluations.csv";
inline constexpr const char* kBestStrategyFile = "best_strategy.json";
inline constexpr const char* kPreferenceFile = "preference.csv";
inline constexpr const char* kOracleFile = "oracle.csv";
inline constexpr const char* kOracleRhoFile = "oracle_rho.json";

// A required input file is absent or unreadable.
struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    // clip_shape and num_classes are taken from the data section.
    TemplateConfig template_config;
    TrainSchedule schedule;
    double k = 1.0;
    double initial_drop = 0.1;
    SynthSpec data;
    std::uint64_t data_seed = 1;
    double train_frac = 0.5;
    std::size_t sample_count = 100;
    std::uint64_t sample_seed = 1;
    bool recalibrate_bn = false;
    std::vector<std::uint64_t> oracle_seeds;  // empty means {data_seed}
    std::filesystem::path workdir;

    // Unknown keys and missing or mistyped fields throw ConfigError naming
    // the dotted field path.
    static RunConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void validate() const;

    // Replaces every seed in the config.
    void override_seed(std::uint64_t seed);
    std::vector<std::uint64_t> effective_oracle_seeds() const;
    ExperimentSetup experiment() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace stf::cli
