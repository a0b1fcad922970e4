#pragma once

// Training, posterior sampling and training-free evaluation of fusion
// strategies, the exhaustive standalone-training oracle, and layer-level
// preference reports.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stfusion/data.hpp"
#include "stfusion/droppath.hpp"
#include "stfusion/template_network.hpp"

namespace stf {

struct TrainSchedule {
    std::size_t warmup_epochs = 10;
    std::size_t main_epochs = 30;
    std::size_t batch_size = 16;
    double lr = 0.05;
    std::vector<std::size_t> lr_decay_epochs{20};  // phase-relative
    double lr_decay_factor = 0.1;
    std::uint64_t seed = 1;

    void validate() const;
    // Learning rate for epoch `e` counted from the start of a phase.
    double lr_at(std::size_t e) const;
};

struct EpochRecord {
    std::string phase;  // "warmup", "vdroppath" or "plain"
    std::size_t epoch = 0;
    double lr = 0.0;
    double tau = 0.0;  // 0 when gates are not sampled
    ObjectiveBreakdown objective;
    double train_accuracy = 0.0;  // running accuracy over the epoch's batches
    double val_accuracy = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    double final_train_accuracy = 0.0;  // eval mode, full network
    double final_val_accuracy = 0.0;

    double best_val_accuracy() const;
    nlohmann::json to_json() const;
};

// Warmup with every gate forced on, then joint training of weights and drop
// logits with concrete-relaxed gates on the variational objective.
TrainHistory train_template(TemplateNetwork& net, GateParams& params, const ClipDataset& train,
                            const ClipDataset& val, const TrainSchedule& schedule, const ObjectiveConfig& cfg);

// Ungated training of a strategy's subnetwork for `epochs` epochs; batch
// order is keyed by (schedule.seed, epoch_offset + e).
TrainHistory train_plain(TemplateNetwork& net, const FusionStrategy& strategy, const ClipDataset& train,
                         const ClipDataset& val, const TrainSchedule& schedule, std::size_t epochs,
                         std::size_t epoch_offset = 0, const std::string& phase = "plain");

// Top-1 accuracy of a strategy's subnetwork in eval mode.
double strategy_accuracy(const TemplateNetwork& net, const FusionStrategy& strategy, const ClipDataset& data);

// i.i.d. draws of hard gates mapped back to strategies; duplicates allowed.
std::vector<FusionStrategy> sample_strategies(const TemplateNetwork& net, const GateParams& params, std::size_t count,
                                              Rng& rng);

struct StrategyEvaluation {
    FusionStrategy strategy;
    double val_accuracy = 0.0;
    std::size_t active_param_count = 0;
    std::size_t mult_add_proxy = 0;

    bool operator==(const StrategyEvaluation&) const = default;
};

struct EvaluateOptions {
    // When set, batch-norm running statistics are re-estimated on a private
    // copy of the network with one pass over this data before evaluating.
    const ClipDataset* recalibrate_with = nullptr;
};

StrategyEvaluation evaluate_strategy(const TemplateNetwork& net, const FusionStrategy& strategy,
                                     const ClipDataset& val, const EvaluateOptions& options = {});

// Highest accuracy; ties go to fewer mult-adds, then fewer parameters, then
// the earlier entry.
std::size_t select_best_index(std::span<const StrategyEvaluation> evals);
StrategyEvaluation select_best(std::span<const StrategyEvaluation> evals);
// True when `a` ranks strictly before `b` under the selection rule.
bool ranks_before(const StrategyEvaluation& a, const StrategyEvaluation& b);

inline constexpr std::size_t kMaxEnumeratedStrategies = 100000;

// All 3^L unit assignments with every edge on, layer 1 most significant and
// S < ST < S+ST.
std::vector<FusionStrategy> enumerate_all_strategies(std::span<const std::size_t> edge_counts);
std::vector<FusionStrategy> enumerate_all_strategies(std::size_t depth);

// Trains a fresh network (seeded by schedule.seed) restricted to the
// strategy's branches for warmup_epochs + main_epochs epochs without gating,
// returning the best validation accuracy seen.
double train_standalone(const FusionStrategy& strategy, const TemplateConfig& config, const ClipDataset& train,
                        const ClipDataset& val, const TrainSchedule& schedule);

// Spearman rank correlation with average ranks for ties. Returns 0 when
// either input has no rank variation.
double rank_correlation(std::span<const double> a, std::span<const double> b);

struct PreferenceRow {
    std::size_t layer = 1;
    double p_edge = 0.0, p_s = 0.0, p_st = 0.0;
    double marginal_s = 0.0, marginal_st = 0.0;  // 1 - sqrt(p)
    UnitFrequencies frequencies;
    LayerUnit chosen_unit;
};

struct PreferenceReport {
    std::vector<PreferenceRow> rows;

    static const char* csv_header();
    std::string to_csv() const;
    double mean_frequency_s() const;
    double mean_frequency_st() const;
};

PreferenceReport layer_preference_report(const GateParams& params, const FusionStrategy& best);

// CSV with header strategy_json,val_accuracy,active_params,mult_adds.
std::string evaluations_csv(std::span<const StrategyEvaluation> evals);

std::string csv_quote(const std::string& field);
std::string format_double(double v);

// --- complete experiments ------------------------------------------------

struct ExperimentSetup {
    TemplateConfig template_config;
    SynthSpec data;
    double train_frac = 0.5;
    TrainSchedule schedule;
    double k = 1.0;
    std::size_t sample_count = 100;
};

struct TemplateRun {
    ClipDataset train, val;
    TemplateNetwork net;
    GateParams params;
    TrainHistory history;
};

// Generates and splits data for `seed`, then trains the template with every
// seed field overridden by `seed`.
TemplateRun run_template(const ExperimentSetup& setup, std::uint64_t seed);

struct OracleResult {
    std::uint64_t seed = 0;
    std::vector<FusionStrategy> strategies;
    std::vector<double> posterior;  // training-free template accuracy
    std::vector<double> oracle;     // standalone-trained accuracy
    double rho = 0.0;
    StrategyEvaluation best_sampled;  // best of setup.sample_count posterior draws
    double best_sampled_oracle = 0.0;  // oracle accuracy of its unit assignment
    double oracle_median = 0.0;
};

// Throws SizeError when 3^L exceeds kMaxEnumeratedStrategies. Standalone
// trainings fan out over `jobs` threads; results are merged by index.
OracleResult run_oracle(const ExperimentSetup& setup, std::uint64_t seed, std::size_t jobs = 1);

}  // namespace stf
