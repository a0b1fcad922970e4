#include "stfusion/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "stfusion/errors.hpp"

namespace stf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads one JSON object while tracking its dotted path and which keys were
// consumed, so unknown keys can be reported.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <class T>
    T req(const std::string& key) {
        if (!j_.contains(key)) throw ConfigError("missing field '" + child(key) + "'");
        return convert<T>(key);
    }

    template <class T>
    T opt(const std::string& key, T fallback) {
        return j_.contains(key) ? convert<T>(key) : fallback;
    }

    Fields section(const std::string& key) {
        if (!j_.contains(key)) throw ConfigError("missing field '" + child(key) + "'");
        seen_.insert(key);
        return Fields(j_.at(key), child(key));
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError("unknown field '" + child(key) + "'");
        }
    }

private:
    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string label() const { return path_.empty() ? "config" : path_; }

    template <class T>
    T convert(const std::string& key) {
        seen_.insert(key);
        const json& v = j_.at(key);
        const std::string where = child(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(where + ": expected true or false");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(where + ": expected a string");
            return v.get<std::string>();
        } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) throw ConfigError(where + ": expected a number");
            return v.get<double>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_unsigned()) throw ConfigError(where + ": expected a non-negative integer");
            return v.get<T>();
        } else {
            using E = typename T::value_type;
            if (!v.is_array()) throw ConfigError(where + ": expected an array");
            T out;
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (!v[i].is_number_unsigned()) {
                    throw ConfigError(where + "[" + std::to_string(i) + "]: expected a non-negative integer");
                }
                out.push_back(v[i].get<E>());
            }
            return out;
        }
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifact("cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    f << text;
    if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

json read_artifact_json(const fs::path& path) {
    if (!fs::exists(path)) throw MissingArtifact("'" + path.string() + "' not found; run the producing command first");
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw MissingArtifact("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Commands

struct Context {
    RunConfig config;
    std::size_t jobs = 1;
    std::ostream& out;
};

fs::path in_workdir(const Context& ctx, const char* name) { return ctx.config.workdir / name; }

void prepare_workdir(const Context& ctx) {
    std::error_code ec;
    fs::create_directories(ctx.config.workdir, ec);
    if (ec || !fs::is_directory(ctx.config.workdir)) {
        throw ConfigError("paths.workdir: cannot create '" + ctx.config.workdir.string() + "': " + ec.message());
    }
}

TemplateConfig effective_template(const RunConfig& c) {
    TemplateConfig t = c.template_config;
    t.clip_shape = c.data.clip_shape;
    t.num_classes = c.data.classes;
    return t;
}

std::pair<ClipDataset, ClipDataset> load_split(const Context& ctx) {
    const fs::path path = in_workdir(ctx, kDatasetFile);
    if (!fs::exists(path)) throw MissingArtifact("'" + path.string() + "' not found; run generate or train first");
    ClipDataset data = load_dataset(path);
    const auto& m = data.manifest;
    if (!m.contains("spec") || m["spec"] != ctx.config.data.to_json() || !m.contains("seed") ||
        m["seed"] != ctx.config.data_seed) {
        throw ConfigError("data: '" + path.string() + "' was generated from a different data section or seed");
    }
    return split(data, ctx.config.train_frac, ctx.config.data_seed);
}

struct Checkpoint {
    TemplateNetwork net;
    GateParams gates;
};

Checkpoint load_checkpoint(const Context& ctx) {
    const json weights = read_artifact_json(in_workdir(ctx, kWeightsFile));
    const json gates = read_artifact_json(in_workdir(ctx, kGatesFile));
    Checkpoint c{TemplateNetwork::build(effective_template(ctx.config), ctx.config.schedule.seed), {}};
    c.net.load_state_json(weights);
    try {
        c.gates = GateParams::from_json(gates, c.net.layout().edge_counts());
    } catch (const json::exception& e) {
        throw FormatError(std::string("gates.json: ") + e.what());
    }
    return c;
}

int cmd_generate(Context& ctx) {
    prepare_workdir(ctx);
    const ClipDataset data = generate_synthetic(ctx.config.data, ctx.config.data_seed);
    const fs::path path = in_workdir(ctx, kDatasetFile);
    save_dataset(data, path);
    const ClipShape cs = data.clip_shape();
    ctx.out << "wrote " << path.string() << ": " << data.size() << " clips of " << cs.channels << "x" << cs.time << "x"
            << cs.height << "x" << cs.width << ", " << data.num_classes() << " classes, mode "
            << to_string(ctx.config.data.mode) << ", seed " << ctx.config.data_seed << "\n";
    return kExitOk;
}

int cmd_train(Context& ctx) {
    prepare_workdir(ctx);
    const RunConfig& c = ctx.config;
    const ClipDataset data = generate_synthetic(c.data, c.data_seed);
    save_dataset(data, in_workdir(ctx, kDatasetFile));
    auto [train, val] = split(data, c.train_frac, c.data_seed);

    TemplateNetwork net = TemplateNetwork::build(effective_template(c), c.schedule.seed);
    GateParams gates = GateParams::create(net.layout().edge_counts(), c.initial_drop);
    const ObjectiveConfig objective{c.k, train.size()};
    const TrainHistory hist = train_template(net, gates, train, val, c.schedule, objective);

    write_text(in_workdir(ctx, kWeightsFile), json_text(net.state_to_json()));
    write_text(in_workdir(ctx, kGatesFile), json_text(gates.to_json()));
    write_text(in_workdir(ctx, kHistoryFile), json_text(hist.to_json()));

    for (const auto& e : hist.epochs) {
        ctx.out << e.phase << " " << e.epoch << "  lr " << e.lr << "  loss " << e.objective.total << "  train "
                << e.train_accuracy << "  val " << e.val_accuracy << "\n";
    }
    ctx.out << "final train " << hist.final_train_accuracy << "  val " << hist.final_val_accuracy << "\n";
    return kExitOk;
}

int cmd_sample_eval(Context& ctx) {
    const RunConfig& c = ctx.config;
    Checkpoint ck = load_checkpoint(ctx);
    auto [train, val] = load_split(ctx);

    Rng rng(c.sample_seed);
    const auto strategies = sample_strategies(ck.net, ck.gates, c.sample_count, rng);
    EvaluateOptions options;
    if (c.recalibrate_bn) options.recalibrate_with = &train;
    std::vector<StrategyEvaluation> evals;
    evals.reserve(strategies.size());
    for (const auto& s : strategies) evals.push_back(evaluate_strategy(ck.net, s, val, options));
    const StrategyEvaluation best = select_best(evals);
    std::stable_sort(evals.begin(), evals.end(), ranks_before);

    write_text(in_workdir(ctx, kEvaluationsFile), evaluations_csv(evals));
    const json best_json = {{"strategy", best.strategy.to_json()},
                            {"val_accuracy", best.val_accuracy},
                            {"active_params", best.active_param_count},
                            {"mult_adds", best.mult_add_proxy}};
    write_text(in_workdir(ctx, kBestStrategyFile), json_text(best_json));
    ctx.out << "evaluated " << evals.size() << " sampled strategies; best val accuracy " << best.val_accuracy
            << "\nbest " << best.strategy.to_json_string() << "\n";
    return kExitOk;
}

int cmd_report(Context& ctx) {
    Checkpoint ck = load_checkpoint(ctx);
    const json best = read_artifact_json(in_workdir(ctx, kBestStrategyFile));
    FusionStrategy strategy;
    try {
        strategy = FusionStrategy::from_json(best.at("strategy"));
    } catch (const json::exception& e) {
        throw FormatError(std::string("best_strategy.json: ") + e.what());
    }
    const PreferenceReport report = layer_preference_report(ck.gates, strategy);
    write_text(in_workdir(ctx, kPreferenceFile), report.to_csv());
    ctx.out << report.to_csv() << "mean freq_S " << report.mean_frequency_s() << "  mean freq_ST "
            << report.mean_frequency_st() << "\n";
    return kExitOk;
}

json evaluation_json(const StrategyEvaluation& e) {
    return {{"strategy", e.strategy.to_json()},
            {"val_accuracy", e.val_accuracy},
            {"active_params", e.active_param_count},
            {"mult_adds", e.mult_add_proxy}};
}

int cmd_oracle(Context& ctx) {
    const RunConfig& c = ctx.config;
    // Fail on the size guard before any directory is touched.
    enumerate_all_strategies(TemplateLayout::from(effective_template(c)).edge_counts());
    prepare_workdir(ctx);

    const ExperimentSetup setup = c.experiment();
    std::ostringstream csv;
    csv << "seed,index,strategy_json,posterior_accuracy,oracle_accuracy\n";
    json runs = json::array();
    double rho_sum = 0.0;
    const auto seeds = c.effective_oracle_seeds();
    for (auto seed : seeds) {
        const OracleResult r = run_oracle(setup, seed, ctx.jobs);
        for (std::size_t i = 0; i < r.strategies.size(); ++i) {
            csv << seed << ',' << i << ',' << csv_quote(r.strategies[i].to_json_string()) << ','
                << format_double(r.posterior[i]) << ',' << format_double(r.oracle[i]) << '\n';
        }
        runs.push_back({{"seed", seed},
                        {"rho", r.rho},
                        {"posterior", r.posterior},
                        {"oracle", r.oracle},
                        {"oracle_median", r.oracle_median},
                        {"best_sampled", evaluation_json(r.best_sampled)},
                        {"best_sampled_oracle", r.best_sampled_oracle}});
        rho_sum += r.rho;
        ctx.out << "seed " << seed << "  rho " << r.rho << "  best sampled oracle " << r.best_sampled_oracle
                << "  oracle median " << r.oracle_median << "\n";
    }
    const double mean_rho = rho_sum / static_cast<double>(seeds.size());
    write_text(in_workdir(ctx, kOracleFile), csv.str());
    write_text(in_workdir(ctx, kOracleRhoFile), json_text({{"runs", runs}, {"mean_rho", mean_rho}}));
    ctx.out << "mean rho " << mean_rho << "\n";
    return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    Fields root(j, "");

    Fields t = root.section("template");
    c.template_config.num_blocks = t.req<std::size_t>("num_blocks");
    c.template_config.layers_per_block = t.req<std::size_t>("layers_per_block");
    c.template_config.growth_channels = t.req<std::size_t>("growth_channels");
    c.template_config.stem_channels = t.req<std::size_t>("stem_channels");
    if (t.has("kernel_sizes")) {
        Fields k = t.section("kernel_sizes");
        c.template_config.kernel_sizes = {k.req<std::size_t>("kt"), k.req<std::size_t>("kh"), k.req<std::size_t>("kw")};
        k.finish();
    }
    t.finish();

    Fields s = root.section("schedule");
    c.schedule.warmup_epochs = s.req<std::size_t>("warmup_epochs");
    c.schedule.main_epochs = s.req<std::size_t>("main_epochs");
    c.schedule.batch_size = s.req<std::size_t>("batch_size");
    c.schedule.lr = s.req<double>("lr");
    c.schedule.lr_decay_epochs = s.opt<std::vector<std::size_t>>("lr_decay_epochs", {});
    c.schedule.lr_decay_factor = s.opt<double>("lr_decay_factor", 0.1);
    c.schedule.seed = s.req<std::uint64_t>("seed");
    s.finish();

    Fields o = root.section("objective");
    c.k = o.req<double>("k");
    c.initial_drop = o.opt<double>("initial_drop", 0.1);
    o.finish();

    Fields d = root.section("data");
    c.data.mode = parse_synth_mode(d.req<std::string>("mode"));
    c.data.classes = d.req<std::size_t>("classes");
    c.data.clips_per_class = d.req<std::size_t>("clips_per_class");
    const auto shape = d.req<std::vector<std::size_t>>("clip_shape");
    if (shape.size() != 4) throw ConfigError("data.clip_shape: expected [C, T, H, W]");
    c.data.clip_shape = {shape[0], shape[1], shape[2], shape[3]};
    c.data.noise_sigma = d.req<double>("noise_sigma");
    c.data_seed = d.req<std::uint64_t>("seed");
    c.train_frac = d.req<double>("train_frac");
    d.finish();

    Fields sm = root.section("sampling");
    c.sample_count = sm.req<std::size_t>("count");
    c.sample_seed = sm.req<std::uint64_t>("seed");
    c.recalibrate_bn = sm.opt<bool>("recalibrate_bn", false);
    sm.finish();

    if (root.has("oracle")) {
        Fields orc = root.section("oracle");
        c.oracle_seeds = orc.opt<std::vector<std::uint64_t>>("seeds", {});
        orc.finish();
    }

    if (root.has("paths")) {
        Fields p = root.section("paths");
        c.workdir = p.opt<std::string>("workdir", "");
        p.finish();
    }
    root.finish();
    return c;
}

json RunConfig::to_json() const {
    const auto& t = template_config;
    const auto& cs = data.clip_shape;
    json j = {
        {"template",
         {{"num_blocks", t.num_blocks},
          {"layers_per_block", t.layers_per_block},
          {"growth_channels", t.growth_channels},
          {"stem_channels", t.stem_channels},
          {"kernel_sizes", {{"kt", t.kernel_sizes.kt}, {"kh", t.kernel_sizes.kh}, {"kw", t.kernel_sizes.kw}}}}},
        {"schedule",
         {{"warmup_epochs", schedule.warmup_epochs},
          {"main_epochs", schedule.main_epochs},
          {"batch_size", schedule.batch_size},
          {"lr", schedule.lr},
          {"lr_decay_epochs", schedule.lr_decay_epochs},
          {"lr_decay_factor", schedule.lr_decay_factor},
          {"seed", schedule.seed}}},
        {"objective", {{"k", k}, {"initial_drop", initial_drop}}},
        {"data",
         {{"mode", to_string(data.mode)},
          {"classes", data.classes},
          {"clips_per_class", data.clips_per_class},
          {"clip_shape", {cs.channels, cs.time, cs.height, cs.width}},
          {"noise_sigma", data.noise_sigma},
          {"seed", data_seed},
          {"train_frac", train_frac}}},
        {"sampling", {{"count", sample_count}, {"seed", sample_seed}, {"recalibrate_bn", recalibrate_bn}}},
        {"oracle", {{"seeds", oracle_seeds}}},
        {"paths", {{"workdir", workdir.string()}}}};
    return j;
}

void RunConfig::validate() const {
    data.validate();
    effective_template(*this).validate();
    schedule.validate();
    ObjectiveConfig{k, 1}.validate();
    if (!(initial_drop > 0.0 && initial_drop < 1.0)) throw ConfigError("objective.initial_drop must lie in (0, 1)");
    if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("data.train_frac must lie in (0, 1)");
    if (data.clips_per_class < 2) throw ConfigError("data.clips_per_class must be at least 2 to split");
    if (sample_count < 1) throw ConfigError("sampling.count must be at least 1");
    if (workdir.empty()) throw ConfigError("missing field 'paths.workdir' (or pass --workdir)");
}

void RunConfig::override_seed(std::uint64_t seed) {
    schedule.seed = seed;
    data_seed = seed;
    sample_seed = seed;
    oracle_seeds = {seed};
}

std::vector<std::uint64_t> RunConfig::effective_oracle_seeds() const {
    return oracle_seeds.empty() ? std::vector<std::uint64_t>{data_seed} : oracle_seeds;
}

ExperimentSetup RunConfig::experiment() const {
    ExperimentSetup s;
    s.template_config = effective_template(*this);
    s.data = data;
    s.train_frac = train_frac;
    s.schedule = schedule;
    s.k = k;
    s.sample_count = sample_count;
    return s;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return RunConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Entry points

namespace {

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Spatiotemporal fusion strategy search on synthetic clips"};
    app.name("stfusion");
    app.require_subcommand(1);

    std::string config_path, workdir;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"generate", "write the synthetic dataset"},
        {"train", "warmup then v-DropPath training of the template"},
        {"sample-eval", "sample strategies from the trained gates and evaluate them"},
        {"report", "per-layer preference report"},
        {"oracle", "train every strategy standalone and compare rankings"}};
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "run configuration JSON")->required();
        sub->add_option("--workdir", workdir, "overrides paths.workdir");
        sub->add_option("--seed", seed, "overrides every seed in the config");
        sub->add_option("--jobs", jobs, "worker threads for oracle")->check(CLI::PositiveNumber);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        RunConfig config = load_run_config(config_path);
        if (!workdir.empty()) config.workdir = workdir;
        if (seed) config.override_seed(*seed);
        config.validate();
        Context ctx{std::move(config), jobs, out};
        if (command == "generate") return cmd_generate(ctx);
        if (command == "train") return cmd_train(ctx);
        if (command == "sample-eval") return cmd_sample_eval(ctx);
        if (command == "report") return cmd_report(ctx);
        return cmd_oracle(ctx);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        err << "diverged: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const MissingArtifact& e) {
        err << "missing artifact: " << e.what() << "\n";
        return kExitMissingArtifact;
    } catch (const FormatError& e) {
        err << "unreadable artifact: " << e.what() << "\n";
        return kExitMissingArtifact;
    } catch (const SizeError& e) {
        err << "size guard: " << e.what() << "\n";
        return kExitSizeGuard;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv = {"stfusion"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

int run(int argc, char** argv) { return dispatch(argc, argv, std::cout, std::cerr); }

}  // namespace stf::cli
