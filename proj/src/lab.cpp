#include "stfusion/lab.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "stfusion/errors.hpp"

namespace stf {

namespace {

constexpr std::size_t kEvalBatch = 64;
constexpr std::uint64_t kGateStream = 0x6A7E0001;
constexpr std::uint64_t kSampleStream = 0x5A3B1E00;

std::size_t argmax_row(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
    const std::size_t classes = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto row = logits.data().subspan(i * classes, classes);
        if (static_cast<int>(argmax_row(row)) == labels[i]) ++correct;
    }
    return correct;
}

double ungated_accuracy(const TemplateNetwork& net, const ClipDataset& data) {
    NoGradGuard guard;
    std::size_t correct = 0;
    for (const auto& b : sequential_batches(data, kEvalBatch)) correct += count_correct(forward_ungated(net, b.clips), b.labels);
    return data.size() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

void check_finite(double v, const std::string& phase, std::size_t epoch) {
    if (!std::isfinite(v)) {
        throw DivergenceError("training diverged in " + phase + " epoch " + std::to_string(epoch) +
                              ": objective is " + std::to_string(v));
    }
}

struct Accumulator {
    double nll = 0.0, ent = 0.0, wt = 0.0;
    std::size_t seen = 0, correct = 0;

    void add(const ObjectiveBreakdown& b, std::size_t n, std::size_t right) {
        const double w = static_cast<double>(n);
        nll += w * b.nll;
        ent += w * b.entropy_term;
        wt += w * b.weight_term;
        seen += n;
        correct += right;
    }
    ObjectiveBreakdown mean() const {
        ObjectiveBreakdown b;
        const double n = static_cast<double>(std::max<std::size_t>(seen, 1));
        b.nll = nll / n;
        b.entropy_term = ent / n;
        b.weight_term = wt / n;
        b.total = b.nll + b.entropy_term + b.weight_term;
        return b;
    }
    double accuracy() const { return seen == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(seen); }
};

}  // namespace

// ---------------------------------------------------------------------------
// Schedules and histories

void TrainSchedule::validate() const {
    if (batch_size == 0) throw ConfigError("schedule.batch_size must be at least 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("schedule.lr must be positive");
    if (!(lr_decay_factor > 0.0)) throw ConfigError("schedule.lr_decay_factor must be positive");
}

double TrainSchedule::lr_at(std::size_t e) const {
    double out = lr;
    for (auto d : lr_decay_epochs) {
        if (e >= d) out *= lr_decay_factor;
    }
    return out;
}

double TrainHistory::best_val_accuracy() const {
    double best = 0.0;
    for (const auto& e : epochs) best = std::max(best, e.val_accuracy);
    return best;
}

nlohmann::json TrainHistory::to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& e : epochs) {
        arr.push_back({{"phase", e.phase},
                       {"epoch", e.epoch},
                       {"lr", e.lr},
                       {"tau", e.tau},
                       {"nll", e.objective.nll},
                       {"entropy_term", e.objective.entropy_term},
                       {"weight_term", e.objective.weight_term},
                       {"total", e.objective.total},
                       {"train_accuracy", e.train_accuracy},
                       {"val_accuracy", e.val_accuracy}});
    }
    return {{"epochs", arr}, {"final_train_accuracy", final_train_accuracy}, {"final_val_accuracy", final_val_accuracy}};
}

// ---------------------------------------------------------------------------
// Training

TrainHistory train_plain(TemplateNetwork& net, const FusionStrategy& strategy, const ClipDataset& train,
                         const ClipDataset& val, const TrainSchedule& schedule, std::size_t epochs,
                         std::size_t epoch_offset, const std::string& phase) {
    schedule.validate();
    if (train.size() == 0) throw ContractError("train_plain: training set is empty");
    strategy.check_against(net.layout().edge_counts());
    Subnetwork sub = materialize_strategy(net, strategy);
    std::vector<Parameter> params = sub.active_parameters();
    Sgd sgd;
    TrainHistory hist;
    for (std::size_t e = 0; e < epochs; ++e) {
        const double lr = schedule.lr_at(e);
        Accumulator acc;
        BatchIterator it(train, schedule.batch_size, schedule.seed, epoch_offset + e);
        while (auto batch = it.next()) {
            const Tensor logits = sub.forward(batch->clips, BnMode::train);
            const Tensor loss = softmax_cross_entropy(logits, batch->labels);
            check_finite(loss.item(), phase, e);
            zero_grads(params);
            backward(loss);
            sgd.step(params, lr);
            ObjectiveBreakdown b;
            b.nll = b.total = loss.item();
            acc.add(b, batch->labels.size(), count_correct(logits, batch->labels));
        }
        EpochRecord rec;
        rec.phase = phase;
        rec.epoch = e;
        rec.lr = lr;
        rec.objective = acc.mean();
        rec.train_accuracy = acc.accuracy();
        rec.val_accuracy = strategy_accuracy(net, strategy, val);
        hist.epochs.push_back(rec);
    }
    hist.final_train_accuracy = strategy_accuracy(net, strategy, train);
    hist.final_val_accuracy = strategy_accuracy(net, strategy, val);
    return hist;
}

TrainHistory train_template(TemplateNetwork& net, GateParams& params, const ClipDataset& train,
                            const ClipDataset& val, const TrainSchedule& schedule, const ObjectiveConfig& cfg) {
    schedule.validate();
    cfg.validate();
    if (train.size() == 0) throw ContractError("train_template: training set is empty");
    const auto edges = net.layout().edge_counts();
    if (params.edge_counts() != edges) throw ContractError("train_template: gate parameters do not fit the template");

    // Warmup: every gate on, which is the ungated template.
    const FusionStrategy full = FusionStrategy::uniform(edges, FusionUnitKind::S_plus_ST);
    TrainHistory hist = train_plain(net, full, train, val, schedule, schedule.warmup_epochs, 0, "warmup");

    std::vector<Parameter> all(net.parameters().begin(), net.parameters().end());
    const auto gate_params = params.parameters();
    all.insert(all.end(), gate_params.begin(), gate_params.end());
    const auto kernels = net.gated_kernels();

    const std::size_t per_epoch = (train.size() + schedule.batch_size - 1) / schedule.batch_size;
    const std::size_t total_steps = per_epoch * schedule.main_epochs;
    std::size_t step = 0;
    Rng rng(schedule.seed, kGateStream);
    Sgd sgd;
    for (std::size_t e = 0; e < schedule.main_epochs; ++e) {
        const double lr = schedule.lr_at(e);
        Accumulator acc;
        BatchIterator it(train, schedule.batch_size, schedule.seed, schedule.warmup_epochs + e);
        while (auto batch = it.next()) {
            params.set_tau(temperature_schedule(step, total_steps));
            const GateSample gates = sample_gates_concrete(params, rng);
            const Tensor logits = forward_with_gates(net, gates, batch->clips, BnMode::train);
            const Tensor nll = softmax_cross_entropy(logits, batch->labels);
            const ObjectiveTerms terms = objective(nll, params, kernels, cfg, WeightTermRoute::gate_logits_only);
            const ObjectiveBreakdown b = terms.breakdown();
            check_finite(b.total, "vdroppath", e);
            // Decay uses the drop probabilities before this step's update.
            const DecayMap decay = weight_term_decay(params, kernels, cfg);
            zero_grads(all);
            backward(terms.total);
            sgd.step(all, lr, decay);
            acc.add(b, batch->labels.size(), count_correct(logits, batch->labels));
            ++step;
        }
        EpochRecord rec;
        rec.phase = "vdroppath";
        rec.epoch = e;
        rec.lr = lr;
        rec.tau = params.tau();
        rec.objective = acc.mean();
        rec.train_accuracy = acc.accuracy();
        rec.val_accuracy = ungated_accuracy(net, val);
        hist.epochs.push_back(rec);
    }
    hist.final_train_accuracy = ungated_accuracy(net, train);
    hist.final_val_accuracy = ungated_accuracy(net, val);
    return hist;
}

double strategy_accuracy(const TemplateNetwork& net, const FusionStrategy& strategy, const ClipDataset& data) {
    NoGradGuard guard;
    const Subnetwork sub = materialize_strategy(net, strategy);
    std::size_t correct = 0;
    for (const auto& b : sequential_batches(data, kEvalBatch)) {
        correct += count_correct(sub.forward(b.clips, BnMode::eval), b.labels);
    }
    return data.size() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Posterior sampling and evaluation

std::vector<FusionStrategy> sample_strategies(const TemplateNetwork& net, const GateParams& params, std::size_t count,
                                              Rng& rng) {
    if (params.edge_counts() != net.layout().edge_counts()) {
        throw ContractError("sample_strategies: gate parameters do not fit the template");
    }
    std::vector<FusionStrategy> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(recover_strategy(sample_gates_hard(params, rng)));
    return out;
}

StrategyEvaluation evaluate_strategy(const TemplateNetwork& net, const FusionStrategy& strategy,
                                     const ClipDataset& val, const EvaluateOptions& options) {
    strategy.check_against(net.layout().edge_counts());
    if (val.size() == 0) throw ContractError("evaluate_strategy: validation set is empty");
    StrategyEvaluation ev;
    ev.strategy = strategy;
    if (options.recalibrate_with) {
        TemplateNetwork copy = net;
        copy.reset_bn_statistics();
        {
            NoGradGuard guard;
            Subnetwork sub = materialize_strategy(copy, strategy);
            for (const auto& b : sequential_batches(*options.recalibrate_with, kEvalBatch)) sub.forward(b.clips, BnMode::train);
        }
        ev.val_accuracy = strategy_accuracy(copy, strategy, val);
    } else {
        ev.val_accuracy = strategy_accuracy(net, strategy, val);
    }
    const Subnetwork view = materialize_strategy(net, strategy);
    ev.active_param_count = view.active_param_count();
    ev.mult_add_proxy = view.mult_add_proxy();
    return ev;
}

bool ranks_before(const StrategyEvaluation& a, const StrategyEvaluation& b) {
    if (a.val_accuracy != b.val_accuracy) return a.val_accuracy > b.val_accuracy;
    if (a.mult_add_proxy != b.mult_add_proxy) return a.mult_add_proxy < b.mult_add_proxy;
    return a.active_param_count < b.active_param_count;
}

std::size_t select_best_index(std::span<const StrategyEvaluation> evals) {
    if (evals.empty()) throw ContractError("select_best: no evaluations");
    std::size_t best = 0;
    for (std::size_t i = 1; i < evals.size(); ++i) {
        if (ranks_before(evals[i], evals[best])) best = i;
    }
    return best;
}

StrategyEvaluation select_best(std::span<const StrategyEvaluation> evals) { return evals[select_best_index(evals)]; }

std::vector<FusionStrategy> enumerate_all_strategies(std::span<const std::size_t> edge_counts) {
    std::size_t total = 1;
    for (std::size_t i = 0; i < edge_counts.size(); ++i) {
        total *= kFusionUnitCount;
        if (total > kMaxEnumeratedStrategies) {
            throw SizeError("enumerating 3^" + std::to_string(edge_counts.size()) + " strategies exceeds the limit of " +
                            std::to_string(kMaxEnumeratedStrategies));
        }
    }
    std::vector<FusionStrategy> out;
    out.reserve(total);
    std::vector<LayerUnit> units(edge_counts.size());
    for (std::size_t code = 0; code < total; ++code) {
        std::size_t rest = code;
        for (std::size_t i = edge_counts.size(); i-- > 0;) {
            units[i] = static_cast<FusionUnitKind>(rest % kFusionUnitCount);
            rest /= kFusionUnitCount;
        }
        out.push_back(FusionStrategy::from_units(edge_counts, units));
    }
    return out;
}

std::vector<FusionStrategy> enumerate_all_strategies(std::size_t depth) {
    const auto edges = single_block_edge_counts(depth);
    return enumerate_all_strategies(edges);
}

double train_standalone(const FusionStrategy& strategy, const TemplateConfig& config, const ClipDataset& train,
                        const ClipDataset& val, const TrainSchedule& schedule) {
    TemplateNetwork net = TemplateNetwork::build(config, schedule.seed);
    const auto hist =
        train_plain(net, strategy, train, val, schedule, schedule.warmup_epochs + schedule.main_epochs, 0, "standalone");
    return hist.best_val_accuracy();
}

// ---------------------------------------------------------------------------
// Rank correlation

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double rank_correlation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ContractError("rank_correlation: lengths differ (" + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
    }
    if (a.size() < 2) return 0.0;
    const auto ra = average_ranks(a), rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Reports

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_quote(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

const char* PreferenceReport::csv_header() {
    return "layer,p_edge,p_S,p_ST,eq7_S,eq7_ST,freq_S,freq_ST,freq_SST,freq_skip,chosen_unit";
}

std::string PreferenceReport::to_csv() const {
    std::ostringstream os;
    os << csv_header() << '\n';
    for (const auto& r : rows) {
        os << r.layer << ',' << format_double(r.p_edge) << ',' << format_double(r.p_s) << ',' << format_double(r.p_st)
           << ',' << format_double(r.marginal_s) << ',' << format_double(r.marginal_st) << ','
           << format_double(r.frequencies.s) << ',' << format_double(r.frequencies.st) << ','
           << format_double(r.frequencies.s_plus_st) << ',' << format_double(r.frequencies.skip) << ','
           << unit_name(r.chosen_unit) << '\n';
    }
    return os.str();
}

double PreferenceReport::mean_frequency_s() const {
    double s = 0.0;
    for (const auto& r : rows) s += r.frequencies.s;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

double PreferenceReport::mean_frequency_st() const {
    double s = 0.0;
    for (const auto& r : rows) s += r.frequencies.st;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

PreferenceReport layer_preference_report(const GateParams& params, const FusionStrategy& best) {
    if (best.depth() != params.depth()) {
        throw ContractError("layer_preference_report: strategy has " + std::to_string(best.depth()) +
                            " layers, gates have " + std::to_string(params.depth()));
    }
    PreferenceReport rep;
    for (std::size_t i = 0; i < params.depth(); ++i) {
        PreferenceRow r;
        r.layer = i + 1;
        r.p_edge = params.p_edge(i);
        r.p_s = params.p_s(i);
        r.p_st = params.p_st(i);
        r.marginal_s = unit_marginal_probability(r.p_s);
        r.marginal_st = unit_marginal_probability(r.p_st);
        r.frequencies = unit_composition(r.p_s, r.p_st);
        r.chosen_unit = best.layers[i].u;
        rep.rows.push_back(r);
    }
    return rep;
}

std::string evaluations_csv(std::span<const StrategyEvaluation> evals) {
    std::ostringstream os;
    os << "strategy_json,val_accuracy,active_params,mult_adds\n";
    for (const auto& e : evals) {
        os << csv_quote(e.strategy.to_json_string()) << ',' << format_double(e.val_accuracy) << ','
           << e.active_param_count << ',' << e.mult_add_proxy << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Experiments

TemplateRun run_template(const ExperimentSetup& setup, std::uint64_t seed) {
    ClipDataset all = generate_synthetic(setup.data, seed);
    auto [train, val] = split(all, setup.train_frac, seed);
    TemplateConfig cfg = setup.template_config;
    cfg.clip_shape = setup.data.clip_shape;
    cfg.num_classes = setup.data.classes;
    TrainSchedule schedule = setup.schedule;
    schedule.seed = seed;
    TemplateNetwork net = TemplateNetwork::build(cfg, seed);
    const auto edges = net.layout().edge_counts();
    GateParams params = GateParams::create(edges, 0.1);
    ObjectiveConfig obj{setup.k, train.size()};
    TrainHistory hist = train_template(net, params, train, val, schedule, obj);
    return TemplateRun{std::move(train), std::move(val), std::move(net), std::move(params), std::move(hist)};
}

namespace {

// Runs fn(i) for i in [0, n) on up to `jobs` threads.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!failure) failure = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

OracleResult run_oracle(const ExperimentSetup& setup, std::uint64_t seed, std::size_t jobs) {
    TemplateConfig cfg = setup.template_config;
    cfg.clip_shape = setup.data.clip_shape;
    cfg.num_classes = setup.data.classes;
    cfg.validate();
    const auto edges = TemplateLayout::from(cfg).edge_counts();
    OracleResult res;
    res.seed = seed;
    res.strategies = enumerate_all_strategies(edges);  // size guard before any training

    TemplateRun run = run_template(setup, seed);
    const std::size_t n = res.strategies.size();
    res.posterior.assign(n, 0.0);
    res.oracle.assign(n, 0.0);
    TrainSchedule schedule = setup.schedule;
    schedule.seed = seed;
    parallel_for(n, jobs, [&](std::size_t i) {
        res.posterior[i] = evaluate_strategy(run.net, res.strategies[i], run.val).val_accuracy;
        res.oracle[i] = train_standalone(res.strategies[i], cfg, run.train, run.val, schedule);
    });
    res.rho = rank_correlation(res.posterior, res.oracle);
    res.oracle_median = median(res.oracle);

    Rng rng(seed, kSampleStream);
    const auto samples = sample_strategies(run.net, run.params, setup.sample_count, rng);
    std::vector<StrategyEvaluation> evals(samples.size());
    parallel_for(samples.size(), jobs, [&](std::size_t i) { evals[i] = evaluate_strategy(run.net, samples[i], run.val); });
    res.best_sampled = select_best(evals);
    const auto units = res.best_sampled.strategy.units();
    bool found = false;
    for (std::size_t i = 0; i < n && !found; ++i) {
        if (res.strategies[i].units() == units) {
            res.best_sampled_oracle = res.oracle[i];
            found = true;
        }
    }
    if (!found) {
        // Assignments with skipped layers are outside the enumeration.
        res.best_sampled_oracle =
            train_standalone(FusionStrategy::from_units(edges, units), cfg, run.train, run.val, schedule);
    }
    return res;
}

}  // namespace stf
