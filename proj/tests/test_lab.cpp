#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "stfusion/errors.hpp"
#include "stfusion/lab.hpp"

using namespace stf;

namespace {

SynthSpec tiny_data(SynthMode mode, std::size_t classes, std::size_t per_class, double noise = 0.05) {
    SynthSpec s;
    s.mode = mode;
    s.classes = classes;
    s.clips_per_class = per_class;
    s.clip_shape = {1, 6, 8, 8};
    s.noise_sigma = noise;
    return s;
}

TemplateConfig tiny_template(std::size_t layers, std::size_t classes) {
    TemplateConfig c;
    c.num_blocks = 1;
    c.layers_per_block = layers;
    c.growth_channels = 4;
    c.stem_channels = 4;
    c.clip_shape = {1, 6, 8, 8};
    c.num_classes = classes;
    return c;
}

TrainSchedule tiny_schedule(std::size_t warmup, std::size_t main, std::uint64_t seed = 1) {
    TrainSchedule s;
    s.warmup_epochs = warmup;
    s.main_epochs = main;
    s.batch_size = 8;
    s.lr = 0.05;
    s.lr_decay_epochs = {};
    s.seed = seed;
    return s;
}

StrategyEvaluation eval(double acc, std::size_t params, std::size_t mult_adds, std::size_t tag = 0) {
    StrategyEvaluation e;
    e.val_accuracy = acc;
    e.active_param_count = params;
    e.mult_add_proxy = mult_adds;
    e.strategy.layers.push_back(LayerTriplet{1, {true}, FusionUnitKind::S});
    e.strategy.layers[0].l = tag + 1;
    return e;
}

struct Trained {
    ClipDataset train, val;
    TemplateNetwork net;
    GateParams params;
    TrainHistory hist;
};

Trained train_tiny(SynthMode mode, std::size_t warmup, std::size_t main, std::uint64_t seed = 1,
                   std::size_t per_class = 8) {
    auto all = generate_synthetic(tiny_data(mode, 4, per_class), seed);
    auto [tr, va] = split(all, 0.5, seed);
    auto net = TemplateNetwork::build(tiny_template(2, 4), seed);
    auto params = GateParams::create(net.layout().edge_counts(), 0.1);
    auto hist = train_template(net, params, tr, va, tiny_schedule(warmup, main, seed), {1.0, tr.size()});
    return {std::move(tr), std::move(va), std::move(net), std::move(params), std::move(hist)};
}

}  // namespace

TEST_CASE("learning-rate schedule is phase relative") {
    TrainSchedule s;
    s.lr = 0.1;
    s.lr_decay_epochs = {3, 6};
    s.lr_decay_factor = 0.5;
    CHECK(s.lr_at(0) == 0.1);
    CHECK(s.lr_at(2) == 0.1);
    CHECK(s.lr_at(3) == doctest::Approx(0.05));
    CHECK(s.lr_at(6) == doctest::Approx(0.025));
    CHECK(s.lr_at(100) == doctest::Approx(0.025));

    s.batch_size = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.batch_size = 4;
    s.lr = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("template training without a main phase is plain training") {
    auto all = generate_synthetic(tiny_data(SynthMode::mixed, 4, 6), 3);
    auto [tr, va] = split(all, 0.5, 3);
    const auto cfg = tiny_template(2, 4);
    const auto sched = tiny_schedule(3, 0, 5);

    auto a = TemplateNetwork::build(cfg, 9);
    auto gates = GateParams::create(a.layout().edge_counts(), 0.1);
    auto ha = train_template(a, gates, tr, va, sched, {1.0, tr.size()});

    auto b = TemplateNetwork::build(cfg, 9);
    const auto full = FusionStrategy::uniform(b.layout().edge_counts(), FusionUnitKind::S_plus_ST);
    auto hb = train_plain(b, full, tr, va, sched, 3, 0, "warmup");

    CHECK(a.checksum() == b.checksum());
    CHECK(a.state_to_json() == b.state_to_json());
    CHECK(ha.to_json() == hb.to_json());
    CHECK(gates.to_json() == GateParams::create(a.layout().edge_counts(), 0.1).to_json());
}

TEST_CASE("training is reproducible from the seed") {
    auto x = train_tiny(SynthMode::mixed, 2, 3, 4);
    auto y = train_tiny(SynthMode::mixed, 2, 3, 4);
    CHECK(x.hist.to_json().dump() == y.hist.to_json().dump());
    CHECK(x.params.to_json() == y.params.to_json());
    CHECK(x.net.checksum() == y.net.checksum());

    auto z = train_tiny(SynthMode::mixed, 2, 3, 5);
    CHECK(x.hist.to_json().dump() != z.hist.to_json().dump());
}

TEST_CASE("history records both phases") {
    auto t = train_tiny(SynthMode::mixed, 2, 3, 2);
    REQUIRE(t.hist.epochs.size() == 5);
    CHECK(t.hist.epochs[0].phase == "warmup");
    CHECK(t.hist.epochs[0].tau == 0.0);
    CHECK(t.hist.epochs[1].epoch == 1);
    CHECK(t.hist.epochs[2].phase == "vdroppath");
    CHECK(t.hist.epochs[2].epoch == 0);
    for (const auto& e : t.hist.epochs) {
        CHECK(e.objective.total ==
              doctest::Approx(e.objective.nll + e.objective.entropy_term + e.objective.weight_term));
        CHECK(e.train_accuracy >= 0.0);
        CHECK(e.train_accuracy <= 1.0);
    }
    // Temperature anneals across the main phase.
    CHECK(t.hist.epochs[2].tau > t.hist.epochs[4].tau);
    CHECK(t.hist.epochs[4].tau >= 0.1);
    const auto j = t.hist.to_json();
    CHECK(j["epochs"].size() == 5);
    CHECK(j.contains("final_val_accuracy"));
}

TEST_CASE("template training fits mixed data") {
    auto t = train_tiny(SynthMode::mixed, 10, 20, 1, 16);
    CHECK(t.hist.final_train_accuracy > 0.9);
    const auto& first_main = t.hist.epochs[10];
    REQUIRE(first_main.phase == "vdroppath");
    CHECK(t.hist.epochs.back().objective.total < first_main.objective.total);
}

TEST_CASE("training rejects empty data and mismatched gates") {
    auto all = generate_synthetic(tiny_data(SynthMode::mixed, 4, 2), 3);
    ClipDataset empty = all;
    empty.labels.clear();
    auto net = TemplateNetwork::build(tiny_template(2, 4), 1);
    auto gates = GateParams::create(net.layout().edge_counts(), 0.1);
    CHECK_THROWS_AS(train_template(net, gates, empty, all, tiny_schedule(1, 1), {1.0, 1}), ContractError);
    const auto full = FusionStrategy::uniform(net.layout().edge_counts(), FusionUnitKind::S);
    CHECK_THROWS_AS(train_plain(net, full, empty, all, tiny_schedule(1, 1), 1), ContractError);

    const std::vector<std::size_t> other = {1, 2, 3};
    auto wrong = GateParams::create(other, 0.1);
    CHECK_THROWS_AS(train_template(net, wrong, all, all, tiny_schedule(1, 1), {1.0, all.size()}), ContractError);
}

TEST_CASE("posterior sampling") {
    auto net = TemplateNetwork::build(tiny_template(3, 2), 1);
    const auto edges = net.layout().edge_counts();
    auto params = GateParams::create(edges, 0.1);
    Rng rng(1);
    CHECK(sample_strategies(net, params, 0, rng).empty());

    params.set_all(0.0);
    for (const auto& s : sample_strategies(net, params, 20, rng)) {
        CHECK(s == FusionStrategy::uniform(edges, FusionUnitKind::S_plus_ST));
    }

    params.set_drop(1, 0.0, 1.0, 0.0);
    for (const auto& s : sample_strategies(net, params, 20, rng)) {
        CHECK(s.layers[0].u == FusionUnitKind::S_plus_ST);
        CHECK(s.layers[1].u == FusionUnitKind::ST);
        CHECK(s.layers[2].u == FusionUnitKind::S_plus_ST);
    }

    Rng r1(7), r2(7);
    params.set_all(0.4);
    CHECK(sample_strategies(net, params, 30, r1) == sample_strategies(net, params, 30, r2));

    const std::vector<std::size_t> other = {1, 2};
    CHECK_THROWS_AS(sample_strategies(net, GateParams::create(other), 1, rng), ContractError);
}

TEST_CASE("training-free evaluation") {
    auto t = train_tiny(SynthMode::mixed, 3, 2, 6);
    const auto edges = t.net.layout().edge_counts();
    const auto full = FusionStrategy::uniform(edges, FusionUnitKind::S_plus_ST);

    const double before = t.net.checksum();
    const auto ev = evaluate_strategy(t.net, full, t.val);
    CHECK(ev.val_accuracy == t.hist.final_val_accuracy);
    CHECK(t.net.checksum() == before);
    CHECK(evaluate_strategy(t.net, full, t.val) == ev);

    const auto s_only = FusionStrategy::uniform(edges, FusionUnitKind::S);
    const auto es = evaluate_strategy(t.net, s_only, t.val);
    CHECK(es.active_param_count < ev.active_param_count);
    CHECK(es.mult_add_proxy < ev.mult_add_proxy);

    EvaluateOptions opt;
    opt.recalibrate_with = &t.train;
    const auto recal = evaluate_strategy(t.net, s_only, t.val, opt);
    CHECK(t.net.checksum() == before);
    CHECK(recal.active_param_count == es.active_param_count);
    CHECK(evaluate_strategy(t.net, s_only, t.val, opt) == recal);
}

TEST_CASE("evaluation rejects an empty validation set") {
    auto net = TemplateNetwork::build(tiny_template(2, 4), 1);
    const ClipDataset empty;
    const auto full = FusionStrategy::uniform(net.layout().edge_counts(), FusionUnitKind::S_plus_ST);
    CHECK_THROWS_AS(evaluate_strategy(net, full, empty), ContractError);
}

TEST_CASE("skipping every layer leaves temporal classes at chance") {
    // With every layer skipped only per-frame stem features reach the
    // pooled head, which cannot see frame order.
    auto all = generate_synthetic(tiny_data(SynthMode::temporal_only, 4, 32), 12);
    auto [tr, va] = split(all, 0.5, 12);
    auto net = TemplateNetwork::build(tiny_template(2, 4), 12);
    auto gates = GateParams::create(net.layout().edge_counts(), 0.1);
    train_template(net, gates, tr, va, tiny_schedule(4, 4, 12), {1.0, tr.size()});
    const auto skip = FusionStrategy::uniform(net.layout().edge_counts(), LayerUnit{});
    const double acc = evaluate_strategy(net, skip, va).val_accuracy;
    const double sigma = std::sqrt(0.25 * 0.75 / static_cast<double>(va.size()));
    CHECK(std::abs(acc - 0.25) <= 3.0 * sigma);
}

TEST_CASE("spatial-only strategies cannot see frame order") {
    auto t = train_tiny(SynthMode::temporal_only, 2, 1, 3);
    const auto edges = t.net.layout().edge_counts();
    const auto s_only = FusionStrategy::uniform(edges, FusionUnitKind::S);
    const auto sub = materialize_strategy(t.net, s_only);

    const ClipShape cs = t.val.clip_shape();
    const std::size_t plane = cs.height * cs.width;
    Tensor reversed = t.val.clips.detach();
    const auto src = t.val.clips.data();
    auto dst = reversed.mutable_data();
    for (std::size_t i = 0; i < t.val.size(); ++i) {
        for (std::size_t f = 0; f < cs.time; ++f) {
            const double* from = src.data() + (i * cs.time + f) * plane;
            std::copy(from, from + plane, dst.data() + (i * cs.time + (cs.time - 1 - f)) * plane);
        }
    }
    NoGradGuard guard;
    const Tensor a = sub.forward(t.val.clips, BnMode::eval);
    const Tensor b = sub.forward(reversed, BnMode::eval);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
    CHECK(diff < 1e-9);
}

TEST_CASE("selection rule") {
    std::vector<StrategyEvaluation> one = {eval(0.5, 10, 10)};
    CHECK(select_best_index(one) == 0);

    std::vector<StrategyEvaluation> three = {eval(0.3, 1, 1), eval(0.9, 9, 9), eval(0.7, 1, 1)};
    CHECK(select_best_index(three) == 1);
    CHECK(select_best(three) == three[1]);

    // Ties on accuracy go to fewer mult-adds, then fewer parameters, then the earlier entry.
    std::vector<StrategyEvaluation> ties = {eval(0.8, 5, 20, 0), eval(0.8, 9, 10, 1), eval(0.8, 4, 10, 2),
                                            eval(0.8, 4, 10, 3)};
    CHECK(select_best_index(ties) == 2);
    CHECK(ranks_before(ties[2], ties[1]));
    CHECK_FALSE(ranks_before(ties[2], ties[3]));
    CHECK_FALSE(ranks_before(ties[3], ties[2]));

    // Strictly increasing transforms of accuracy keep the winner.
    auto squashed = three;
    for (auto& e : squashed) e.val_accuracy = std::exp(3.0 * e.val_accuracy) - 7.0;
    CHECK(select_best_index(squashed) == select_best_index(three));

    std::vector<StrategyEvaluation> none;
    CHECK_THROWS_AS(select_best_index(none), ContractError);
}

TEST_CASE("exhaustive enumeration") {
    for (std::size_t depth : {1u, 2u, 3u}) {
        const auto all = enumerate_all_strategies(depth);
        CHECK(all.size() == static_cast<std::size_t>(std::pow(3, depth)));
        std::set<std::string> seen;
        for (const auto& s : all) {
            CHECK(seen.insert(s.to_json_string()).second);
            for (const auto& t : s.layers) {
                CHECK(t.u.has_value());
                CHECK(std::ranges::all_of(t.v, [](bool b) { return b; }));
            }
        }
    }
    const auto two = enumerate_all_strategies(2);
    CHECK(two[0].layers[0].u == FusionUnitKind::S);
    CHECK(two[0].layers[1].u == FusionUnitKind::S);
    CHECK(two[1].layers[1].u == FusionUnitKind::ST);
    CHECK(two[3].layers[0].u == FusionUnitKind::ST);
    CHECK(two[8].layers[0].u == FusionUnitKind::S_plus_ST);
    CHECK(enumerate_all_strategies(10).size() == 59049);
    CHECK_THROWS_AS(enumerate_all_strategies(11), SizeError);
}

TEST_CASE("rank correlation") {
    const std::vector<double> a = {1, 2, 3, 4};
    const std::vector<double> rev = {4, 3, 2, 1};
    const std::vector<double> swap = {1, 2, 4, 3};
    const std::vector<double> scaled = {10, 200, 3000, 40000};
    CHECK(rank_correlation(a, a) == doctest::Approx(1.0));
    CHECK(rank_correlation(a, scaled) == doctest::Approx(1.0));
    CHECK(rank_correlation(a, rev) == doctest::Approx(-1.0));
    CHECK(rank_correlation(a, swap) == doctest::Approx(0.8));
    const std::vector<double> flat = {2, 2, 2, 2};
    CHECK(rank_correlation(a, flat) == 0.0);
    // Ties take average ranks: [1, 2.5, 2.5, 4] against [1, 2, 3, 4].
    const std::vector<double> tied = {1, 5, 5, 9};
    CHECK(rank_correlation(a, tied) == doctest::Approx(4.5 / std::sqrt(5.0 * 4.5)));
    const std::vector<double> shorter = {1, 2, 3};
    CHECK_THROWS_AS(rank_correlation(a, shorter), ContractError);
}

TEST_CASE("layer preference report") {
    const std::vector<std::size_t> edges = {1, 2};
    auto params = GateParams::create(edges, 0.1);
    params.set_drop(0, 0.0, 0.25, 0.25);
    params.set_drop(1, 0.5, 0.0, 1.0);
    std::vector<LayerUnit> units = {FusionUnitKind::S_plus_ST, FusionUnitKind::S};
    const auto best = FusionStrategy::from_units(edges, units);
    const auto rep = layer_preference_report(params, best);
    REQUIRE(rep.rows.size() == 2);

    const auto& r0 = rep.rows[0];
    CHECK(r0.layer == 1);
    CHECK(r0.marginal_s == doctest::Approx(0.5));
    CHECK(r0.marginal_st == doctest::Approx(0.5));
    CHECK(r0.frequencies.s_plus_st == doctest::Approx(0.5625));
    CHECK(r0.frequencies.skip == doctest::Approx(0.0625));

    const auto& r1 = rep.rows[1];
    CHECK(r1.p_edge == doctest::Approx(0.5));
    CHECK(r1.frequencies.s == doctest::Approx(1.0));
    CHECK(r1.frequencies.st == doctest::Approx(0.0));
    CHECK(r1.marginal_st == doctest::Approx(0.0));
    CHECK(r1.chosen_unit == FusionUnitKind::S);

    for (const auto& r : rep.rows) {
        const auto& f = r.frequencies;
        CHECK(f.s + f.st + f.s_plus_st + f.skip == doctest::Approx(1.0));
    }
    CHECK(rep.mean_frequency_s() == doctest::Approx((0.1875 + 1.0) / 2));

    const std::string csv = rep.to_csv();
    CHECK(csv.rfind(std::string(PreferenceReport::csv_header()) + "\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.find(",S+ST\n") != std::string::npos);

    std::vector<LayerUnit> shallow = {FusionUnitKind::S};
    const std::vector<std::size_t> one = {1};
    CHECK_THROWS_AS(layer_preference_report(params, FusionStrategy::from_units(one, shallow)), ContractError);
}

TEST_CASE("keep-everything gates report S+ST at every layer") {
    const auto edges = single_block_edge_counts(3);
    auto params = GateParams::create(edges, 0.1);
    for (std::size_t i = 0; i < params.depth(); ++i) params.set_drop(i, 0.1, 0.0, 0.0);
    const auto rep = layer_preference_report(params, FusionStrategy::uniform(edges, FusionUnitKind::S_plus_ST));
    for (const auto& r : rep.rows) {
        CHECK(r.frequencies.s_plus_st == 1.0);
        CHECK(r.marginal_s == 1.0);
        CHECK(r.marginal_st == 1.0);
    }
}

TEST_CASE("degenerate posteriors give a single strategy") {
    auto net = TemplateNetwork::build(tiny_template(3, 2), 1);
    const auto edges = net.layout().edge_counts();
    auto params = GateParams::create(edges, 0.1);
    params.set_all(0.0);
    for (std::size_t i = 0; i < params.depth(); ++i) params.set_drop(i, 0.0, i == 1 ? 1.0 : 0.0, i == 1 ? 0.0 : 1.0);
    Rng rng(3);
    const auto draws = sample_strategies(net, params, 50, rng);
    std::set<std::string> distinct;
    for (const auto& s : draws) distinct.insert(s.to_json_string());
    CHECK(distinct.size() == 1);
    CHECK(draws[0].units() == std::vector<LayerUnit>{FusionUnitKind::S, FusionUnitKind::ST, FusionUnitKind::S});
    const auto rep = layer_preference_report(params, draws[0]);
    CHECK(rep.mean_frequency_s() == doctest::Approx(2.0 / 3.0));
    CHECK(rep.mean_frequency_st() == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("csv helpers") {
    CHECK(csv_quote("plain") == "plain");
    CHECK(csv_quote("a,b") == "\"a,b\"");
    CHECK(csv_quote("say \"hi\"") == "\"say \"\"hi\"\"\"");
    CHECK(std::stod(format_double(0.1)) == 0.1);
    CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);

    std::vector<StrategyEvaluation> evals = {eval(0.75, 12, 34)};
    const std::string csv = evaluations_csv(evals);
    CHECK(csv.rfind("strategy_json,val_accuracy,active_params,mult_adds\n", 0) == 0);
    CHECK(csv.find("\"{\"\"L\"\":1,\"\"layers\"\"") != std::string::npos);
    CHECK(csv.find(",0.75,12,34\n") != std::string::npos);
}

TEST_CASE("standalone training is deterministic") {
    auto all = generate_synthetic(tiny_data(SynthMode::mixed, 4, 6), 2);
    auto [tr, va] = split(all, 0.5, 2);
    const auto cfg = tiny_template(2, 4);
    const auto s = enumerate_all_strategies(2)[4];
    const auto sched = tiny_schedule(1, 2, 8);
    const double a = train_standalone(s, cfg, tr, va, sched);
    const double b = train_standalone(s, cfg, tr, va, sched);
    CHECK(a == b);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
}

TEST_CASE("oracle experiment plumbing") {
    ExperimentSetup setup;
    setup.template_config = tiny_template(1, 4);
    setup.data = tiny_data(SynthMode::mixed, 4, 4);
    setup.schedule = tiny_schedule(1, 1);
    setup.sample_count = 5;
    const auto one = run_oracle(setup, 3, 1);
    const auto two = run_oracle(setup, 3, 2);
    CHECK(one.strategies.size() == 3);
    CHECK(one.posterior.size() == 3);
    CHECK(one.oracle == two.oracle);
    CHECK(one.posterior == two.posterior);
    CHECK(one.rho == two.rho);
    CHECK(one.best_sampled == two.best_sampled);
    CHECK(one.rho == rank_correlation(one.posterior, one.oracle));

    setup.template_config = tiny_template(11, 4);
    CHECK_THROWS_AS(run_oracle(setup, 3, 1), SizeError);
}
