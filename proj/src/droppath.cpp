#include "stfusion/droppath.hpp"

#include <cmath>
#include <limits>

#include "stfusion/errors.hpp"

namespace stf {

double drop_probability(double logit) {
    return logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
}

double drop_logit(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("drop probability must lie in [0, 1], got " + std::to_string(p));
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    return std::log(p) - std::log1p(-p);
}

// ---------------------------------------------------------------------------
// GateParams

GateParams GateParams::create(std::span<const std::size_t> edge_counts, double initial_drop, double tau) {
    GateParams g;
    const double logit = drop_logit(initial_drop);
    for (auto count : edge_counts) {
        g.layers_.push_back({Tensor::scalar(logit, true), Tensor::scalar(logit, true), Tensor::scalar(logit, true), count});
    }
    g.tau_ = tau;
    return g;
}

std::vector<std::size_t> GateParams::edge_counts() const {
    std::vector<std::size_t> out;
    for (const auto& l : layers_) out.push_back(l.num_edges);
    return out;
}

double GateParams::p_edge(std::size_t i) const { return drop_probability(layer(i).edge_logit.item()); }
double GateParams::p_s(std::size_t i) const { return drop_probability(layer(i).s_logit.item()); }
double GateParams::p_st(std::size_t i) const { return drop_probability(layer(i).st_logit.item()); }

void GateParams::set_drop(std::size_t i, double p_edge, double p_s, double p_st) {
    auto& l = layers_.at(i);
    l.edge_logit.mutable_data()[0] = drop_logit(p_edge);
    l.s_logit.mutable_data()[0] = drop_logit(p_s);
    l.st_logit.mutable_data()[0] = drop_logit(p_st);
}

void GateParams::set_all(double p) {
    for (std::size_t i = 0; i < layers_.size(); ++i) set_drop(i, p, p, p);
}

std::vector<Parameter> GateParams::parameters() const {
    std::vector<Parameter> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::string p = "gates/layer_" + std::to_string(i + 1);
        out.push_back({p + "/p_edge", layers_[i].edge_logit});
        out.push_back({p + "/p_S", layers_[i].s_logit});
        out.push_back({p + "/p_ST", layers_[i].st_logit});
    }
    return out;
}

nlohmann::json GateParams::to_json() const {
    auto arr = nlohmann::json::array();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        arr.push_back({{"p_edge", p_edge(i)}, {"p_S", p_s(i)}, {"p_ST", p_st(i)}});
    }
    return {{"layers", arr}, {"tau", tau_}};
}

GateParams GateParams::from_json(const nlohmann::json& j, std::span<const std::size_t> edge_counts) {
    try {
        const auto& arr = j.at("layers");
        if (arr.size() != edge_counts.size()) {
            throw FormatError("gate checkpoint has " + std::to_string(arr.size()) + " layers, template has " +
                              std::to_string(edge_counts.size()));
        }
        GateParams g = create(edge_counts, 0.5, j.at("tau").get<double>());
        for (std::size_t i = 0; i < arr.size(); ++i) {
            g.set_drop(i, arr[i].at("p_edge").get<double>(), arr[i].at("p_S").get<double>(),
                       arr[i].at("p_ST").get<double>());
        }
        return g;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("gate checkpoint: ") + e.what());
    } catch (const DomainError& e) {
        throw FormatError(std::string("gate checkpoint: ") + e.what());
    }
}

GateParams GateParams::clone() const {
    GateParams g;
    g.tau_ = tau_;
    for (const auto& l : layers_) {
        g.layers_.push_back({l.edge_logit.clone(true), l.s_logit.clone(true), l.st_logit.clone(true), l.num_edges});
    }
    return g;
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

double hard_gate(double logit, Rng& rng) { return rng.uniform_open() > drop_probability(logit) ? 1.0 : 0.0; }

double logit_of_uniform(double u) { return std::log(u) - std::log1p(-u); }

}  // namespace

GateSample sample_gates_hard(const GateParams& params, Rng& rng) {
    GateSample g;
    for (std::size_t i = 0; i < params.depth(); ++i) {
        const auto& l = params.layer(i);
        LayerGates lg;
        for (std::size_t e = 0; e < l.num_edges; ++e) lg.edges.push_back(Tensor::scalar(hard_gate(l.edge_logit.item(), rng)));
        lg.s = Tensor::scalar(hard_gate(l.s_logit.item(), rng));
        lg.st = Tensor::scalar(hard_gate(l.st_logit.item(), rng));
        g.layers.push_back(std::move(lg));
    }
    return g;
}

Tensor relaxed_gate(const Tensor& drop_logit_t, double u, double tau) {
    if (!(tau > 0.0)) throw ContractError("concrete relaxation needs tau > 0, got " + std::to_string(tau));
    // log(pi / (1 - pi)) with pi = 1 - p equals minus the drop logit.
    return sigmoid(add_constant(scale(drop_logit_t, -1.0 / tau), logit_of_uniform(u) / tau));
}

double relaxed_gate_value(double logit, double u, double tau) {
    return relaxed_gate(Tensor::scalar(logit), u, tau).item();
}

GateSample sample_gates_concrete(const GateParams& params, Rng& rng) {
    const double tau = params.tau();
    if (!(tau > 0.0)) throw ContractError("concrete relaxation needs tau > 0, got " + std::to_string(tau));
    GateSample g;
    for (std::size_t i = 0; i < params.depth(); ++i) {
        const auto& l = params.layer(i);
        LayerGates lg;
        for (std::size_t e = 0; e < l.num_edges; ++e) lg.edges.push_back(relaxed_gate(l.edge_logit, rng.uniform_open(), tau));
        lg.s = relaxed_gate(l.s_logit, rng.uniform_open(), tau);
        lg.st = relaxed_gate(l.st_logit, rng.uniform_open(), tau);
        g.layers.push_back(std::move(lg));
    }
    return g;
}

// ---------------------------------------------------------------------------
// Objective

void ObjectiveConfig::validate() const {
    if (!(k > 0.0)) throw ConfigError("objective.k must be positive");
    if (N < 1) throw ConfigError("objective.N must be at least 1");
}

ObjectiveBreakdown ObjectiveTerms::breakdown() const {
    ObjectiveBreakdown b;
    b.nll = nll.item();
    b.entropy_term = entropy_term.item();
    b.weight_term = weight_term.item();
    b.total = total.item();
    return b;
}

namespace {

struct Governor {
    std::size_t layer;  // 0-based
    bool st;
};

Governor governor_of(const std::string& id, std::size_t depth) {
    auto fail = [&]() -> Governor {
        throw ConfigError("parameter '" + id + "' is not governed by any gate probability");
    };
    if (!id.starts_with("layer_")) return fail();
    const std::size_t slash = id.find('/');
    if (slash == std::string::npos || slash == 6) return fail();
    std::size_t l = 0;
    for (std::size_t i = 6; i < slash; ++i) {
        if (id[i] < '0' || id[i] > '9') return fail();
        l = 10 * l + static_cast<std::size_t>(id[i] - '0');
    }
    if (l < 1 || l > depth) return fail();
    if (id.find("/unit_S/") != std::string::npos) return {l - 1, false};
    if (id.find("/unit_ST/") != std::string::npos) return {l - 1, true};
    return fail();
}

Tensor drop_prob_tensor(const LayerGateParams& l, bool st) { return sigmoid(st ? l.st_logit : l.s_logit); }

}  // namespace

ObjectiveTerms objective(const Tensor& nll, const GateParams& params, std::span<const Parameter> weights,
                         const ObjectiveConfig& cfg, WeightTermRoute route) {
    cfg.validate();
    if (nll.size() != 1) throw ShapeError("objective: nll must be scalar, got " + to_string(nll.shape()));
    const double inv_n = 1.0 / static_cast<double>(cfg.N);

    Tensor entropy = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < params.depth(); ++i) {
        const auto& l = params.layer(i);
        const Tensor edge = scale(xlogx(sigmoid(l.edge_logit)), static_cast<double>(l.num_edges));
        entropy = add(entropy, add(edge, add(xlogx(sigmoid(l.s_logit)), xlogx(sigmoid(l.st_logit)))));
    }
    entropy = scale(entropy, inv_n);

    const double coeff = cfg.k * cfg.k * inv_n / 2.0;
    Tensor weight = Tensor::scalar(0.0);
    for (const auto& w : weights) {
        const Governor gov = governor_of(w.id, params.depth());
        const Tensor keep = add_constant(scale(drop_prob_tensor(params.layer(gov.layer), gov.st), -1.0), 1.0);
        const Tensor norm = route == WeightTermRoute::full ? squared_norm(w.value)
                                                           : Tensor::scalar(squared_norm(w.value).item());
        weight = add(weight, mul(keep, norm));
    }
    weight = scale(weight, coeff);

    ObjectiveTerms terms;
    terms.nll = nll;
    terms.entropy_term = entropy;
    terms.weight_term = weight;
    terms.total = add(add(nll, entropy), weight);
    return terms;
}

DecayMap weight_term_decay(const GateParams& params, std::span<const Parameter> weights, const ObjectiveConfig& cfg) {
    cfg.validate();
    DecayMap out;
    const double coeff = cfg.k * cfg.k / static_cast<double>(cfg.N);
    for (const auto& w : weights) {
        const Governor gov = governor_of(w.id, params.depth());
        const double p = gov.st ? params.p_st(gov.layer) : params.p_s(gov.layer);
        out[w.id] = coeff * (1.0 - p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Marginals and schedules

double unit_marginal_probability(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("drop probability must lie in [0, 1], got " + std::to_string(p));
    return 1.0 - std::sqrt(p);
}

UnitFrequencies unit_composition(double p_s, double p_st) {
    UnitFrequencies f;
    f.s = (1.0 - p_s) * p_st;
    f.st = p_s * (1.0 - p_st);
    f.s_plus_st = (1.0 - p_s) * (1.0 - p_st);
    f.skip = p_s * p_st;
    return f;
}

UnitFrequencies monte_carlo_unit_marginal(const GateParams& params, std::size_t layer, std::size_t n, Rng& rng) {
    if (n == 0) throw ContractError("monte_carlo_unit_marginal: n must be at least 1");
    const auto& l = params.layer(layer);
    std::size_t counts[4] = {0, 0, 0, 0};
    for (std::size_t k = 0; k < n; ++k) {
        const bool s = hard_gate(l.s_logit.item(), rng) == 1.0;
        const bool st = hard_gate(l.st_logit.item(), rng) == 1.0;
        ++counts[(s ? 1 : 0) + (st ? 2 : 0)];
    }
    const double total = static_cast<double>(n);
    UnitFrequencies f;
    f.skip = static_cast<double>(counts[0]) / total;
    f.s = static_cast<double>(counts[1]) / total;
    f.st = static_cast<double>(counts[2]) / total;
    f.s_plus_st = static_cast<double>(counts[3]) / total;
    return f;
}

double temperature_schedule(std::size_t step, std::size_t total_steps) {
    if (step > total_steps) {
        throw ContractError("temperature_schedule: step " + std::to_string(step) + " beyond total " +
                            std::to_string(total_steps));
    }
    if (total_steps == 0) return 1.0;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return 1.0 + (0.1 - 1.0) * frac;
}

}  // namespace stf
