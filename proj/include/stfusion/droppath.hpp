#pragma once

// Variational DropPath: Bernoulli drop gates over template sites, their
// binary-concrete relaxation, and the variational training objective
//
//   total = nll + (1/N) sum p log p + sum k^2 (1 - p) / (2N) ||w||^2
//
// p is always a DROP probability; a sampled gate value of 1 means KEPT.

#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

#include "stfusion/random.hpp"
#include "stfusion/sgd.hpp"
#include "stfusion/template_network.hpp"

namespace stf {

// Drop-probability logits for one layer. p_edge is shared by every incoming
// edge of the layer; each edge still draws its own gate.
struct LayerGateParams {
    Tensor edge_logit;
    Tensor s_logit;
    Tensor st_logit;
    std::size_t num_edges = 1;
};

class GateParams {
public:
    GateParams() = default;
    static GateParams create(std::span<const std::size_t> edge_counts, double initial_drop = 0.1, double tau = 1.0);

    std::size_t depth() const { return layers_.size(); }
    const LayerGateParams& layer(std::size_t i) const { return layers_.at(i); }
    std::vector<std::size_t> edge_counts() const;

    double p_edge(std::size_t i) const;
    double p_s(std::size_t i) const;
    double p_st(std::size_t i) const;
    // p in [0, 1]; the endpoints map to infinite logits.
    void set_drop(std::size_t i, double p_edge, double p_s, double p_st);
    void set_all(double p);

    double tau() const { return tau_; }
    void set_tau(double tau) { tau_ = tau; }

    // Handles over the logits with ids "gates/layer_<l>/{p_edge,p_S,p_ST}".
    std::vector<Parameter> parameters() const;

    // {"layers":[{"p_edge":f,"p_S":f,"p_ST":f}], "tau":f}
    nlohmann::json to_json() const;
    // Edge counts come from the template the checkpoint belongs to.
    static GateParams from_json(const nlohmann::json& j, std::span<const std::size_t> edge_counts);

    GateParams clone() const;

private:
    std::vector<LayerGateParams> layers_;
    double tau_ = 1.0;
};

double drop_probability(double logit);
double drop_logit(double p);

// Hard Bernoulli gates by inverse CDF: keep iff u > p with u ~ U(0,1).
GateSample sample_gates_hard(const GateParams& params, Rng& rng);

// Binary concrete relaxation of the keep gate:
//   eps = sigmoid((log pi - log(1 - pi) + log u - log(1 - u)) / tau),  pi = 1 - p.
// The returned gates are graph-connected to the drop logits.
GateSample sample_gates_concrete(const GateParams& params, Rng& rng);

// Single relaxed gate from a drop logit and a uniform draw.
Tensor relaxed_gate(const Tensor& drop_logit, double u, double tau);
double relaxed_gate_value(double drop_logit, double u, double tau);

struct ObjectiveConfig {
    double k = 1.0;  // length-scale prior
    std::size_t N = 1;  // training-set size
    void validate() const;
};

struct ObjectiveBreakdown {
    double nll = 0.0;
    double entropy_term = 0.0;
    double weight_term = 0.0;
    double total = 0.0;
};

struct ObjectiveTerms {
    Tensor nll;
    Tensor entropy_term;
    Tensor weight_term;
    Tensor total;
    ObjectiveBreakdown breakdown() const;
};

// Which inputs of the weight term receive gradient. gate_logits_only treats
// ||w||^2 as a constant; training then applies the weight side as SGD decay
// (see weight_term_decay) so both routes give the same update.
enum class WeightTermRoute { full, gate_logits_only };

// `weights` must all be branch kernels "layer_<l>/.../unit_S|unit_ST/...";
// anything else is a ConfigError naming the identifier.
ObjectiveTerms objective(const Tensor& nll, const GateParams& params, std::span<const Parameter> weights,
                         const ObjectiveConfig& cfg, WeightTermRoute route = WeightTermRoute::full);

// Per-kernel decay coefficient k^2 (1 - p) / N, the derivative of the weight
// term with respect to w divided by w.
DecayMap weight_term_decay(const GateParams& params, std::span<const Parameter> weights, const ObjectiveConfig& cfg);

// Marginal probability that a unit with drop probability p is in use: 1 - sqrt(p).
double unit_marginal_probability(double p);

struct UnitFrequencies {
    double s = 0.0;          // (D2, D3) = (1, 0)
    double st = 0.0;         // (0, 1)
    double s_plus_st = 0.0;  // (1, 1)
    double skip = 0.0;       // (0, 0)
};

// Closed-form composition of two independent branch gates.
UnitFrequencies unit_composition(double p_s, double p_st);

// Empirical frequencies of the four outcomes at one layer (0-based) from n
// hard samples.
UnitFrequencies monte_carlo_unit_marginal(const GateParams& params, std::size_t layer, std::size_t n, Rng& rng);

// Linear anneal from 1.0 at step 0 to 0.1 at total_steps.
double temperature_schedule(std::size_t step, std::size_t total_steps);

}  // namespace stf
