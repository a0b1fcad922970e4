#include "stfusion/template_network.hpp"

#include <algorithm>
#include <cmath>

#include "stfusion/errors.hpp"
#include "stfusion/random.hpp"

namespace stf {

// ---------------------------------------------------------------------------
// Configuration and layout

void TemplateConfig::validate() const {
    auto positive = [](std::size_t v, const char* field) {
        if (v == 0) throw ConfigError(std::string("template.") + field + " must be positive");
    };
    positive(num_blocks, "num_blocks");
    positive(layers_per_block, "layers_per_block");
    positive(growth_channels, "growth_channels");
    positive(stem_channels, "stem_channels");
    positive(num_classes, "num_classes");
    positive(clip_shape.channels, "clip_shape.C");
    positive(clip_shape.time, "clip_shape.T");
    positive(clip_shape.height, "clip_shape.H");
    positive(clip_shape.width, "clip_shape.W");
    for (auto [v, name] : {std::pair{kernel_sizes.kt, "kt"}, {kernel_sizes.kh, "kh"}, {kernel_sizes.kw, "kw"}}) {
        if (v == 0 || v % 2 == 0) {
            throw ConfigError(std::string("template.kernel_sizes.") + name + " must be odd, got " + std::to_string(v));
        }
    }
    if (kernel_sizes.kh != kernel_sizes.kw) {
        throw ConfigError("template.kernel_sizes: kh and kw must be equal for same padding");
    }
    const std::size_t factor = std::size_t{1} << (num_blocks - 1);
    if (clip_shape.height % factor != 0 || clip_shape.width % factor != 0) {
        throw ConfigError("template.clip_shape: H x W = " + std::to_string(clip_shape.height) + "x" +
                          std::to_string(clip_shape.width) + " does not fit " + std::to_string(num_blocks - 1) +
                          " halving transitions; H and W must be multiples of " + std::to_string(factor) +
                          " (minimum H = " + std::to_string(factor) + ", W = " + std::to_string(factor) + ")");
    }
}

TemplateLayout TemplateLayout::from(const TemplateConfig& config) {
    config.validate();
    TemplateLayout lay;
    std::size_t channels = config.stem_channels;
    std::size_t h = config.clip_shape.height, w = config.clip_shape.width;
    std::size_t index = 1;
    for (std::size_t b = 0; b < config.num_blocks; ++b) {
        lay.block_in_channels.push_back(channels);
        lay.block_height.push_back(h);
        lay.block_width.push_back(w);
        for (std::size_t j = 0; j < config.layers_per_block; ++j) {
            LayerLayout l;
            l.index = index++;
            l.block = b;
            l.position = j;
            l.edge_channels.push_back(channels);
            for (std::size_t i = 0; i < j; ++i) l.edge_channels.push_back(config.growth_channels);
            l.in_channels = channels + j * config.growth_channels;
            l.height = h;
            l.width = w;
            lay.layers.push_back(std::move(l));
        }
        const std::size_t out = channels + config.layers_per_block * config.growth_channels;
        lay.block_out_channels.push_back(out);
        if (b + 1 < config.num_blocks) {
            channels = std::max<std::size_t>(1, out / 2);
            h /= 2;
            w /= 2;
        }
    }
    lay.final_channels = lay.block_out_channels.back();
    return lay;
}

std::vector<std::size_t> TemplateLayout::edge_counts() const {
    std::vector<std::size_t> counts;
    for (const auto& l : layers) counts.push_back(l.edge_channels.size());
    return counts;
}

// ---------------------------------------------------------------------------
// Gates

GateSample GateSample::constant(std::span<const std::size_t> edge_counts, double value) {
    GateSample g;
    for (auto count : edge_counts) {
        LayerGates lg;
        for (std::size_t i = 0; i < count; ++i) lg.edges.push_back(Tensor::scalar(value));
        lg.s = Tensor::scalar(value);
        lg.st = Tensor::scalar(value);
        g.layers.push_back(std::move(lg));
    }
    return g;
}

GateSample GateSample::from_strategy(const FusionStrategy& strategy) {
    GateSample g;
    for (const auto& t : strategy.layers) {
        LayerGates lg;
        for (bool bit : t.v) lg.edges.push_back(Tensor::scalar(bit ? 1.0 : 0.0));
        lg.s = Tensor::scalar(uses_s_branch(t.u) ? 1.0 : 0.0);
        lg.st = Tensor::scalar(uses_st_branch(t.u) ? 1.0 : 0.0);
        g.layers.push_back(std::move(lg));
    }
    return g;
}

std::size_t GateSample::site_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.edges.size() + 2;
    return n;
}

bool GateSample::is_binary() const {
    auto bin = [](const Tensor& t) { return t.item() == 0.0 || t.item() == 1.0; };
    for (const auto& l : layers) {
        if (!bin(l.s) || !bin(l.st)) return false;
        for (const auto& e : l.edges) {
            if (!bin(e)) return false;
        }
    }
    return true;
}

FusionStrategy recover_strategy(const GateSample& gates) {
    FusionStrategy s;
    for (std::size_t i = 0; i < gates.layers.size(); ++i) {
        const auto& lg = gates.layers[i];
        LayerTriplet t;
        t.l = i + 1;
        for (const auto& e : lg.edges) t.v.push_back(e.item() > 0.5);
        const bool s_on = lg.s.item() > 0.5, st_on = lg.st.item() > 0.5;
        if (s_on && st_on) {
            t.u = FusionUnitKind::S_plus_ST;
        } else if (s_on) {
            t.u = FusionUnitKind::S;
        } else if (st_on) {
            t.u = FusionUnitKind::ST;
        }
        s.layers.push_back(std::move(t));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Network construction

namespace {

enum class InitKind { ones, zeros, conv, head };

std::string layer_prefix(std::size_t l) { return "layer_" + std::to_string(l); }

}  // namespace

template <class Net, class Visitor>
void TemplateNetwork::visit(Net& net, Visitor&& v) {
    const auto& cfg = net.config_;
    const auto& lay = net.layout_;
    const std::size_t k2 = cfg.kernel_sizes.kh * cfg.kernel_sizes.kw;
    v("stem/kernel", net.stem_kernel_, InitKind::conv, cfg.clip_shape.channels * k2);
    for (std::size_t i = 0; i < lay.layers.size(); ++i) {
        const auto& ll = lay.layers[i];
        auto& lw = net.layers_[i];
        const std::string p = layer_prefix(ll.index);
        const std::size_t fan_in = ll.in_channels * k2;
        v(p + "/unit_S/bn_gamma", lw.s.bn.gamma, InitKind::ones, 0);
        v(p + "/unit_S/bn_beta", lw.s.bn.beta, InitKind::zeros, 0);
        for (std::size_t e = 0; e < lw.s.edge_kernels.size(); ++e) {
            v(p + "/edge_" + std::to_string(e) + "/unit_S/kernel", lw.s.edge_kernels[e], InitKind::conv, fan_in);
        }
        v(p + "/unit_ST/bn_gamma", lw.st.bn.gamma, InitKind::ones, 0);
        v(p + "/unit_ST/bn_beta", lw.st.bn.beta, InitKind::zeros, 0);
        for (std::size_t e = 0; e < lw.st.edge_kernels.size(); ++e) {
            v(p + "/edge_" + std::to_string(e) + "/unit_ST/kernel", lw.st.edge_kernels[e], InitKind::conv, fan_in);
        }
        v(p + "/unit_ST/temporal_kernel", lw.temporal_kernel, InitKind::conv,
          cfg.growth_channels * cfg.kernel_sizes.kt);
    }
    for (std::size_t b = 0; b < net.transitions_.size(); ++b) {
        auto& tw = net.transitions_[b];
        const std::string p = "transition_" + std::to_string(b + 1);
        v(p + "/bn_gamma", tw.bn.gamma, InitKind::ones, 0);
        v(p + "/bn_beta", tw.bn.beta, InitKind::zeros, 0);
        v(p + "/kernel", tw.kernel, InitKind::conv, lay.block_out_channels[b]);
    }
    v("final/bn_gamma", net.final_bn_.gamma, InitKind::ones, 0);
    v("final/bn_beta", net.final_bn_.beta, InitKind::zeros, 0);
    v("head/weights", net.head_, InitKind::head, lay.final_channels);
}

TemplateNetwork TemplateNetwork::build(const TemplateConfig& config, std::uint64_t seed) {
    TemplateNetwork net;
    net.config_ = config;
    net.layout_ = TemplateLayout::from(config);
    const auto& lay = net.layout_;
    const auto& ks = config.kernel_sizes;
    const std::size_t g = config.growth_channels;

    net.stem_kernel_ = Tensor::zeros({config.stem_channels, config.clip_shape.channels, ks.kh, ks.kw}, true);
    for (const auto& ll : lay.layers) {
        DenseLayerWeights lw;
        lw.s.bn = BatchNormState::create(ll.in_channels);
        lw.st.bn = BatchNormState::create(ll.in_channels);
        for (auto c : ll.edge_channels) {
            lw.s.edge_kernels.push_back(Tensor::zeros({g, c, ks.kh, ks.kw}, true));
            lw.st.edge_kernels.push_back(Tensor::zeros({g, c, ks.kh, ks.kw}, true));
        }
        lw.temporal_kernel = Tensor::zeros({g, g, ks.kt}, true);
        net.layers_.push_back(std::move(lw));
    }
    for (std::size_t b = 0; b + 1 < config.num_blocks; ++b) {
        TransitionWeights tw;
        tw.bn = BatchNormState::create(lay.block_out_channels[b]);
        tw.kernel = Tensor::zeros({lay.block_in_channels[b + 1], lay.block_out_channels[b], 1, 1}, true);
        net.transitions_.push_back(std::move(tw));
    }
    net.final_bn_ = BatchNormState::create(lay.final_channels);
    net.head_ = Tensor::zeros({config.num_classes, lay.final_channels}, true);

    // Centered uniform with fan-in scaling, drawn in registration order.
    Rng rng(seed);
    visit(net, [&](const std::string&, Tensor& t, InitKind kind, std::size_t fan_in) {
        auto data = t.mutable_data();
        switch (kind) {
            case InitKind::ones: std::fill(data.begin(), data.end(), 1.0); break;
            case InitKind::zeros: std::fill(data.begin(), data.end(), 0.0); break;
            case InitKind::conv:
            case InitKind::head: {
                const double gain = kind == InitKind::conv ? 6.0 : 1.0;
                const double bound = std::sqrt(gain / static_cast<double>(fan_in));
                for (auto& x : data) x = bound * (2.0 * rng.uniform_open() - 1.0);
                break;
            }
        }
    });
    net.register_parameters();
    return net;
}

void TemplateNetwork::register_parameters() {
    params_.clear();
    visit(*this, [&](const std::string& id, Tensor& t, InitKind, std::size_t) { params_.push_back({id, t}); });
}

TemplateNetwork::TemplateNetwork(const TemplateNetwork& other)
    : config_(other.config_),
      layout_(other.layout_),
      stem_kernel_(other.stem_kernel_),
      layers_(other.layers_),
      transitions_(other.transitions_),
      final_bn_(other.final_bn_),
      head_(other.head_) {
    visit(*this, [](const std::string&, Tensor& t, InitKind, std::size_t) { t = t.clone(true); });
    register_parameters();
}

TemplateNetwork& TemplateNetwork::operator=(const TemplateNetwork& other) {
    if (this != &other) {
        TemplateNetwork copy(other);
        *this = std::move(copy);
    }
    return *this;
}

const Parameter& TemplateNetwork::parameter(std::string_view id) const {
    for (const auto& p : params_) {
        if (p.id == id) return p;
    }
    throw ContractError("no parameter named '" + std::string(id) + "'");
}

std::size_t TemplateNetwork::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::vector<Parameter> TemplateNetwork::gated_kernels() const {
    std::vector<Parameter> out;
    for (const auto& p : params_) {
        if (p.id.starts_with("layer_") && (p.id.ends_with("/kernel") || p.id.ends_with("/temporal_kernel"))) {
            out.push_back(p);
        }
    }
    return out;
}

double TemplateNetwork::checksum() const {
    double acc = 0.0;
    double w = 1.0;
    for (const auto& p : params_) {
        for (double x : p.value.data()) {
            acc += w * x;
            w = w * 1.000001 + 1e-3;
        }
    }
    visit_bn(*this, [&](const std::string&, const BatchNormState& bn) {
        for (double x : bn.running_mean) acc += 0.5 * x;
        for (double x : bn.running_var) acc += 0.25 * x;
    });
    return acc;
}

template <class Net, class Visitor>
void TemplateNetwork::visit_bn(Net& net, Visitor&& v) {
    for (std::size_t i = 0; i < net.layers_.size(); ++i) {
        const std::string p = "layer_" + std::to_string(i + 1);
        v(p + "/unit_S/bn", net.layers_[i].s.bn);
        v(p + "/unit_ST/bn", net.layers_[i].st.bn);
    }
    for (std::size_t b = 0; b < net.transitions_.size(); ++b) {
        v("transition_" + std::to_string(b + 1) + "/bn", net.transitions_[b].bn);
    }
    v(std::string("final/bn"), net.final_bn_);
}

void TemplateNetwork::reset_bn_statistics() {
    visit_bn(*this, [](const std::string&, BatchNormState& bn) {
        std::fill(bn.running_mean.begin(), bn.running_mean.end(), 0.0);
        std::fill(bn.running_var.begin(), bn.running_var.end(), 1.0);
        bn.initialized = false;
    });
}

nlohmann::json TemplateNetwork::state_to_json() const {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& p : params_) {
        params[p.id] = {{"shape", p.value.shape()}, {"data", p.value.data()}};
    }
    nlohmann::json stats = nlohmann::json::object();
    visit_bn(*this, [&](const std::string& id, const BatchNormState& bn) {
        stats[id] = {{"initialized", bn.initialized}, {"mean", bn.running_mean}, {"var", bn.running_var}};
    });
    return {{"parameters", params}, {"bn_statistics", stats}};
}

void TemplateNetwork::load_state_json(const nlohmann::json& j) {
    try {
        const auto& params = j.at("parameters");
        if (params.size() != params_.size()) {
            throw FormatError("weights checkpoint has " + std::to_string(params.size()) + " parameters, template has " +
                              std::to_string(params_.size()));
        }
        for (auto& p : params_) {
            const auto& e = params.at(p.id);
            if (e.at("shape").get<Shape>() != p.value.shape()) {
                throw FormatError("weights checkpoint: shape mismatch for '" + p.id + "'");
            }
            const auto data = e.at("data").get<std::vector<double>>();
            if (data.size() != p.value.size()) throw FormatError("weights checkpoint: size mismatch for '" + p.id + "'");
            std::copy(data.begin(), data.end(), p.value.mutable_data().begin());
        }
        const auto& stats = j.at("bn_statistics");
        visit_bn(*this, [&](const std::string& id, BatchNormState& bn) {
            const auto& e = stats.at(id);
            auto mean = e.at("mean").get<std::vector<double>>();
            auto var = e.at("var").get<std::vector<double>>();
            if (mean.size() != bn.channels() || var.size() != bn.channels()) {
                throw FormatError("weights checkpoint: channel mismatch for '" + id + "'");
            }
            bn.running_mean = std::move(mean);
            bn.running_var = std::move(var);
            bn.initialized = e.at("initialized").get<bool>();
        });
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("weights checkpoint: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Forward passes

struct ForwardAccess {
    // Exactly one of `gates` / `strategy` may be set; neither means ungated.
    template <class Net>
    static Tensor run(Net& net, const GateSample* gates, const FusionStrategy* strategy, const Tensor& batch,
                      BnMode mode) {
        const auto& cfg = net.config_;
        const auto& lay = net.layout_;
        if (batch.rank() != 5 || batch.dim(1) != cfg.clip_shape.channels || batch.dim(2) != cfg.clip_shape.time ||
            batch.dim(3) != cfg.clip_shape.height || batch.dim(4) != cfg.clip_shape.width) {
            throw ContractError("forward: batch shape " + to_string(batch.shape()) + " does not match clip shape [" +
                                std::to_string(cfg.clip_shape.channels) + "x" + std::to_string(cfg.clip_shape.time) +
                                "x" + std::to_string(cfg.clip_shape.height) + "x" +
                                std::to_string(cfg.clip_shape.width) + "]");
        }
        if (gates) check_gates(*gates, lay);
        if (strategy) strategy->check_against(lay.edge_counts());

        const std::size_t pad2 = cfg.kernel_sizes.kh / 2;
        const std::size_t pad1 = cfg.kernel_sizes.kt / 2;
        Tensor x = conv2d_spatial(batch, net.stem_kernel_, pad2);
        std::size_t li = 0;
        for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
            std::vector<Tensor> features{x};
            for (std::size_t j = 0; j < cfg.layers_per_block; ++j, ++li) {
                auto& lw = net.layers_[li];
                const auto* lg = gates ? &gates->layers[li] : nullptr;
                const auto* tr = strategy ? &strategy->layers[li] : nullptr;

                std::vector<Tensor> inputs;
                inputs.reserve(features.size());
                for (std::size_t e = 0; e < features.size(); ++e) {
                    if (lg) {
                        inputs.push_back(mul_scalar(features[e], lg->edges[e]));
                    } else if (tr && !tr->v[e]) {
                        inputs.push_back(Tensor::zeros(features[e].shape()));
                    } else {
                        inputs.push_back(features[e]);
                    }
                }
                const Tensor joined = concat_channels(inputs);
                const bool run_s = !tr || uses_s_branch(tr->u);
                const bool run_st = !tr || uses_st_branch(tr->u);

                Tensor out;
                if (run_s) {
                    Tensor s = conv2d_spatial(relu(batch_norm(joined, lw.s.bn, mode)),
                                              concat_channels(lw.s.edge_kernels), pad2);
                    if (lg) s = mul_scalar(s, lg->s);
                    out = s;
                }
                if (run_st) {
                    Tensor st = conv2d_spatial(relu(batch_norm(joined, lw.st.bn, mode)),
                                               concat_channels(lw.st.edge_kernels), pad2);
                    st = conv1d_temporal(st, lw.temporal_kernel, pad1);
                    if (lg) st = mul_scalar(st, lg->st);
                    out = out.defined() ? add(out, st) : st;
                }
                if (!out.defined()) {
                    out = Tensor::zeros({batch.dim(0), cfg.growth_channels, cfg.clip_shape.time,
                                         lay.block_height[b], lay.block_width[b]});
                }
                features.push_back(out);
            }
            x = concat_channels(features);
            if (b + 1 < cfg.num_blocks) {
                auto& tw = net.transitions_[b];
                x = avg_pool2x2(conv2d_spatial(relu(batch_norm(x, tw.bn, mode)), tw.kernel, 0));
            }
        }
        return pool_and_classify(relu(batch_norm(x, net.final_bn_, mode)), net.head_);
    }

    static void check_gates(const GateSample& gates, const TemplateLayout& lay) {
        if (gates.layers.size() != lay.depth()) {
            throw ContractError("gate sample covers " + std::to_string(gates.layers.size()) + " layers, template has " +
                                std::to_string(lay.depth()));
        }
        for (std::size_t i = 0; i < lay.depth(); ++i) {
            const auto& lg = gates.layers[i];
            if (lg.edges.size() != lay.layers[i].edge_channels.size() || !lg.s.defined() || !lg.st.defined()) {
                throw ContractError("gate sample layer " + std::to_string(i + 1) + " has " +
                                    std::to_string(lg.edges.size()) + " edge gates, template layer has " +
                                    std::to_string(lay.layers[i].edge_channels.size()));
            }
        }
    }
};

Tensor forward_with_gates(TemplateNetwork& net, const GateSample& gates, const Tensor& batch, BnMode mode) {
    return ForwardAccess::run(net, &gates, nullptr, batch, mode);
}

Tensor forward_with_gates(const TemplateNetwork& net, const GateSample& gates, const Tensor& batch) {
    return ForwardAccess::run(net, &gates, nullptr, batch, BnMode::eval);
}

Tensor forward_ungated(TemplateNetwork& net, const Tensor& batch, BnMode mode) {
    return ForwardAccess::run(net, nullptr, nullptr, batch, mode);
}

Tensor forward_ungated(const TemplateNetwork& net, const Tensor& batch) {
    return ForwardAccess::run(net, nullptr, nullptr, batch, BnMode::eval);
}

// ---------------------------------------------------------------------------
// Subnetworks

Subnetwork materialize_strategy(TemplateNetwork& net, const FusionStrategy& strategy) {
    strategy.check_against(net.layout().edge_counts());
    return Subnetwork(&net, &net, strategy);
}

Subnetwork materialize_strategy(const TemplateNetwork& net, const FusionStrategy& strategy) {
    strategy.check_against(net.layout().edge_counts());
    return Subnetwork(&net, nullptr, strategy);
}

Tensor Subnetwork::forward(const Tensor& batch, BnMode mode) const {
    if (mode == BnMode::train) {
        if (!mutable_) throw ContractError("read-only subnetwork cannot run in train mode");
        return ForwardAccess::run(*mutable_, nullptr, &strategy_, batch, mode);
    }
    return ForwardAccess::run(*view_, nullptr, &strategy_, batch, mode);
}

std::vector<std::string> Subnetwork::active_parameter_ids() const {
    std::vector<std::string> ids;
    for (const auto& p : view_->parameters()) {
        const std::string& id = p.id;
        if (!id.starts_with("layer_")) {
            ids.push_back(id);
            continue;
        }
        const std::size_t slash = id.find('/');
        const std::size_t l = std::stoul(id.substr(6, slash - 6));
        const auto& t = strategy_.layers[l - 1];
        const bool s_part = id.find("/unit_S/") != std::string::npos;
        if (!(s_part ? uses_s_branch(t.u) : uses_st_branch(t.u))) continue;
        const std::size_t edge_pos = id.find("/edge_");
        if (edge_pos != std::string::npos) {
            const std::size_t e = std::stoul(id.substr(edge_pos + 6));
            if (!t.v[e]) continue;
        }
        ids.push_back(id);
    }
    return ids;
}

std::vector<Parameter> Subnetwork::active_parameters() const {
    const auto ids = active_parameter_ids();
    std::vector<Parameter> out;
    std::size_t k = 0;
    for (const auto& p : view_->parameters()) {
        if (k < ids.size() && ids[k] == p.id) {
            out.push_back(p);
            ++k;
        }
    }
    return out;
}

std::size_t Subnetwork::active_param_count() const {
    std::size_t n = 0;
    for (const auto& p : active_parameters()) n += p.value.size();
    return n;
}

std::size_t Subnetwork::mult_add_proxy() const {
    const auto& cfg = view_->config();
    const auto& lay = view_->layout();
    const auto& ks = cfg.kernel_sizes;
    const std::size_t g = cfg.growth_channels;
    const std::size_t t = cfg.clip_shape.time;
    std::size_t total = cfg.stem_channels * cfg.clip_shape.channels * ks.kh * ks.kw * t * cfg.clip_shape.height *
                        cfg.clip_shape.width;
    for (std::size_t i = 0; i < lay.depth(); ++i) {
        const auto& ll = lay.layers[i];
        const auto& tr = strategy_.layers[i];
        const std::size_t volume = t * ll.height * ll.width;
        std::size_t active_in = 0;
        for (std::size_t e = 0; e < ll.edge_channels.size(); ++e) {
            if (tr.v[e]) active_in += ll.edge_channels[e];
        }
        const std::size_t spatial = g * active_in * ks.kh * ks.kw * volume;
        if (uses_s_branch(tr.u)) total += spatial;
        if (uses_st_branch(tr.u)) total += spatial + g * g * ks.kt * volume;
    }
    for (std::size_t b = 0; b + 1 < cfg.num_blocks; ++b) {
        total += lay.block_in_channels[b + 1] * lay.block_out_channels[b] * t * lay.block_height[b] * lay.block_width[b];
    }
    total += cfg.num_classes * lay.final_channels;
    return total;
}

}  // namespace stf
