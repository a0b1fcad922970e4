#pragma once

// The gated, densely connected template network.
//
// Each dense layer reads the channel concatenation of its block input and all
// earlier layers of the same block, and computes
//
//   S  branch: BN -> ReLU -> 2D conv
//   ST branch: BN -> ReLU -> 2D conv -> 1D temporal conv
//   output   = D2 * S + D3 * ST
//
// where every incoming feature is first multiplied by its own edge gate D1.
// Convolution kernels are stored per incoming edge, so the weight of layer l,
// edge i and unit u is its own parameter. Blocks are joined by ungated
// transitions (BN -> ReLU -> 1x1 conv halving channels -> 2x2 average pool).

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stfusion/clip_shape.hpp"
#include "stfusion/ops.hpp"
#include "stfusion/sgd.hpp"
#include "stfusion/strategy.hpp"

namespace stf {

struct KernelSizes {
    std::size_t kt = 3;
    std::size_t kh = 3;
    std::size_t kw = 3;
    bool operator==(const KernelSizes&) const = default;
};

struct TemplateConfig {
    std::size_t num_blocks = 2;
    std::size_t layers_per_block = 4;
    std::size_t growth_channels = 8;
    std::size_t stem_channels = 8;
    ClipShape clip_shape{1, 8, 16, 16};
    std::size_t num_classes = 4;
    KernelSizes kernel_sizes{};

    std::size_t total_layers() const { return num_blocks * layers_per_block; }
    // Throws ConfigError naming the offending field.
    void validate() const;
};

struct LayerLayout {
    std::size_t index = 1;  // global, 1-based
    std::size_t block = 0;
    std::size_t position = 0;                // within the block
    std::vector<std::size_t> edge_channels;  // block input first
    std::size_t in_channels = 0;
    std::size_t height = 0, width = 0;
};

struct TemplateLayout {
    std::vector<LayerLayout> layers;
    std::vector<std::size_t> block_in_channels;
    std::vector<std::size_t> block_out_channels;
    std::vector<std::size_t> block_height, block_width;
    std::size_t final_channels = 0;

    static TemplateLayout from(const TemplateConfig& config);
    std::size_t depth() const { return layers.size(); }
    std::vector<std::size_t> edge_counts() const;
};

// Gate values for every site. Hard samples hold constants in {0, 1}; relaxed
// samples hold graph-connected values in (0, 1). 1 means kept.
struct LayerGates {
    std::vector<Tensor> edges;  // D1, one per incoming edge
    Tensor s;                   // D2
    Tensor st;                  // D3
};

struct GateSample {
    std::vector<LayerGates> layers;

    static GateSample constant(std::span<const std::size_t> edge_counts, double value);
    // Hard gates implied by a strategy: D1 from v, (D2, D3) from u.
    static GateSample from_strategy(const FusionStrategy& strategy);

    std::size_t site_count() const;
    bool is_binary() const;
};

// Reads D1 bits as v and (D2, D3) as u: (1,0) S, (0,1) ST, (1,1) S+ST, (0,0) skip.
FusionStrategy recover_strategy(const GateSample& gates);

class TemplateNetwork {
public:
    static TemplateNetwork build(const TemplateConfig& config, std::uint64_t seed);

    TemplateNetwork(const TemplateNetwork& other);
    TemplateNetwork& operator=(const TemplateNetwork& other);
    TemplateNetwork(TemplateNetwork&&) noexcept = default;
    TemplateNetwork& operator=(TemplateNetwork&&) noexcept = default;

    const TemplateConfig& config() const { return config_; }
    const TemplateLayout& layout() const { return layout_; }

    std::span<Parameter> parameters() { return params_; }
    std::span<const Parameter> parameters() const { return params_; }
    const Parameter& parameter(std::string_view id) const;
    std::size_t parameter_count() const;  // number of scalar weights

    // Branch kernels governed by gate probabilities (2D edge kernels and the
    // ST temporal kernels).
    std::vector<Parameter> gated_kernels() const;

    // Three gate sites per layer (D1, D2, D3).
    std::size_t gate_site_count() const { return 3 * layout_.depth(); }

    // Sum of all parameter values weighted by position, for purity checks.
    double checksum() const;

    // Marks every batch-norm state uninitialized so the next train-mode
    // forward starts its running statistics afresh.
    void reset_bn_statistics();

    // Parameters and running statistics; from_json needs a net built from
    // the same config and throws FormatError on any mismatch.
    nlohmann::json state_to_json() const;
    void load_state_json(const nlohmann::json& j);

    struct BranchWeights {
        BatchNormState bn;
        std::vector<Tensor> edge_kernels;  // [growth, c_i, kh, kw]
    };
    struct DenseLayerWeights {
        BranchWeights s;
        BranchWeights st;
        Tensor temporal_kernel;  // [growth, growth, kt]
    };
    struct TransitionWeights {
        BatchNormState bn;
        Tensor kernel;  // [c_out, c_in, 1, 1]
    };

    const DenseLayerWeights& layer(std::size_t i) const { return layers_.at(i); }
    DenseLayerWeights& layer(std::size_t i) { return layers_.at(i); }

private:
    TemplateNetwork() = default;
    void register_parameters();
    template <class Net, class Visitor>
    static void visit(Net& net, Visitor&& v);
    template <class Net, class Visitor>
    static void visit_bn(Net& net, Visitor&& v);

    TemplateConfig config_;
    TemplateLayout layout_;
    Tensor stem_kernel_;
    std::vector<DenseLayerWeights> layers_;
    std::vector<TransitionWeights> transitions_;
    BatchNormState final_bn_;
    Tensor head_;
    std::vector<Parameter> params_;

    friend struct ForwardAccess;
};

// Gated forward. Train mode updates batch-norm running statistics.
Tensor forward_with_gates(TemplateNetwork& net, const GateSample& gates, const Tensor& batch, BnMode mode);
Tensor forward_with_gates(const TemplateNetwork& net, const GateSample& gates, const Tensor& batch);

// Plain template forward without any gate multiplication.
Tensor forward_ungated(TemplateNetwork& net, const Tensor& batch, BnMode mode);
Tensor forward_ungated(const TemplateNetwork& net, const Tensor& batch);

// A strategy's subnetwork, sharing weights with its template. Inactive
// branches are not computed; deselected inputs are fed as zeros.
class Subnetwork {
public:
    Tensor forward(const Tensor& batch, BnMode mode) const;

    const FusionStrategy& strategy() const { return strategy_; }
    const TemplateNetwork& net() const { return *view_; }

    std::vector<std::string> active_parameter_ids() const;
    std::vector<Parameter> active_parameters() const;
    std::size_t active_param_count() const;
    // Multiply-adds per clip over active convolutions and the head.
    std::size_t mult_add_proxy() const;

private:
    friend Subnetwork materialize_strategy(TemplateNetwork&, const FusionStrategy&);
    friend Subnetwork materialize_strategy(const TemplateNetwork&, const FusionStrategy&);
    Subnetwork(const TemplateNetwork* view, TemplateNetwork* mut, FusionStrategy strategy)
        : view_(view), mutable_(mut), strategy_(std::move(strategy)) {}

    const TemplateNetwork* view_;
    TemplateNetwork* mutable_;  // null for read-only views
    FusionStrategy strategy_;
};

Subnetwork materialize_strategy(TemplateNetwork& net, const FusionStrategy& strategy);
// Read-only: forward() accepts eval mode only.
Subnetwork materialize_strategy(const TemplateNetwork& net, const FusionStrategy& strategy);

}  // namespace stf
