#pragma once

// Differentiable operations on Tensor. Video activations are rank-5
// (batch, channel, time, height, width). No op broadcasts implicitly.

#include <cstddef>
#include <span>
#include <vector>

#include "stfusion/tensor.hpp"

namespace stf {

// --- convolutions (stride 1, zero padding) ---------------------------------

// 2D cross-correlation applied to every time index independently.
// kernel: [out_ch, in_ch, kh, kw].
Tensor conv2d_spatial(const Tensor& input, const Tensor& kernel, std::size_t padding);

// 1D cross-correlation along time applied at every spatial location.
// kernel: [out_ch, in_ch, kt].
Tensor conv1d_temporal(const Tensor& input, const Tensor& kernel, std::size_t padding);

// --- pointwise ---------------------------------------------------------------

enum class ElementwiseKind { add, relu, scale };

Tensor add(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor elementwise(ElementwiseKind kind, std::span<const Tensor> operands, double factor = 1.0);

Tensor mul(const Tensor& a, const Tensor& b);
// x * s where s holds exactly one value; gradient flows to both.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor add_constant(const Tensor& x, double c);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
// x log x with the convention 0 log 0 = 0.
Tensor xlogx(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor squared_norm(const Tensor& x);

// --- structural --------------------------------------------------------------

// Concatenates along axis 1; all other extents must agree.
Tensor concat_channels(const std::vector<Tensor>& parts);

// 2x2 spatial average pooling with stride 2; H and W must be even.
Tensor avg_pool2x2(const Tensor& input);

// --- normalization, head, loss -------------------------------------------------

enum class BnMode { train, eval };

struct BatchNormState {
    Tensor gamma;  // [channels]
    Tensor beta;   // [channels]
    std::vector<double> running_mean;
    std::vector<double> running_var;
    bool initialized = false;
    double momentum = 0.9;  // weight on the previous running value
    double eps = 1e-5;

    static BatchNormState create(std::size_t channels, bool requires_grad = true);
    std::size_t channels() const { return gamma.size(); }
};

// Per-channel normalization over batch, time and space. Train mode uses batch
// statistics and updates the running ones; eval mode reads running statistics.
Tensor batch_norm(const Tensor& input, BatchNormState& state, BnMode mode);
// Eval-only overload for read-only networks.
Tensor batch_norm(const Tensor& input, const BatchNormState& state, BnMode mode);

// Global average over time and space followed by a bias-free linear head.
// head_weights: [num_classes, channels]. Returns [batch, num_classes].
Tensor pool_and_classify(const Tensor& features, const Tensor& head_weights);

// Mean over rows of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace stf
