#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "stfusion/tensor.hpp"

namespace stf {

// A trainable tensor with a stable identifier such as
// "layer_3/edge_1/unit_ST/kernel".
struct Parameter {
    std::string id;
    Tensor value;
};

// Sets every gradient buffer to zeros so that parameters outside the next
// recorded graph still step as no-ops.
void zero_grads(std::span<Parameter> params);

using DecayMap = std::unordered_map<std::string, double>;

// SGD with heavy-ball momentum and per-parameter L2 decay:
//   v <- momentum * v + grad + decay * w
//   w <- w - lr * v
class Sgd {
public:
    explicit Sgd(double momentum = 0.9) : momentum_(momentum) {}

    // Parameters absent from `decay` use coefficient 0.
    void step(std::span<Parameter> params, double lr, const DecayMap& decay = {});

    double momentum() const { return momentum_; }

private:
    double momentum_;
    std::unordered_map<std::string, std::vector<double>> velocity_;
};

}  // namespace stf
