#include "stfusion/sgd.hpp"

#include "stfusion/errors.hpp"

namespace stf {

void zero_grads(std::span<Parameter> params) {
    for (auto& p : params) {
        p.value.node()->grad.assign(p.value.size(), 0.0);
    }
}

void Sgd::step(std::span<Parameter> params, double lr, const DecayMap& decay) {
    for (auto& p : params) {
        if (!p.value.has_grad()) {
            throw UninitializedError("sgd step: parameter '" + p.id + "' has no gradient; run backward first");
        }
    }
    for (auto& p : params) {
        const auto it = decay.find(p.id);
        const double wd = it == decay.end() ? 0.0 : it->second;
        auto& v = velocity_[p.id];
        auto w = p.value.mutable_data();
        const auto g = p.value.grad();
        if (v.size() != w.size()) v.assign(w.size(), 0.0);
        for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = momentum_ * v[i] + g[i] + wd * w[i];
            w[i] -= lr * v[i];
        }
    }
}

}  // namespace stf
