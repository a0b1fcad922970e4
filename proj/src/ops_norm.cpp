#include <algorithm>
#include <cmath>

#include "stfusion/errors.hpp"
#include "stfusion/ops.hpp"

namespace stf {

BatchNormState BatchNormState::create(std::size_t channels, bool requires_grad) {
    BatchNormState s;
    s.gamma = Tensor::full({channels}, 1.0, requires_grad);
    s.beta = Tensor::zeros({channels}, requires_grad);
    return s;
}

namespace {

struct BnLayout {
    std::size_t batch, channels, inner;  // inner = T*H*W
};

BnLayout bn_layout(const Tensor& input, const BatchNormState& state) {
    if (input.rank() != 5) throw ShapeError("batch_norm expects rank-5 input, got " + to_string(input.shape()));
    if (input.dim(1) != state.channels()) {
        throw ShapeError("batch_norm channel mismatch: input " + to_string(input.shape()) + " vs state with " +
                         std::to_string(state.channels()) + " channels");
    }
    return {input.dim(0), input.dim(1), input.dim(2) * input.dim(3) * input.dim(4)};
}

// Normalizes with the given per-channel statistics. In train mode the
// backward pass differentiates through the batch statistics as well.
Tensor normalize(const Tensor& input, const BatchNormState& state, const BnLayout& lay,
                 const std::vector<double>& mean, const std::vector<double>& var, bool batch_stats) {
    std::vector<double> inv_std(lay.channels);
    for (std::size_t c = 0; c < lay.channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + state.eps);

    std::vector<double> out(input.size());
    const double* x = input.data().data();
    const auto gamma = state.gamma.data();
    const auto beta = state.beta.data();
    for (std::size_t n = 0; n < lay.batch; ++n) {
        for (std::size_t c = 0; c < lay.channels; ++c) {
            const std::size_t base = (n * lay.channels + c) * lay.inner;
            const double m = mean[c], is = inv_std[c], gm = gamma[c], bt = beta[c];
            for (std::size_t s = 0; s < lay.inner; ++s) out[base + s] = gm * ((x[base + s] - m) * is) + bt;
        }
    }
    return detail::make_result(input.shape(), std::move(out), {input, state.gamma, state.beta},
                               [lay, mean, inv_std, batch_stats](const TensorNode& self) {
        TensorNode& in = *self.inputs[0];
        TensorNode& gamma = *self.inputs[1];
        TensorNode& beta = *self.inputs[2];
        const double count = static_cast<double>(lay.batch * lay.inner);
        for (std::size_t c = 0; c < lay.channels; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t n = 0; n < lay.batch; ++n) {
                const std::size_t base = (n * lay.channels + c) * lay.inner;
                for (std::size_t s = 0; s < lay.inner; ++s) {
                    const double g = self.grad[base + s];
                    sum_g += g;
                    sum_gx += g * (in.data[base + s] - mean[c]) * inv_std[c];
                }
            }
            if (gamma.requires_grad) gamma.grad[c] += sum_gx;
            if (beta.requires_grad) beta.grad[c] += sum_g;
            if (!in.requires_grad) continue;
            const double k = gamma.data[c] * inv_std[c];
            const double mg = sum_g / count, mgx = sum_gx / count;
            for (std::size_t n = 0; n < lay.batch; ++n) {
                const std::size_t base = (n * lay.channels + c) * lay.inner;
                for (std::size_t s = 0; s < lay.inner; ++s) {
                    const double g = self.grad[base + s];
                    if (batch_stats) {
                        const double xhat = (in.data[base + s] - mean[c]) * inv_std[c];
                        in.grad[base + s] += k * (g - mg - xhat * mgx);
                    } else {
                        in.grad[base + s] += k * g;
                    }
                }
            }
        }
    });
}

Tensor batch_norm_eval(const Tensor& input, const BatchNormState& state, const BnLayout& lay) {
    if (!state.initialized) {
        throw UninitializedError("batch_norm: eval mode requested before any train-mode call initialized the "
                                 "running statistics");
    }
    return normalize(input, state, lay, state.running_mean, state.running_var, false);
}

}  // namespace

Tensor batch_norm(const Tensor& input, BatchNormState& state, BnMode mode) {
    const BnLayout lay = bn_layout(input, state);
    if (mode == BnMode::eval) return batch_norm_eval(input, state, lay);

    const std::size_t count = lay.batch * lay.inner;
    if (count < 2) {
        throw ContractError("batch_norm: train mode needs at least 2 values per channel, input " +
                            to_string(input.shape()));
    }
    std::vector<double> mean(lay.channels, 0.0), var(lay.channels, 0.0);
    const double* x = input.data().data();
    for (std::size_t c = 0; c < lay.channels; ++c) {
        double acc = 0.0;
        for (std::size_t n = 0; n < lay.batch; ++n) {
            const double* p = x + (n * lay.channels + c) * lay.inner;
            for (std::size_t s = 0; s < lay.inner; ++s) acc += p[s];
        }
        mean[c] = acc / static_cast<double>(count);
        double sq = 0.0;
        for (std::size_t n = 0; n < lay.batch; ++n) {
            const double* p = x + (n * lay.channels + c) * lay.inner;
            for (std::size_t s = 0; s < lay.inner; ++s) {
                const double d = p[s] - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / static_cast<double>(count);
    }
    if (!state.initialized) {
        state.running_mean = mean;
        state.running_var = var;
        state.initialized = true;
    } else {
        for (std::size_t c = 0; c < lay.channels; ++c) {
            state.running_mean[c] = state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mean[c];
            state.running_var[c] = state.momentum * state.running_var[c] + (1.0 - state.momentum) * var[c];
        }
    }
    return normalize(input, state, lay, mean, var, true);
}

Tensor batch_norm(const Tensor& input, const BatchNormState& state, BnMode mode) {
    if (mode != BnMode::eval) throw ContractError("batch_norm: train mode requires mutable running statistics");
    return batch_norm_eval(input, state, bn_layout(input, state));
}

Tensor pool_and_classify(const Tensor& features, const Tensor& head_weights) {
    if (features.rank() != 5 || head_weights.rank() != 2) {
        throw ShapeError("pool_and_classify expects rank-5 features and rank-2 head, got " +
                         to_string(features.shape()) + " and " + to_string(head_weights.shape()));
    }
    const std::size_t batch = features.dim(0), channels = features.dim(1);
    const std::size_t inner = features.dim(2) * features.dim(3) * features.dim(4);
    if (head_weights.dim(1) != channels) {
        throw ShapeError("pool_and_classify width mismatch: features " + to_string(features.shape()) + " vs head " +
                         to_string(head_weights.shape()));
    }
    const std::size_t classes = head_weights.dim(0);
    std::vector<double> pooled(batch * channels);
    const double* f = features.data().data();
    for (std::size_t i = 0; i < batch * channels; ++i) {
        double acc = 0.0;
        for (std::size_t s = 0; s < inner; ++s) acc += f[i * inner + s];
        pooled[i] = acc / static_cast<double>(inner);
    }
    std::vector<double> logits(batch * classes, 0.0);
    const double* w = head_weights.data().data();
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t k = 0; k < classes; ++k) {
            double acc = 0.0;
            for (std::size_t c = 0; c < channels; ++c) acc += w[k * channels + c] * pooled[n * channels + c];
            logits[n * classes + k] = acc;
        }
    }
    return detail::make_result({batch, classes}, std::move(logits), {features, head_weights},
                               [pooled, batch, channels, classes, inner](const TensorNode& self) {
        TensorNode& feat = *self.inputs[0];
        TensorNode& head = *self.inputs[1];
        for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t k = 0; k < classes; ++k) {
                const double g = self.grad[n * classes + k];
                if (head.requires_grad) {
                    for (std::size_t c = 0; c < channels; ++c) head.grad[k * channels + c] += g * pooled[n * channels + c];
                }
            }
            if (!feat.requires_grad) continue;
            for (std::size_t c = 0; c < channels; ++c) {
                double gp = 0.0;
                for (std::size_t k = 0; k < classes; ++k) gp += self.grad[n * classes + k] * head.data[k * channels + c];
                gp /= static_cast<double>(inner);
                double* dst = feat.grad.data() + (n * channels + c) * inner;
                for (std::size_t s = 0; s < inner; ++s) dst[s] += gp;
            }
        }
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy expects rank-2 logits, got " + to_string(logits.shape()));
    const std::size_t rows = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != rows) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         to_string(logits.shape()));
    }
    std::vector<double> probs(rows * classes);
    double total = 0.0;
    const double* z = logits.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const int label = labels[r];
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            throw IndexError("softmax_cross_entropy: row " + std::to_string(r) + " has label " + std::to_string(label) +
                             " outside [0, " + std::to_string(classes) + ")");
        }
        const double* zr = z + r * classes;
        const double mx = *std::max_element(zr, zr + classes);
        double denom = 0.0;
        for (std::size_t k = 0; k < classes; ++k) denom += std::exp(zr[k] - mx);
        const double log_denom = std::log(denom);
        for (std::size_t k = 0; k < classes; ++k) probs[r * classes + k] = std::exp(zr[k] - mx - log_denom);
        total += log_denom - (zr[label] - mx);
    }
    std::vector<int> owned(labels.begin(), labels.end());
    return detail::make_result({1}, {total / static_cast<double>(rows)}, {logits},
                               [probs = std::move(probs), owned = std::move(owned), rows, classes](const TensorNode& self) {
        TensorNode& lg = *self.inputs[0];
        const double scale = self.grad[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < classes; ++k) {
                const double target = static_cast<std::size_t>(owned[r]) == k ? 1.0 : 0.0;
                lg.grad[r * classes + k] += scale * (probs[r * classes + k] - target);
            }
        }
    });
}

}  // namespace stf
