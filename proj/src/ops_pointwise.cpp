#include <cmath>

#include "stfusion/errors.hpp"
#include "stfusion/ops.hpp"

namespace stf {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
}

// Unary map with derivative expressed through input and output values.
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return detail::make_result(x.shape(), std::move(out), {x}, [df](const TensorNode& self) {
        TensorNode& a = *self.inputs[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i] * df(a.data[i], self.data[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](const TensorNode& self) {
        for (const auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
        }
    });
}

Tensor relu(const Tensor& x) {
    return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor scale(const Tensor& x, double factor) {
    return unary(x, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Tensor elementwise(ElementwiseKind kind, std::span<const Tensor> operands, double factor) {
    const std::size_t expected = kind == ElementwiseKind::add ? 2 : 1;
    if (operands.size() != expected) {
        throw ContractError("elementwise: expected " + std::to_string(expected) + " operands, got " +
                            std::to_string(operands.size()));
    }
    switch (kind) {
        case ElementwiseKind::add: return add(operands[0], operands[1]);
        case ElementwiseKind::relu: return relu(operands[0]);
        case ElementwiseKind::scale: return scale(operands[0], factor);
    }
    throw ContractError("elementwise: unknown kind");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](const TensorNode& self) {
        TensorNode& x = *self.inputs[0];
        TensorNode& y = *self.inputs[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (x.requires_grad) x.grad[i] += self.grad[i] * y.data[i];
            if (y.requires_grad) y.grad[i] += self.grad[i] * x.data[i];
        }
    });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("mul_scalar: factor must hold one value, got " + to_string(s.shape()));
    const double factor = s[0];
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * factor;
    return detail::make_result(x.shape(), std::move(out), {x, s}, [](const TensorNode& self) {
        TensorNode& a = *self.inputs[0];
        TensorNode& f = *self.inputs[1];
        if (a.requires_grad) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i] * f.data[0];
        }
        if (f.requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * a.data[i];
            f.grad[0] += acc;
        }
    });
}

Tensor add_constant(const Tensor& x, double c) {
    return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(x,
                 [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
                 [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& x) {
    return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor xlogx(const Tensor& x) {
    return unary(x, [](double v) { return v == 0.0 ? 0.0 : v * std::log(v); },
                 [](double v, double) { return std::log(v) + 1.0; });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return detail::make_result({1}, {acc}, {x}, [](const TensorNode& self) {
        TensorNode& a = *self.inputs[0];
        for (double& g : a.grad) g += self.grad[0];
    });
}

Tensor squared_norm(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v * v;
    return detail::make_result({1}, {acc}, {x}, [](const TensorNode& self) {
        TensorNode& a = *self.inputs[0];
        for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += 2.0 * a.data[i] * self.grad[0];
    });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_channels: no inputs");
    const Shape& first = parts.front().shape();
    if (first.size() < 2) throw ShapeError("concat_channels: rank < 2 in " + to_string(first));
    std::size_t outer = first[0];
    std::size_t inner = 1;
    for (std::size_t a = 2; a < first.size(); ++a) inner *= first[a];
    std::size_t channels = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size() && s[0] == first[0];
        for (std::size_t a = 2; ok && a < s.size(); ++a) ok = s[a] == first[a];
        if (!ok) throw ShapeError("concat_channels: " + to_string(s) + " incompatible with " + to_string(first));
        channels += s[1];
    }
    if (parts.size() == 1) return parts.front();

    Shape shape = first;
    shape[1] = channels;
    std::vector<double> out(numel(shape));
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1) * inner);
    const std::size_t row = channels * inner;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const double* src = parts[k].data().data();
        for (std::size_t n = 0; n < outer; ++n) {
            std::copy(src + n * widths[k], src + (n + 1) * widths[k], out.data() + n * row + offset);
        }
        offset += widths[k];
    }
    return detail::make_result(std::move(shape), std::move(out), parts, [widths, outer, row](const TensorNode& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            TensorNode& in = *self.inputs[k];
            if (in.requires_grad) {
                for (std::size_t n = 0; n < outer; ++n) {
                    const double* g = self.grad.data() + n * row + offset;
                    double* dst = in.grad.data() + n * widths[k];
                    for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += g[i];
                }
            }
            offset += widths[k];
        }
    });
}

Tensor avg_pool2x2(const Tensor& input) {
    if (input.rank() != 5 || input.dim(3) % 2 != 0 || input.dim(4) % 2 != 0) {
        throw ShapeError("avg_pool2x2 needs rank-5 input with even H and W, got " + to_string(input.shape()));
    }
    const std::size_t planes = input.dim(0) * input.dim(1) * input.dim(2);
    const std::size_t h = input.dim(3), w = input.dim(4);
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<double> out(planes * oh * ow);
    const double* in = input.data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        const double* src = in + p * h * w;
        double* dst = out.data() + p * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                const double* a = src + 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (a[0] + a[1] + a[w] + a[w + 1]);
            }
        }
    }
    Shape shape{input.dim(0), input.dim(1), input.dim(2), oh, ow};
    return detail::make_result(std::move(shape), std::move(out), {input}, [planes, h, w, oh, ow](const TensorNode& self) {
        TensorNode& in = *self.inputs[0];
        for (std::size_t p = 0; p < planes; ++p) {
            const double* g = self.grad.data() + p * oh * ow;
            double* dst = in.grad.data() + p * h * w;
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t x = 0; x < ow; ++x) {
                    const double v = 0.25 * g[y * ow + x];
                    double* a = dst + 2 * y * w + 2 * x;
                    a[0] += v;
                    a[1] += v;
                    a[w] += v;
                    a[w + 1] += v;
                }
            }
        }
    });
}

}  // namespace stf
