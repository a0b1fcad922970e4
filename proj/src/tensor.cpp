#include "stfusion/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "stfusion/errors.hpp"

namespace stf {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto node = std::make_shared<TensorNode>();
    node->data.assign(numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (numel(shape) != values.size()) {
        throw ShapeError("Tensor::from: shape " + to_string(shape) + " holds " +
                         std::to_string(numel(shape)) + " values, got " + std::to_string(values.size()));
    }
    for (auto extent : shape) {
        if (extent == 0) throw ShapeError("Tensor::from: zero extent in " + to_string(shape));
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss, BackwardOptions options) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    TensorNode* root = loss.node().get();
    if (!root->requires_grad) {
        throw ContractError("backward: loss does not depend on any tensor that requires a gradient");
    }

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            TensorNode* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorNode* node : order) {
        const bool leaf = !node->backward_fn;
        if (leaf && options.accumulate && node->grad.size() == node->data.size()) continue;
        node->grad.assign(node->data.size(), 0.0);
    }
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

namespace detail {

namespace {
Tensor finish(Shape shape, std::vector<double> data, std::vector<std::shared_ptr<TensorNode>> inputs,
              BackwardFn fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    const bool record = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const auto& in) {
                            return in->requires_grad;
                        });
    if (record) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward_fn = std::move(fn);
    }
    return Tensor(std::move(node));
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs, BackwardFn fn) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(inputs.size());
    for (const auto& t : inputs) nodes.push_back(t.node());
    return finish(std::move(shape), std::move(data), std::move(nodes), std::move(fn));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, BackwardFn fn) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(inputs.size());
    for (const auto& t : inputs) nodes.push_back(t.node());
    return finish(std::move(shape), std::move(data), std::move(nodes), std::move(fn));
}

}  // namespace detail

}  // namespace stf
