#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle to shared storage. Operations in ops.hpp record
// their inputs and a backward closure on the result whenever gradient
// recording is enabled and at least one input requires a gradient. backward()
// walks the recorded graph from a scalar loss.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stf {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(const TensorNode& self)> backward_fn;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

    std::span<const double> data() const { return node_->data; }
    // Direct write access, used by optimizers and initializers. Mutating a
    // tensor that participates in a live graph invalidates that graph.
    std::span<double> mutable_data() { return node_->data; }
    double item() const;
    double operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad; }
    void clear_grad() { node_->grad.clear(); }

    // Fresh storage with the same values and no history.
    Tensor detach() const;
    Tensor clone(bool requires_grad) const;

    const std::shared_ptr<TensorNode>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

struct BackwardOptions {
    // Add into existing leaf gradients instead of overwriting them.
    bool accumulate = false;
};

// Populates grad on every node reachable from `loss` that requires a
// gradient. Leaves that are reachable but receive no signal end with zeros.
void backward(const Tensor& loss, BackwardOptions options = {});

namespace detail {

using BackwardFn = std::function<void(const TensorNode& self)>;

// Builds an op result and records history when needed.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   BackwardFn fn);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn fn);

}  // namespace detail

}  // namespace stf
