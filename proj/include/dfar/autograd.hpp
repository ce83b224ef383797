#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dfar/tensor.hpp"

namespace dfar {

/// Graph recording switch. Inference paths run under NoGradGuard so no
/// closures or cached buffers are kept alive.
class GradMode {
public:
    static bool enabled() noexcept { return flag(); }
    static void set(bool on) noexcept { flag() = on; }

private:
    static bool& flag() noexcept {
        thread_local bool on = true;
        return on;
    }
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads `grad` of this node and accumulates into the parents' grads.
    std::function<void(Node&)> backward;

    Tensor<T>& ensure_grad() {
        if (grad.empty()) grad = Tensor<T>::zeros_like(value);
        return grad;
    }
};

/// Handle to a value in the computation graph. Copies share the node.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(T(0));
    }
    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

    /// Scalar convenience accessor for loss values.
    T item() const {
        if (node_->value.numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
        return node_->value[0];
    }

private:
    std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> v) {
    return Var<T>(std::move(v), false);
}

template <typename T>
Var<T> scalar_var(T v) {
    return Var<T>(Tensor<T>({1}, v), false);
}

/// Builds a result node. The backward closure is only stored when recording
/// is on and at least one input requires a gradient.
template <typename T, typename F>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs, F&& backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    if (GradMode::enabled()) {
        for (const auto& in : inputs)
            if (in.requires_grad()) n->requires_grad = true;
        if (n->requires_grad) {
            for (const auto& in : inputs) n->parents.push_back(in.node());
            n->backward = std::forward<F>(backward);
        }
    }
    return Var<T>(std::move(n));
}

template <typename T, typename F>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs, F&& backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    if (GradMode::enabled()) {
        for (const auto& in : inputs)
            if (in.requires_grad()) n->requires_grad = true;
        if (n->requires_grad) {
            for (const auto& in : inputs) n->parents.push_back(in.node());
            n->backward = std::forward<F>(backward);
        }
    }
    return Var<T>(std::move(n));
}

/// Reverse-mode sweep from `root`, seeded with ones (root is normally a
/// scalar loss). Leaf gradients accumulate across calls; interior graph
/// state is released afterwards.
template <typename T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    for (Node<T>* n : order) {
        if (n->backward) {
            n->backward = nullptr;
            n->parents.clear();
            n->grad = Tensor<T>();
        }
    }
}

}  // namespace dfar
