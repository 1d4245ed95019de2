#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dsqa/common.hpp"

namespace dsqa {

struct TapeNode;
using NodePtr = std::shared_ptr<TapeNode>;

// One recorded value in the computation. Nodes form a DAG through
// `parents`; creation ids are monotone, so sorting reachable nodes by id
// descending is a valid reverse-topological order for the backward pass.
struct TapeNode {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad; // allocated on first accumulation
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<NodePtr> parents;              // only parents that require grad
    std::function<void(TapeNode&)> backward;   // empty for leaves/constants

    float* ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
        return grad.data();
    }
};

namespace detail {
inline std::uint64_t& node_counter() {
    thread_local std::uint64_t counter = 0;
    return counter;
}
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool& check_finite_flag() {
    thread_local bool enabled = false;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Debug flag: when set, every op output is scanned for NaN/Inf.
inline void set_check_finite(bool on) { detail::check_finite_flag() = on; }
inline bool check_finite_enabled() { return detail::check_finite_flag(); }

class DiffArray {
public:
    DiffArray() = default;
    explicit DiffArray(NodePtr n) : node_(std::move(n)) {}

    static DiffArray constant(Shape shape, std::vector<float> values) {
        check_sizes(shape, values);
        auto n = std::make_shared<TapeNode>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->id = ++detail::node_counter();
        return DiffArray(std::move(n));
    }

    static DiffArray zeros(Shape shape) {
        auto count = static_cast<std::size_t>(numel(shape));
        return constant(std::move(shape), std::vector<float>(count, 0.0f));
    }

    static DiffArray scalar_const(float v) { return constant({1}, {v}); }

    // A persistent differentiable leaf (parameters, gradient-check probes).
    static DiffArray leaf(Shape shape, std::vector<float> values) {
        check_sizes(shape, values);
        auto n = std::make_shared<TapeNode>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = true;
        n->id = ++detail::node_counter();
        return DiffArray(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    std::size_t size() const { return node_->value.size(); }

    const float* data() const { return node_->value.data(); }
    float* data() { return node_->value.data(); }
    const std::vector<float>& values() const { return node_->value; }
    std::vector<float>& values() { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<float>& grad() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
    }
    // Gradient of element i, zero if the leaf was never reached.
    float grad_at(std::size_t i) const { return node_->grad.empty() ? 0.0f : node_->grad[i]; }

    float scalar() const {
        if (size() != 1) throw DimensionError("scalar(): array has shape " + shape_str(shape()));
        return node_->value[0];
    }

    const NodePtr& node() const { return node_; }

private:
    static void check_sizes(const Shape& shape, const std::vector<float>& values) {
        if (static_cast<std::int64_t>(values.size()) != numel(shape))
            throw DimensionError("DiffArray: value count does not match shape " + shape_str(shape));
    }

    NodePtr node_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<float>& v) {
    if (!check_finite_flag()) return;
    for (float x : v) {
        if (!std::isfinite(x))
            throw NumericError(std::string(op) + ": non-finite value produced");
    }
}

// Builds the output node for an op. `bwd` is recorded only when gradients
// are enabled and at least one input requires them.
inline DiffArray make_op(const char* op, Shape shape, std::vector<float> values,
                         std::initializer_list<DiffArray> inputs,
                         std::function<void(TapeNode&)> bwd) {
    check_finite(op, values);
    auto n = std::make_shared<TapeNode>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->id = ++node_counter();
    if (grad_enabled_flag()) {
        for (const DiffArray& in : inputs) {
            if (in.defined() && in.requires_grad()) n->parents.push_back(in.node());
        }
        if (!n->parents.empty()) {
            n->requires_grad = true;
            n->backward = std::move(bwd);
        }
    }
    return DiffArray(std::move(n));
}

} // namespace detail

// Reverse-mode pass from a scalar loss. Every reachable differentiable
// node gets its gradient accumulated; leaves keep theirs afterwards.
inline void backward(const DiffArray& loss) {
    if (loss.size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw StateError("backward: loss was not recorded (inference mode or constant input)");

    std::vector<TapeNode*> order;
    std::unordered_set<TapeNode*> seen;
    std::vector<TapeNode*> stack{loss.node().get()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        TapeNode* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const NodePtr& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const TapeNode* a, const TapeNode* b) { return a->id > b->id; });

    loss.node()->ensure_grad()[0] = 1.0f;
    for (TapeNode* n : order) {
        if (n->backward) {
            n->ensure_grad();
            n->backward(*n);
        }
    }
}

} // namespace dsqa
