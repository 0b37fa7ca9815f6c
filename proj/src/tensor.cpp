#include "lodet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace lodet {

namespace {
#ifdef NDEBUG
bool g_debug_checks = false;
#else
bool g_debug_checks = true;
#endif
}  // namespace

void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks; }

}  // namespace lodet

namespace lodet::nn {

void check_finite(std::span<const float> v, const char* what) {
    for (float x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite value in ") + what);
        }
    }
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& shape, float v) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value.assign(static_cast<size_t>(numel_of(shape)), v);
    return Tensor(std::move(n));
}

Tensor Tensor::from(const Shape& shape, std::vector<float> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape)) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v) { return from({1}, {v}); }

namespace {
thread_local bool t_grad_enabled = true;
thread_local bool t_shadow_eval = false;
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }
bool grad_enabled() { return t_grad_enabled; }

ShadowEvalGuard::ShadowEvalGuard() : prev_(t_shadow_eval) { t_shadow_eval = true; }
ShadowEvalGuard::~ShadowEvalGuard() { t_shadow_eval = prev_; }
bool shadow_eval() { return t_shadow_eval; }

Tensor Tensor::from_op(const Shape& shape, std::vector<float> value, std::vector<Tensor> parents,
                       std::function<void(TensorNode&)> backward_fn, const char* op_name) {
    if (static_cast<int64_t>(value.size()) != numel_of(shape)) {
        throw ShapeError(std::string("op ") + op_name + " produced " +
                         std::to_string(value.size()) + " values for shape " + shape_str(shape));
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value = std::move(value);
    n->op = op_name;
    bool needs = false;
    if (t_grad_enabled) {
        for (auto& p : parents) {
            if (p.requires_grad()) needs = true;
            n->parents.push_back(p.node());
        }
    }
    n->requires_grad = needs;
    if (needs) n->backward_fn = std::move(backward_fn);
    if (debug_checks()) check_finite(n->value, op_name);
    return Tensor(std::move(n));
}

float Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() requires a scalar, got shape " + shape_str(shape()));
    }
    return node_->value[0];
}

double Tensor::item_hi() const {
    if (numel() != 1) {
        throw ContractError("item_hi() requires a scalar, got shape " + shape_str(shape()));
    }
    return node_->hi_or_value();
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
    }
    if (!std::isfinite(loss.value()[0])) {
        throw NumericError("loss is not finite");
    }
    if (!loss.requires_grad()) return;  // nothing trainable reachable

    // Iterative post-order topological sort over grad-requiring subgraph.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

}  // namespace lodet::nn
