#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lodet/common.hpp"

namespace lodet::nn {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node of the recording tape. Holds the forward value and, while a
// backward pass is running, the accumulated gradient. Interior nodes carry a
// closure that pushes gradient into their parents.
struct TensorNode {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "leaf";
    // Double-precision shadow of `value`. Scalar reductions always carry it;
    // under ShadowEvalGuard every op does. It never feeds training math --
    // it exists so finite-difference oracles are not limited by f32
    // quantization of the function they probe.
    std::vector<double> shadow;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }
    double hi_or_value() const {
        return shadow.empty() ? static_cast<double>(value[0]) : shadow[0];
    }
};

// Value-semantics handle over a shared node. Copies alias the same storage;
// ops build fresh nodes. The tape is single-threaded: one recording graph per
// training step.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float v);
    static Tensor from(const Shape& shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float v);

    // Low-level node builder for custom ops (used by the op library itself
    // and by tests that need to inject a deliberate gradient fault).
    static Tensor from_op(const Shape& shape, std::vector<float> value,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backward_fn, const char* op_name);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }

    std::span<const float> value() const { return node_->value; }
    // Direct mutation is for leaves only (parameter updates, checkpoint load).
    std::span<float> value_mut() { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
    std::span<const float> grad() const { return node_->grad; }
    std::span<float> grad_mut() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    float item() const;
    // Scalar value at the precision of the producing accumulator.
    double item_hi() const;

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

// Reverse-mode sweep from a scalar loss. Accumulates gradient into every
// grad-requiring leaf reachable from `loss`; nodes with requires_grad ==
// false are never touched. Throws ContractError on non-scalar input and
// NumericError if the loss value is not finite.
void backward(const Tensor& loss);

// While a guard is alive, ops record neither parents nor gradient rules.
// Forward values are unchanged; use for inference.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// While a guard is alive, every op also evaluates a double-precision shadow
// of its output. The f32 forward values are untouched.
class ShadowEvalGuard {
public:
    ShadowEvalGuard();
    ~ShadowEvalGuard();
    ShadowEvalGuard(const ShadowEvalGuard&) = delete;
    ShadowEvalGuard& operator=(const ShadowEvalGuard&) = delete;

private:
    bool prev_;
};

bool shadow_eval();

// A named, optionally trainable leaf. trainable == false implies the tensor
// never requires grad and the optimizer skips it.
class Parameter {
public:
    Parameter() = default;
    Parameter(std::string name, Tensor t, bool trainable = true)
        : name_(std::move(name)), tensor_(std::move(t)), trainable_(trainable) {
        tensor_.set_requires_grad(trainable_);
    }

    const std::string& name() const { return name_; }
    Tensor& tensor() { return tensor_; }
    const Tensor& tensor() const { return tensor_; }
    bool trainable() const { return trainable_; }
    void set_trainable(bool on) {
        trainable_ = on;
        tensor_.set_requires_grad(on);
        if (!on) tensor_.zero_grad();
    }

private:
    std::string name_;
    Tensor tensor_;
    bool trainable_ = true;
};

void check_finite(std::span<const float> v, const char* what);

}  // namespace lodet::nn
