#pragma once

#include <functional>
#include <map>
#include <span>
#include <vector>

#include "lodet/tensor.hpp"

namespace lodet::nn {

// Adaptive-moment optimizer with decoupled weight decay. State (first/second
// moments, step count) is keyed by parameter name and persists across steps.
class AdamW {
public:
    struct Options {
        float lr = 1e-4f;
        float beta1 = 0.9f;
        float beta2 = 0.999f;
        float weight_decay = 1e-4f;
        float eps = 1e-8f;
    };

    AdamW();
    explicit AdamW(Options opts);

    // Applies one update to every trainable parameter. Throws ContractError
    // if a trainable parameter has no accumulated gradient. Non-trainable
    // parameters are never touched, grads or not.
    void step(std::span<Parameter* const> params);
    void step(const std::vector<Parameter*>& params) {
        step(std::span<Parameter* const>(params.data(), params.size()));
    }

    const Options& options() const { return opts_; }
    void set_lr(float lr) { opts_.lr = lr; }
    void reset_state() { state_.clear(); }

private:
    struct State {
        std::vector<float> m;
        std::vector<float> v;
        int64_t step = 0;
    };
    Options opts_;
    std::map<std::string, State> state_;
};

// Compares reverse-mode gradients of the scalar function `f` against central
// finite differences over every coordinate of `params`. Returns the max of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). `f` must be
// deterministic; non-finite evaluations raise NumericError.
float grad_check(const std::function<Tensor()>& f, const std::vector<Parameter*>& params,
                 float eps);

}  // namespace lodet::nn
