#include "lodet/optim.hpp"

#include <algorithm>
#include <cmath>

namespace lodet::nn {

AdamW::AdamW() : AdamW(Options{}) {}

AdamW::AdamW(Options opts) : opts_(opts) {
    if (opts_.lr < 0.0f) throw ContractError("AdamW: negative learning rate");
}

void AdamW::step(std::span<Parameter* const> params) {
    for (Parameter* p : params) {
        if (!p->trainable()) continue;
        if (!p->tensor().has_grad()) {
            throw ContractError("AdamW: trainable parameter '" + p->name() +
                                "' has no gradient; run backward first");
        }
        State& st = state_[p->name()];
        auto w = p->tensor().value_mut();
        auto g = p->tensor().grad();
        if (st.m.size() != w.size()) {
            st.m.assign(w.size(), 0.0f);
            st.v.assign(w.size(), 0.0f);
            st.step = 0;
        }
        st.step += 1;
        float b1 = opts_.beta1, b2 = opts_.beta2;
        float bc1 = 1.0f - std::pow(b1, static_cast<float>(st.step));
        float bc2 = 1.0f - std::pow(b2, static_cast<float>(st.step));
        for (size_t i = 0; i < w.size(); ++i) {
            st.m[i] = b1 * st.m[i] + (1.0f - b1) * g[i];
            st.v[i] = b2 * st.v[i] + (1.0f - b2) * g[i] * g[i];
            float mhat = st.m[i] / bc1;
            float vhat = st.v[i] / bc2;
            w[i] -= opts_.lr * (mhat / (std::sqrt(vhat) + opts_.eps) +
                                opts_.weight_decay * w[i]);
        }
    }
}

float grad_check(const std::function<Tensor()>& f, const std::vector<Parameter*>& params,
                 float eps) {
    if (eps <= 0.0f) throw ContractError("grad_check: eps must be positive");

    for (Parameter* p : params) p->tensor().zero_grad();
    Tensor loss = f();
    if (loss.numel() != 1) throw ContractError("grad_check: f must return a scalar");
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite f evaluation");
    backward(loss);

    std::vector<std::vector<float>> analytic;
    for (Parameter* p : params) {
        auto g = p->tensor().grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty())
            analytic.back().assign(static_cast<size_t>(p->tensor().numel()), 0.0f);
    }

    // FD probes run against the double-precision shadow of the same function
    // so the oracle is not limited by f32 quantization of the f32 engine.
    auto eval = [&]() {
        ShadowEvalGuard precise;
        double v = f().item_hi();
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite f evaluation");
        return v;
    };

    float worst = 0.0f;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto w = params[pi]->tensor().value_mut();
        for (size_t i = 0; i < w.size(); ++i) {
            float saved = w[i];
            w[i] = saved + eps;
            float hi = w[i];
            double fp = eval();
            w[i] = saved - eps;
            float lo = w[i];
            double fm = eval();
            w[i] = saved;
            // divide by the step actually applied after f32 rounding
            double h = static_cast<double>(hi) - static_cast<double>(lo);
            float numeric = static_cast<float>((fp - fm) / h);
            float a = analytic[pi][i];
            float denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8f});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace lodet::nn
