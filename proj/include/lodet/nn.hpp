#pragma once

#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lodet/ops.hpp"
#include "lodet/tensor.hpp"

namespace lodet::lora {
struct LoraAdapter;
}

namespace lodet::nn {

// Fully connected layer over a named weight (and optional bias) owned by the
// enclosing Model. An attached low-rank adapter contributes its delta term
// until it has been merged into the weight.
struct Linear {
    std::string name;
    Parameter* weight = nullptr;  // [out, in]
    Parameter* bias = nullptr;    // [out], optional
    lora::LoraAdapter* adapter = nullptr;

    int in_features() const { return weight->tensor().dim(1); }
    int out_features() const { return weight->tensor().dim(0); }

    Tensor forward(const Tensor& x) const;
};

// Flat registry of named parameters plus the linear layers built on them.
// Storage is a deque so pointers handed out stay valid as the model grows.
class Model {
public:
    Parameter* add_parameter(const std::string& name, Tensor t, bool trainable = true);
    Linear* add_linear(const std::string& name, int in, int out, bool with_bias, Rng& rng);

    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::vector<Linear*> linears();

    void zero_grad();
    void set_all_trainable(bool on);

    // Trainable / total scalar counts over the registry.
    struct ParamCount {
        int64_t trainable = 0;
        int64_t total = 0;
    };
    ParamCount count() const;

private:
    std::deque<Parameter> params_;
    std::deque<Linear> layers_;
};

// Kaiming-style uniform init for layer weights.
Tensor init_uniform(const Shape& shape, float bound, Rng& rng);
Tensor init_gaussian(const Shape& shape, float stddev, Rng& rng);

}  // namespace lodet::nn
