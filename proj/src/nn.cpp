#include "lodet/nn.hpp"

#include <cmath>

#include "lodet/lora.hpp"

namespace lodet::nn {

Tensor Linear::forward(const Tensor& x) const {
    Tensor y = bias ? linear(x, weight->tensor(), bias->tensor())
                    : linear_no_bias(x, weight->tensor());
    if (adapter && !adapter->merged) {
        // (x * A^T) * B^T scaled by alpha/r, accumulated onto the base map.
        Tensor ax = linear_no_bias(x, adapter->a->tensor());
        Tensor bax = linear_no_bias(ax, adapter->b->tensor());
        y = add(y, scale(bax, adapter->scaling()));
    }
    return y;
}

Parameter* Model::add_parameter(const std::string& name, Tensor t, bool trainable) {
    if (find(name)) throw ConfigError("duplicate parameter name: " + name);
    params_.emplace_back(name, std::move(t), trainable);
    return &params_.back();
}

Linear* Model::add_linear(const std::string& name, int in, int out, bool with_bias, Rng& rng) {
    float bound = 1.0f / std::sqrt(static_cast<float>(in));
    Linear layer;
    layer.name = name;
    layer.weight = add_parameter(name + ".weight", init_uniform({out, in}, bound, rng));
    if (with_bias) layer.bias = add_parameter(name + ".bias", Tensor::zeros({out}, true));
    layers_.push_back(layer);
    return &layers_.back();
}

Parameter* Model::find(const std::string& name) {
    for (auto& p : params_)
        if (p.name() == name) return &p;
    return nullptr;
}

const Parameter* Model::find(const std::string& name) const {
    for (auto& p : params_)
        if (p.name() == name) return &p;
    return nullptr;
}

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<const Parameter*> Model::parameters() const {
    std::vector<const Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<Linear*> Model::linears() {
    std::vector<Linear*> out;
    for (auto& l : layers_) out.push_back(&l);
    return out;
}

void Model::zero_grad() {
    for (auto& p : params_) p.tensor().zero_grad();
}

void Model::set_all_trainable(bool on) {
    for (auto& p : params_) p.set_trainable(on);
}

Model::ParamCount Model::count() const {
    ParamCount c;
    for (const auto& p : params_) {
        c.total += p.tensor().numel();
        if (p.trainable()) c.trainable += p.tensor().numel();
    }
    return c;
}

Tensor init_uniform(const Shape& shape, float bound, Rng& rng) {
    std::vector<float> data(static_cast<size_t>(numel_of(shape)));
    for (auto& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
    return Tensor::from(shape, std::move(data), true);
}

Tensor init_gaussian(const Shape& shape, float stddev, Rng& rng) {
    std::vector<float> data(static_cast<size_t>(numel_of(shape)));
    for (auto& v : data) v = static_cast<float>(rng.normal(0.0, stddev));
    return Tensor::from(shape, std::move(data), true);
}

}  // namespace lodet::nn
