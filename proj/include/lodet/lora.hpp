#pragma once

#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "lodet/nn.hpp"

namespace lodet::lora {

// Low-rank adapter configuration. The selector is a comma-separated list of
// glob patterns (`*` matches any run of characters) applied to layer names.
struct AdapterConfig {
    int rank = 4;
    float alpha = 4.0f;  // scaling numerator; effective factor is alpha / rank
    std::string target_selector = "head.*";
    float init_scale = 0.02f;
};

// Default alpha follows the unit-scaling convention alpha == rank.
inline AdapterConfig make_config(int rank, const std::string& selector = "head.*") {
    AdapterConfig cfg;
    cfg.rank = rank;
    cfg.alpha = static_cast<float>(rank);
    cfg.target_selector = selector;
    return cfg;
}

// Trainable factor pair attached to one frozen base weight. The adapted map
// is W*x + (alpha/rank) * B * (A * x); B starts at zero so injection leaves
// the model's function unchanged.
struct LoraAdapter {
    std::string layer_name;
    nn::Parameter* a = nullptr;       // [rank, d_in]
    nn::Parameter* b = nullptr;       // [d_out, rank]
    nn::Parameter* base = nullptr;    // frozen [d_out, d_in]
    int rank = 0;
    float alpha = 0.0f;
    bool merged = false;

    float scaling() const { return alpha / static_cast<float>(rank); }
};

bool selector_matches(const std::string& selector, const std::string& name);

// Adapters injected into a model. Keep this alive as long as the model is in
// use; layer hooks point into its storage (stable across moves).
class Injection {
public:
    Injection();
    Injection(Injection&&) = default;
    Injection& operator=(Injection&&) = default;

    const AdapterConfig& config() const { return config_; }
    std::vector<LoraAdapter*> adapters();
    std::vector<const LoraAdapter*> adapters() const;

private:
    friend Injection inject(nn::Model& model, const AdapterConfig& cfg, Rng& rng);
    AdapterConfig config_;
    std::unique_ptr<std::deque<LoraAdapter>> storage_;
};

// Wrap every selector-matched linear layer with a rank-r factor pair and
// freeze all non-adapter parameters. Throws ConfigError when the selector
// matches nothing and RankError when rank exceeds min(d_in, d_out) of a
// matched layer.
Injection inject(nn::Model& model, const AdapterConfig& cfg, Rng& rng);

// Fold the adapter delta into the base weight: W' = W + (alpha/rank) * B * A.
// Returns the merged weight; the layer then computes through W' alone.
// Throws StateError on a second merge.
nn::Tensor merge(LoraAdapter& adapter);
// Subtract the delta back out and reactivate the adapter path.
void unmerge(LoraAdapter& adapter);

struct TrainableCount {
    int64_t trainable = 0;
    int64_t total = 0;
};
TrainableCount trainable_count(const nn::Model& model);

// Adapter-only checkpoint: the standard container restricted to A/B factors
// with the adapter config carried in the header.
void save_adapter(const std::string& path, const Injection& inj);
// Re-create adapters in `model` (which must not already be injected) from an
// adapter checkpoint.
Injection load_adapter(const std::string& path, nn::Model& model);

}  // namespace lodet::lora
