#include "lodet/lora.hpp"

#include <algorithm>

#include "lodet/checkpoint.hpp"

namespace lodet::lora {

namespace {

// Glob match with `*` as the only metacharacter.
bool glob_match(const std::string& pat, const std::string& s) {
    size_t p = 0, i = 0, star = std::string::npos, mark = 0;
    while (i < s.size()) {
        if (p < pat.size() && (pat[p] == s[i])) {
            ++p;
            ++i;
        } else if (p < pat.size() && pat[p] == '*') {
            star = p++;
            mark = i;
        } else if (star != std::string::npos) {
            p = star + 1;
            i = ++mark;
        } else {
            return false;
        }
    }
    while (p < pat.size() && pat[p] == '*') ++p;
    return p == pat.size();
}

std::vector<std::string> split_patterns(const std::string& selector) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : selector) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

bool selector_matches(const std::string& selector, const std::string& name) {
    for (const auto& pat : split_patterns(selector)) {
        if (glob_match(pat, name)) return true;
    }
    return false;
}

Injection::Injection() : storage_(std::make_unique<std::deque<LoraAdapter>>()) {}

std::vector<LoraAdapter*> Injection::adapters() {
    std::vector<LoraAdapter*> out;
    for (auto& a : *storage_) out.push_back(&a);
    return out;
}

std::vector<const LoraAdapter*> Injection::adapters() const {
    std::vector<const LoraAdapter*> out;
    for (auto& a : *storage_) out.push_back(&a);
    return out;
}

Injection inject(nn::Model& model, const AdapterConfig& cfg, Rng& rng) {
    if (cfg.rank < 1) throw RankError("adapter rank must be >= 1");
    if (cfg.alpha <= 0.0f) throw ConfigError("adapter alpha must be positive");

    std::vector<nn::Linear*> targets;
    for (nn::Linear* l : model.linears()) {
        if (selector_matches(cfg.target_selector, l->name)) targets.push_back(l);
    }
    if (targets.empty()) {
        throw ConfigError("adapter selector '" + cfg.target_selector + "' matches no layers");
    }
    for (nn::Linear* l : targets) {
        if (l->adapter) throw StateError("layer '" + l->name + "' already has an adapter");
        int lim = std::min(l->in_features(), l->out_features());
        if (cfg.rank > lim) {
            throw RankError("rank " + std::to_string(cfg.rank) + " exceeds min(d_in, d_out) = " +
                            std::to_string(lim) + " for layer '" + l->name + "'");
        }
    }

    // Freeze the whole model first; only the new factors train.
    model.set_all_trainable(false);

    Injection inj;
    inj.config_ = cfg;
    for (nn::Linear* l : targets) {
        LoraAdapter ad;
        ad.layer_name = l->name;
        ad.rank = cfg.rank;
        ad.alpha = cfg.alpha;
        ad.base = l->weight;
        ad.a = model.add_parameter(l->name + ".lora_a",
                                   nn::init_gaussian({cfg.rank, l->in_features()},
                                                     cfg.init_scale, rng));
        ad.b = model.add_parameter(l->name + ".lora_b",
                                   nn::Tensor::zeros({l->out_features(), cfg.rank}, true));
        inj.storage_->push_back(ad);
        l->adapter = &inj.storage_->back();
    }
    return inj;
}

nn::Tensor merge(LoraAdapter& adapter) {
    if (adapter.merged) throw StateError("adapter on '" + adapter.layer_name + "' already merged");
    auto w = adapter.base->tensor().value_mut();
    auto a = adapter.a->tensor().value();
    auto b = adapter.b->tensor().value();
    int d_out = adapter.base->tensor().dim(0);
    int d_in = adapter.base->tensor().dim(1);
    int r = adapter.rank;
    float s = adapter.scaling();
    for (int o = 0; o < d_out; ++o) {
        for (int c = 0; c < d_in; ++c) {
            float acc = 0.0f;
            for (int k = 0; k < r; ++k) acc += b[static_cast<size_t>(o) * r + k] * a[static_cast<size_t>(k) * d_in + c];
            w[static_cast<size_t>(o) * d_in + c] += s * acc;
        }
    }
    adapter.merged = true;
    return adapter.base->tensor();
}

void unmerge(LoraAdapter& adapter) {
    if (!adapter.merged) throw StateError("adapter on '" + adapter.layer_name + "' is not merged");
    auto w = adapter.base->tensor().value_mut();
    auto a = adapter.a->tensor().value();
    auto b = adapter.b->tensor().value();
    int d_out = adapter.base->tensor().dim(0);
    int d_in = adapter.base->tensor().dim(1);
    int r = adapter.rank;
    float s = adapter.scaling();
    for (int o = 0; o < d_out; ++o) {
        for (int c = 0; c < d_in; ++c) {
            float acc = 0.0f;
            for (int k = 0; k < r; ++k) acc += b[static_cast<size_t>(o) * r + k] * a[static_cast<size_t>(k) * d_in + c];
            w[static_cast<size_t>(o) * d_in + c] -= s * acc;
        }
    }
    adapter.merged = false;
}

TrainableCount trainable_count(const nn::Model& model) {
    auto c = model.count();
    return TrainableCount{c.trainable, c.total};
}

void save_adapter(const std::string& path, const Injection& inj) {
    nn::Checkpoint ckpt;
    ckpt.version = nn::kCheckpointVersionAdapter;
    nn::AdapterHeader hdr;
    hdr.rank = static_cast<uint32_t>(inj.config().rank);
    hdr.alpha = inj.config().alpha;
    hdr.selector = inj.config().target_selector;
    ckpt.adapter = hdr;
    for (const LoraAdapter* ad : inj.adapters()) {
        for (const nn::Parameter* p : {ad->a, ad->b}) {
            nn::CheckpointRecord rec;
            rec.name = p->name();
            rec.shape = p->tensor().shape();
            auto v = p->tensor().value();
            rec.data.assign(v.begin(), v.end());
            ckpt.records.push_back(std::move(rec));
        }
    }
    nn::write_checkpoint(path, ckpt);
}

Injection load_adapter(const std::string& path, nn::Model& model) {
    nn::Checkpoint ckpt = nn::read_checkpoint(path);
    if (ckpt.version != nn::kCheckpointVersionAdapter || !ckpt.adapter) {
        throw ParseError("not an adapter checkpoint: " + path);
    }
    AdapterConfig cfg;
    cfg.rank = static_cast<int>(ckpt.adapter->rank);
    cfg.alpha = ckpt.adapter->alpha;
    cfg.target_selector = ckpt.adapter->selector;
    Rng rng(0);  // A/B are overwritten below; init values do not matter
    Injection inj = inject(model, cfg, rng);
    for (const auto& rec : ckpt.records) {
        nn::Parameter* p = model.find(rec.name);
        if (!p) throw IntegrityError("adapter record '" + rec.name + "' has no parameter");
        if (p->tensor().shape() != rec.shape) {
            throw ShapeError("adapter record '" + rec.name + "' shape mismatch");
        }
        auto w = p->tensor().value_mut();
        std::copy(rec.data.begin(), rec.data.end(), w.begin());
    }
    return inj;
}

}  // namespace lodet::lora
