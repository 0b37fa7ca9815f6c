#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "lodet/lora.hpp"
#include "lodet/optim.hpp"

using namespace lodet;
using nn::Tensor;

namespace {

// head.* layers are adapter targets, backbone.* stays frozen base.
struct SmallNet {
    nn::Model model;
    nn::Linear* backbone;
    nn::Linear* fc1;
    nn::Linear* fc2;

    explicit SmallNet(uint64_t seed, int d = 8) {
        Rng rng(seed);
        backbone = model.add_linear("backbone.proj", d, d, true, rng);
        fc1 = model.add_linear("head.fc1", d, d, true, rng);
        fc2 = model.add_linear("head.fc2", d, d, true, rng);
    }

    Tensor forward(const Tensor& x) {
        return fc2->forward(nn::relu(fc1->forward(nn::relu(backbone->forward(x)))));
    }
};

Tensor random_input(int rows, int cols, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> d(static_cast<size_t>(rows) * cols);
    for (auto& v : d) v = static_cast<float>(rng.normal());
    return Tensor::from({rows, cols}, std::move(d));
}

}  // namespace

TEST_CASE("selector glob semantics") {
    CHECK(lora::selector_matches("head.*", "head.fc1"));
    CHECK_FALSE(lora::selector_matches("head.*", "backbone.proj"));
    CHECK(lora::selector_matches("*.fc1,*.fc2", "head.fc2"));
    CHECK(lora::selector_matches("*", "anything.at.all"));
    CHECK_FALSE(lora::selector_matches("head.fc1", "head.fc10"));
}

TEST_CASE("injection is the identity map at creation") {
    SmallNet net(21);
    Tensor x = random_input(5, 8, 77);
    Tensor before = net.forward(x);

    Rng rng(5);
    auto inj = lora::inject(net.model, lora::make_config(4), rng);
    Tensor after = net.forward(x);

    REQUIRE(before.numel() == after.numel());
    for (size_t i = 0; i < before.value().size(); ++i) {
        CHECK(std::fabs(before.value()[i] - after.value()[i]) <= 1e-7f);
    }
    CHECK(inj.adapters().size() == 2);
}

TEST_CASE("adapted forward hand value") {
    // identity base, rank-1 factors: y = W x + B (A x)
    nn::Model model;
    Rng rng(1);
    nn::Linear* layer = model.add_linear("head.only", 2, 2, false, rng);
    auto wv = layer->weight->tensor().value_mut();
    wv[0] = 1.0f; wv[1] = 0.0f; wv[2] = 0.0f; wv[3] = 1.0f;

    lora::AdapterConfig cfg;
    cfg.rank = 1;
    cfg.alpha = 1.0f;
    cfg.target_selector = "head.only";
    Rng rng2(2);
    auto inj = lora::inject(model, cfg, rng2);
    lora::LoraAdapter* ad = inj.adapters()[0];
    ad->a->tensor().value_mut()[0] = 1.0f;
    ad->a->tensor().value_mut()[1] = 2.0f;
    ad->b->tensor().value_mut()[0] = 3.0f;
    ad->b->tensor().value_mut()[1] = 4.0f;

    Tensor x = Tensor::from({1, 2}, {1.0f, 0.0f});
    Tensor y = layer->forward(x);
    CHECK(y.value()[0] == doctest::Approx(4.0f));
    CHECK(y.value()[1] == doctest::Approx(4.0f));

    // merged weight W' = W + B A
    Tensor merged = lora::merge(*ad);
    CHECK(merged.value()[0] == doctest::Approx(4.0f));
    CHECK(merged.value()[1] == doctest::Approx(6.0f));
    CHECK(merged.value()[2] == doctest::Approx(4.0f));
    CHECK(merged.value()[3] == doctest::Approx(9.0f));

    // forward through the merged weight matches the adapter path
    Tensor y2 = layer->forward(x);
    CHECK(y2.value()[0] == doctest::Approx(4.0f));
    CHECK(y2.value()[1] == doctest::Approx(4.0f));

    CHECK_THROWS_AS(lora::merge(*ad), StateError);
}

TEST_CASE("selector with no match raises a configuration error") {
    SmallNet net(3);
    Rng rng(4);
    CHECK_THROWS_AS(lora::inject(net.model, lora::make_config(2, "nonexistent.*"), rng),
                    ConfigError);
}

TEST_CASE("rank above layer capacity raises a rank error") {
    SmallNet net(3);
    Rng rng(4);
    CHECK_THROWS_AS(lora::inject(net.model, lora::make_config(16, "head.*"), rng), RankError);
}

TEST_CASE("merge with zero factors leaves the weight bitwise unchanged") {
    SmallNet net(9);
    std::vector<float> before(net.fc1->weight->tensor().value().begin(),
                              net.fc1->weight->tensor().value().end());
    Rng rng(10);
    auto inj = lora::inject(net.model, lora::make_config(4), rng);
    lora::merge(*inj.adapters()[0]);
    auto after = net.fc1->weight->tensor().value();
    for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("merge equivalence across the rank grid") {
    for (int rank : {4, 8, 32, 128}) {
        const int d = 128;
        nn::Model model;
        Rng rng(static_cast<uint64_t>(rank) * 31 + 7);
        nn::Linear* layer = model.add_linear("head.big", d, d, false, rng);
        lora::AdapterConfig cfg;
        cfg.rank = rank;
        cfg.alpha = static_cast<float>(rank) * 2.0f;
        cfg.target_selector = "head.*";
        auto inj = lora::inject(model, cfg, rng);
        lora::LoraAdapter* ad = inj.adapters()[0];
        // give B real values so the delta is nonzero
        for (auto& v : ad->b->tensor().value_mut()) v = static_cast<float>(rng.normal(0.0, 0.05));

        const int n_draws = 25;
        Tensor x = random_input(n_draws, d, static_cast<uint64_t>(rank) + 1000);
        Tensor adapted = layer->forward(x);
        lora::merge(*ad);
        Tensor merged = layer->forward(x);

        // |W'x - (Wx + s*BAx)| < 1e-5 * ||x|| per draw
        for (int i = 0; i < n_draws; ++i) {
            double xnorm = 0.0;
            for (int c = 0; c < d; ++c) {
                double v = x.value()[static_cast<size_t>(i) * d + c];
                xnorm += v * v;
            }
            xnorm = std::sqrt(xnorm);
            double max_diff = 0.0;
            for (int c = 0; c < d; ++c) {
                size_t idx = static_cast<size_t>(i) * d + c;
                max_diff = std::max(max_diff,
                                    std::fabs(static_cast<double>(adapted.value()[idx]) -
                                              merged.value()[idx]));
            }
            CAPTURE(rank);
            CHECK(max_diff < 1e-5 * xnorm);
        }
    }
}

TEST_CASE("merge then unmerge restores the base weight within 1e-6") {
    SmallNet net(33);
    Rng rng(34);
    auto inj = lora::inject(net.model, lora::make_config(4), rng);
    for (auto* ad : inj.adapters()) {
        for (auto& v : ad->b->tensor().value_mut()) v = static_cast<float>(rng.normal(0.0, 0.1));
    }
    std::vector<float> before(net.fc1->weight->tensor().value().begin(),
                              net.fc1->weight->tensor().value().end());
    lora::merge(*inj.adapters()[0]);
    lora::unmerge(*inj.adapters()[0]);
    auto after = net.fc1->weight->tensor().value();
    for (size_t i = 0; i < before.size(); ++i) {
        CHECK(std::fabs(before[i] - after[i]) < 1e-6f);
    }
    CHECK_THROWS_AS(lora::unmerge(*inj.adapters()[0]), StateError);
}

TEST_CASE("trainable_count arithmetic") {
    // single adapted 64x32 layer at rank 4: r*(d_in+d_out) = 384
    nn::Model model;
    Rng rng(8);
    model.add_linear("head.wide", 32, 64, false, rng);  // weight is [64 x 32]
    auto before = lora::trainable_count(model);
    CHECK(before.trainable == 64 * 32);
    CHECK(before.total == 64 * 32);

    auto inj = lora::inject(model, lora::make_config(4, "head.*"), rng);
    auto after = lora::trainable_count(model);
    CHECK(after.trainable == 4 * (64 + 32));
    CHECK(after.total >= 2048 + 384);
    CHECK(inj.adapters()[0]->rank == 4);
}

TEST_CASE("trainable_count break-even at r = d/2 on a square layer") {
    const int d = 16;
    for (int r : {d / 4, d / 2, d}) {
        nn::Model model;
        Rng rng(9);
        model.add_linear("head.sq", d, d, false, rng);
        auto inj = lora::inject(model, lora::make_config(r, "head.*"), rng);
        (void)inj;
        auto counts = lora::trainable_count(model);
        CHECK(counts.trainable == 2 * d * r);
        if (r < d / 2) CHECK(counts.trainable < d * d);
        if (r == d / 2) CHECK(counts.trainable == d * d);
        if (r > d / 2) CHECK(counts.trainable > d * d);
    }
}

TEST_CASE("fully frozen model counts zero trainable") {
    SmallNet net(2);
    net.model.set_all_trainable(false);
    auto counts = lora::trainable_count(net.model);
    CHECK(counts.trainable == 0);
    CHECK(counts.total > 0);
}

TEST_CASE("gradient isolation under training") {
    SmallNet net(55);
    Rng rng(56);
    auto inj = lora::inject(net.model, lora::make_config(2), rng);

    std::vector<std::vector<float>> base_before;
    for (const auto* p : net.model.parameters()) {
        if (!p->trainable()) {
            auto v = p->tensor().value();
            base_before.emplace_back(v.begin(), v.end());
        }
    }

    nn::AdamW opt({1e-2f, 0.9f, 0.999f, 0.0f, 1e-8f});
    auto params = net.model.parameters();
    for (int step = 0; step < 3; ++step) {
        net.model.zero_grad();
        Tensor y = net.forward(random_input(4, 8, 100 + static_cast<uint64_t>(step)));
        nn::backward(nn::mean(nn::mul(y, y)));
        opt.step(params);
    }

    // base buffers bitwise unchanged, no grads on them
    size_t bi = 0;
    for (const auto* p : net.model.parameters()) {
        if (p->trainable()) continue;
        auto v = p->tensor().value();
        for (size_t i = 0; i < v.size(); ++i) CHECK(v[i] == base_before[bi][i]);
        CHECK_FALSE(p->tensor().has_grad());
        ++bi;
    }

    // after B received updates, both factors collect nonzero gradient
    net.model.zero_grad();
    Tensor y = net.forward(random_input(4, 8, 999));
    nn::backward(nn::mean(nn::mul(y, y)));
    for (auto* ad : inj.adapters()) {
        bool a_nonzero = false, b_nonzero = false;
        for (float g : ad->a->tensor().grad()) a_nonzero |= g != 0.0f;
        for (float g : ad->b->tensor().grad()) b_nonzero |= g != 0.0f;
        CHECK(a_nonzero);
        CHECK(b_nonzero);
    }
}

TEST_CASE("adapter checkpoint round trip") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "lodet_adapter.ckpt";

    SmallNet net(61);
    Rng rng(62);
    lora::AdapterConfig cfg = lora::make_config(4, "head.*");
    cfg.alpha = 6.5f;
    auto inj = lora::inject(net.model, cfg, rng);
    for (auto* ad : inj.adapters()) {
        for (auto& v : ad->b->tensor().value_mut()) v = static_cast<float>(rng.normal(0.0, 0.1));
    }
    Tensor x = random_input(3, 8, 63);
    Tensor expect = net.forward(x);
    lora::save_adapter(path.string(), inj);

    SmallNet fresh(61);  // same base weights, no adapters yet
    auto loaded = lora::load_adapter(path.string(), fresh.model);
    CHECK(loaded.config().rank == 4);
    CHECK(loaded.config().alpha == doctest::Approx(6.5f));
    CHECK(loaded.config().target_selector == "head.*");
    Tensor got = fresh.forward(x);
    for (size_t i = 0; i < expect.value().size(); ++i) {
        CHECK(got.value()[i] == expect.value()[i]);
    }
    fs::remove(path);
}
