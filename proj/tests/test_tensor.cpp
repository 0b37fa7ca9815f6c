#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "lodet/checkpoint.hpp"
#include "lodet/nn.hpp"
#include "lodet/ops.hpp"
#include "lodet/optim.hpp"

using namespace lodet;
using nn::Tensor;

namespace {

// Two-layer ReLU MLP used by the finite-difference checks.
struct TinyMlp {
    nn::Model model;
    nn::Linear* l1;
    nn::Linear* l2;

    TinyMlp(int in, int hidden, int out, uint64_t seed) {
        Rng rng(seed);
        l1 = model.add_linear("fc1", in, hidden, true, rng);
        l2 = model.add_linear("fc2", hidden, out, true, rng);
    }

    Tensor forward(const Tensor& x) { return l2->forward(nn::relu(l1->forward(x))); }
};

Tensor random_input(int rows, int cols, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> d(static_cast<size_t>(rows) * cols);
    for (auto& v : d) v = static_cast<float>(rng.normal());
    return Tensor::from({rows, cols}, std::move(d));
}

}  // namespace

TEST_CASE("matmul identity") {
    Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor out = nn::matmul(i2, m);
    CHECK(out.value()[0] == 1.0f);
    CHECK(out.value()[1] == 2.0f);
    CHECK(out.value()[2] == 3.0f);
    CHECK(out.value()[3] == 4.0f);
}

TEST_CASE("matmul hand value") {
    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({2, 1}, {3, 4});
    Tensor out = nn::matmul(a, b);
    REQUIRE(out.shape() == Shape{1, 1});
    CHECK(out.value()[0] == 11.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
        nn::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("backward quadratic gradient") {
    nn::Parameter w("w", Tensor::from({3}, {1, 2, 3}, true));
    Tensor loss = nn::sum(nn::mul(w.tensor(), w.tensor()));
    nn::backward(loss);
    REQUIRE(w.tensor().has_grad());
    CHECK(w.tensor().grad()[0] == doctest::Approx(2.0f));
    CHECK(w.tensor().grad()[1] == doctest::Approx(4.0f));
    CHECK(w.tensor().grad()[2] == doctest::Approx(6.0f));
}

TEST_CASE("backward through a frozen parameter leaves no grad") {
    nn::Parameter frozen("frozen", Tensor::from({2, 2}, {1, 2, 3, 4}), false);
    nn::Parameter live("live", Tensor::from({2, 2}, {1, 1, 1, 1}, true));
    Tensor out = nn::matmul(frozen.tensor(), live.tensor());
    nn::backward(nn::sum(out));
    CHECK_FALSE(frozen.tensor().has_grad());
    CHECK(live.tensor().has_grad());
}

TEST_CASE("backward rejects non-scalar loss") {
    nn::Parameter w("w", Tensor::from({2}, {1, 2}, true));
    Tensor y = nn::mul(w.tensor(), w.tensor());
    CHECK_THROWS_AS(nn::backward(y), ContractError);
}

TEST_CASE("grad accumulates across backward calls") {
    nn::Parameter w("w", Tensor::from({2}, {1, 2}, true));
    for (int i = 0; i < 2; ++i) {
        Tensor loss = nn::sum(nn::mul(w.tensor(), w.tensor()));
        nn::backward(loss);
    }
    CHECK(w.tensor().grad()[0] == doctest::Approx(4.0f));
    w.tensor().zero_grad();
    CHECK_FALSE(w.tensor().has_grad());
}

TEST_CASE("grad_check exact quadratic") {
    nn::Parameter w("w", Tensor::from({4}, {0.5f, -1.25f, 2.0f, 0.75f}, true));
    std::vector<nn::Parameter*> params{&w};
    float err = nn::grad_check([&] { return nn::sum(nn::mul(w.tensor(), w.tensor())); }, params,
                               1e-3f);
    CHECK(err < 1e-6f);
}

TEST_CASE("grad_check two-layer MLP under 1e-3") {
    for (uint64_t seed : {11ull, 22ull, 33ull}) {
        TinyMlp mlp(6, 8, 3, seed);
        Tensor x = random_input(4, 6, seed + 100);
        auto params = mlp.model.parameters();
        float err = nn::grad_check(
            [&] {
                Tensor y = mlp.forward(x);
                return nn::mean(nn::mul(y, y));
            },
            params, 1e-3f);
        CAPTURE(seed);
        CHECK(err < 1e-3f);
    }
}

TEST_CASE("grad_check flags a corrupted gradient rule") {
    nn::Parameter w("w", Tensor::from({3}, {0.7f, -0.4f, 1.1f}, true));
    std::vector<nn::Parameter*> params{&w};
    // square with a deliberately wrong backward: reports 3w instead of 2w
    auto bad_square = [&] {
        auto wn = w.tensor().node();
        std::vector<float> out(wn->value.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = wn->value[i] * wn->value[i];
        Tensor sq = Tensor::from_op(
            w.tensor().shape(), std::move(out), {w.tensor()},
            [wn](nn::TensorNode& self) {
                wn->ensure_grad();
                for (size_t i = 0; i < self.value.size(); ++i) {
                    wn->grad[i] += self.grad[i] * 3.0f * wn->value[i];
                }
            },
            "bad_square");
        return nn::sum(sq);
    };
    float err = nn::grad_check(bad_square, params, 1e-3f);
    CHECK(err > 1e-1f);
}

TEST_CASE("grad_check propagates non-finite evaluations") {
    nn::Parameter w("w", Tensor::from({1}, {0.0f}, true));
    std::vector<nn::Parameter*> params{&w};
    bool was = debug_checks();
    set_debug_checks(false);
    CHECK_THROWS_AS(nn::grad_check([&] { return nn::log(w.tensor()); }, params, 1e-3f),
                    NumericError);
    set_debug_checks(was);
}

TEST_CASE("optimizer zero lr leaves parameters bitwise unchanged") {
    nn::Parameter w("w", Tensor::from({3}, {0.1f, -0.2f, 0.3f}, true));
    std::vector<float> before(w.tensor().value().begin(), w.tensor().value().end());
    Tensor loss = nn::sum(nn::mul(w.tensor(), w.tensor()));
    nn::backward(loss);
    nn::AdamW opt({0.0f, 0.9f, 0.999f, 0.1f, 1e-8f});
    std::vector<nn::Parameter*> params{&w};
    opt.step(params);
    for (size_t i = 0; i < before.size(); ++i) CHECK(w.tensor().value()[i] == before[i]);
}

TEST_CASE("optimizer first step hand value") {
    // w=1, g=1, lr=0.1: bias-corrected moments give a unit step direction
    nn::Parameter w("w", Tensor::from({1}, {1.0f}, true));
    w.tensor().node()->ensure_grad();
    w.tensor().grad_mut()[0] = 1.0f;
    nn::AdamW opt({0.1f, 0.9f, 0.999f, 0.0f, 1e-8f});
    std::vector<nn::Parameter*> params{&w};
    opt.step(params);
    CHECK(w.tensor().value()[0] == doctest::Approx(0.9f).epsilon(1e-6));
}

TEST_CASE("optimizer ignores frozen parameters with stale grads") {
    nn::Parameter w("w", Tensor::from({2}, {1.0f, 2.0f}, true));
    auto node = w.tensor().node();
    w.set_trainable(false);
    node->grad.assign(2, 5.0f);  // stale buffer present even though frozen
    std::vector<float> before(w.tensor().value().begin(), w.tensor().value().end());
    nn::AdamW opt;
    std::vector<nn::Parameter*> params{&w};
    opt.step(params);
    CHECK(w.tensor().value()[0] == before[0]);
    CHECK(w.tensor().value()[1] == before[1]);
}

TEST_CASE("optimizer requires grads on trainable parameters") {
    nn::Parameter w("w", Tensor::from({2}, {1.0f, 2.0f}, true));
    nn::AdamW opt;
    std::vector<nn::Parameter*> params{&w};
    CHECK_THROWS_AS(opt.step(params), ContractError);
}

TEST_CASE("optimizer state persists across steps") {
    // constant unit gradient: two bias-corrected steps walk two step sizes
    nn::Parameter w("w", Tensor::from({1}, {1.0f}, true));
    nn::AdamW opt({0.1f, 0.9f, 0.999f, 0.0f, 1e-8f});
    std::vector<nn::Parameter*> params{&w};
    for (int step = 0; step < 2; ++step) {
        w.tensor().zero_grad();
        w.tensor().node()->ensure_grad();
        w.tensor().grad_mut()[0] = 1.0f;
        opt.step(params);
    }
    CHECK(w.tensor().value()[0] == doctest::Approx(0.8f).epsilon(1e-5));
}

TEST_CASE("freeze isolation: non-trainable buffers bitwise stable over train cycles") {
    TinyMlp mlp(5, 7, 2, 99);
    mlp.model.find("fc1.weight")->set_trainable(false);
    mlp.model.find("fc1.bias")->set_trainable(false);
    std::vector<float> w_before(mlp.model.find("fc1.weight")->tensor().value().begin(),
                                mlp.model.find("fc1.weight")->tensor().value().end());
    nn::AdamW opt({1e-2f, 0.9f, 0.999f, 1e-2f, 1e-8f});
    auto params = mlp.model.parameters();
    for (int step = 0; step < 5; ++step) {
        mlp.model.zero_grad();
        Tensor y = mlp.forward(random_input(3, 5, 1000 + static_cast<uint64_t>(step)));
        nn::backward(nn::mean(nn::mul(y, y)));
        opt.step(params);
    }
    auto w_after = mlp.model.find("fc1.weight")->tensor().value();
    for (size_t i = 0; i < w_before.size(); ++i) CHECK(w_before[i] == w_after[i]);
    CHECK_FALSE(mlp.model.find("fc1.weight")->tensor().has_grad());
}

TEST_CASE("determinism: identical seed and op sequence give identical bits") {
    auto run = [] {
        TinyMlp mlp(6, 9, 4, 777);
        Tensor y = mlp.forward(random_input(5, 6, 778));
        return std::vector<float>(y.value().begin(), y.value().end());
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("elementwise and reduction ops against hand values") {
    Tensor a = Tensor::from({2, 2}, {1, -2, 3, -4});
    Tensor b = Tensor::from({2, 2}, {2, 2, 2, 2});
    CHECK(nn::add(a, b).value()[1] == 0.0f);
    CHECK(nn::sub(a, b).value()[0] == -1.0f);
    CHECK(nn::mul(a, b).value()[2] == 6.0f);
    CHECK(nn::div(a, b).value()[3] == -2.0f);
    CHECK(nn::maximum(a, b).value()[1] == 2.0f);
    CHECK(nn::minimum(a, b).value()[0] == 1.0f);
    CHECK(nn::relu(a).value()[1] == 0.0f);
    CHECK(nn::abs(a).value()[3] == 4.0f);
    CHECK(nn::neg(a).value()[0] == -1.0f);
    CHECK(nn::sum(a).item() == doctest::Approx(-2.0f));
    CHECK(nn::mean(a).item() == doctest::Approx(-0.5f));
    CHECK(nn::sigmoid(Tensor::from({1}, {0.0f})).item() == doctest::Approx(0.5f));
}

TEST_CASE("softmax rows sum to one and match hand case") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 0, 0, 0});
    Tensor s = nn::softmax_rows(x);
    CHECK(s.value()[0] + s.value()[1] + s.value()[2] == doctest::Approx(1.0));
    CHECK(s.value()[3] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("smooth_l1 hand values") {
    CHECK(nn::smooth_l1(Tensor::from({1}, {0.5f}), Tensor::from({1}, {0.0f})).item() ==
          doctest::Approx(0.125f));
    CHECK(nn::smooth_l1(Tensor::from({1}, {2.0f}), Tensor::from({1}, {0.0f})).item() ==
          doctest::Approx(1.5f));
}

TEST_CASE("cross entropy hand value and gradient direction") {
    nn::Parameter logits("l", Tensor::from({1, 2}, {0.0f, 0.0f}, true));
    Tensor ce = nn::cross_entropy_rows(logits.tensor(), {0});
    CHECK(ce.item() == doctest::Approx(std::log(2.0)));
    nn::backward(ce);
    CHECK(logits.tensor().grad()[0] < 0.0f);  // pushing the target logit up
    CHECK(logits.tensor().grad()[1] > 0.0f);
}

TEST_CASE("gradient correctness across composed ops") {
    for (uint64_t seed : {3ull, 5ull, 8ull, 13ull}) {
        Rng rng(seed);
        nn::Parameter a("a", nn::init_gaussian({3, 4}, 0.8f, rng));
        nn::Parameter b("b", nn::init_gaussian({3, 4}, 0.8f, rng));
        nn::Parameter w("w", nn::init_gaussian({4, 3}, 0.8f, rng));
        std::vector<nn::Parameter*> params{&a, &b, &w};
        float err = nn::grad_check(
            [&] {
                Tensor m = nn::maximum(a.tensor(), b.tensor());
                Tensor s = nn::sigmoid(nn::matmul(m, w.tensor()));
                Tensor d = nn::div(s, nn::add_scalar(nn::abs(nn::matmul(b.tensor(), w.tensor())), 1.0f));
                Tensor sm = nn::softmax_rows(d);
                Tensor weighted = nn::mul(sm, nn::slice_cols(nn::minimum(a.tensor(), b.tensor()), 0, 3));
                return nn::add(nn::mean(weighted), nn::smooth_l1(a.tensor(), b.tensor()));
            },
            params, 1e-3f);
        CAPTURE(seed);
        CHECK(err < 1e-3f);
    }
}

TEST_CASE("pool, gather, slice, concat gradients") {
    Rng rng(42);
    nn::Parameter f("f", nn::init_gaussian({6, 5}, 1.0f, rng));
    std::vector<std::vector<nn::Tap>> taps = {
        {{0, 0.25f}, {1, 0.75f}},
        {{4, 0.5f}, {5, 0.5f}, {2, 1.0f}},
    };
    std::vector<nn::Parameter*> params{&f};
    float err = nn::grad_check(
        [&] {
            Tensor pooled = nn::pool_rows(f.tensor(), taps);
            Tensor g = nn::gather_rows(f.tensor(), {1, 3});
            Tensor s = nn::slice_cols(g, 1, 3);
            Tensor c = nn::concat_cols({pooled, s});
            return nn::mean(nn::mul(c, c));
        },
        params, 1e-3f);
    CHECK(err < 1e-3f);
}

TEST_CASE("debug checks flag non-finite op outputs") {
    bool was = debug_checks();
    set_debug_checks(true);
    Tensor z = Tensor::from({1}, {0.0f});
    CHECK_THROWS_AS(nn::div(Tensor::from({1}, {1.0f}), z), NumericError);
    set_debug_checks(false);
    CHECK_NOTHROW(nn::div(Tensor::from({1}, {1.0f}), z));
    // loss boundary still validates
    nn::Parameter w("w", Tensor::from({1}, {1.0f}, true));
    Tensor bad = nn::div(w.tensor(), Tensor::from({1}, {0.0f}));
    CHECK_THROWS_AS(nn::backward(bad), NumericError);
    set_debug_checks(was);
}

TEST_CASE("checkpoint round trip is bit exact") {
    namespace fs = std::filesystem;
    TinyMlp mlp(7, 5, 3, 4711);
    fs::path path = fs::temp_directory_path() / "lodet_test_ckpt.bin";
    nn::save_model(path.string(), mlp.model);

    TinyMlp copy(7, 5, 3, 9999);  // different init, overwritten by load
    nn::load_model(path.string(), copy.model);
    for (const auto* p : mlp.model.parameters()) {
        const auto* q = copy.model.find(p->name());
        REQUIRE(q != nullptr);
        auto a = p->tensor().value();
        auto b = q->tensor().value();
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }

    // container-level round trip preserves raw bits
    nn::Checkpoint ck = nn::read_checkpoint(path.string());
    nn::write_checkpoint(path.string(), ck);
    nn::Checkpoint ck2 = nn::read_checkpoint(path.string());
    REQUIRE(ck.records.size() == ck2.records.size());
    for (size_t r = 0; r < ck.records.size(); ++r) {
        CHECK(ck.records[r].name == ck2.records[r].name);
        CHECK(ck.records[r].shape == ck2.records[r].shape);
        for (size_t i = 0; i < ck.records[r].data.size(); ++i) {
            CHECK(ck.records[r].data[i] == ck2.records[r].data[i]);
        }
    }
    fs::remove(path);
}

TEST_CASE("checkpoint rejects non-finite values and shape mismatches") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "lodet_test_ckpt_bad.bin";
    nn::Checkpoint ck;
    ck.records.push_back({"w", {2}, {1.0f, std::numeric_limits<float>::infinity()}});
    CHECK_THROWS_AS(nn::write_checkpoint(path.string(), ck), NumericError);

    TinyMlp mlp(3, 4, 2, 1);
    nn::save_model(path.string(), mlp.model);
    TinyMlp wrong(4, 4, 2, 1);
    CHECK_THROWS_AS(nn::load_model(path.string(), wrong.model), lodet::Error);
    fs::remove(path);
}
