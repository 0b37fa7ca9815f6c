#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lodet/detector.hpp"
#include "lodet/optim.hpp"

using namespace lodet;
using namespace lodet::det;
using nn::Tensor;

namespace {

DetectorConfig tiny_config() {
    DetectorConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.embed_dim = 16;
    cfg.n_proposals = 3;
    cfg.n_classes = 2;
    cfg.head_hidden = 32;
    return cfg;
}

data::ImageBuffer random_image(int size, uint64_t seed) {
    Rng rng(seed);
    data::ImageBuffer img;
    img.width = size;
    img.height = size;
    img.rgb.resize(static_cast<size_t>(size) * size * 3);
    for (auto& v : img.rgb) v = static_cast<float>(rng.uniform());
    return img;
}

// Exhaustive minimum over all injective row->column assignments.
double brute_force_assignment(const std::vector<float>& cost, int n, int m) {
    bool transposed = n > m;
    int rn = transposed ? m : n;
    int rm = transposed ? n : m;
    auto at = [&](int r, int c) {
        return transposed ? cost[static_cast<size_t>(c) * m + r]
                          : cost[static_cast<size_t>(r) * m + c];
    };
    std::vector<int> cols(static_cast<size_t>(rm));
    std::iota(cols.begin(), cols.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double total = 0.0;
        for (int r = 0; r < rn; ++r) total += at(r, cols[static_cast<size_t>(r)]);
        best = std::min(best, total);
    } while (std::next_permutation(cols.begin(), cols.end()));
    return best;
}

double assignment_cost(const std::vector<std::pair<int, int>>& pairs,
                       const std::vector<float>& cost, int m) {
    double total = 0.0;
    for (auto [r, c] : pairs) total += cost[static_cast<size_t>(r) * m + c];
    return total;
}

}  // namespace

TEST_CASE("hungarian permutation case with zero optimum") {
    // zeros on the diagonal, ones elsewhere
    std::vector<float> cost(9, 1.0f);
    cost[0] = cost[4] = cost[8] = 0.0f;
    auto pairs = hungarian_match(cost, 3, 3);
    REQUIRE(pairs.size() == 3);
    CHECK(assignment_cost(pairs, cost, 3) == doctest::Approx(0.0));
}

TEST_CASE("hungarian singleton") {
    auto pairs = hungarian_match({7.0f}, 1, 1);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0] == std::pair{0, 0});
}

TEST_CASE("hungarian empty input") {
    CHECK(hungarian_match({}, 0, 0).empty());
    CHECK(hungarian_match({}, 0, 5).empty());
}

TEST_CASE("hungarian rejects non-finite costs") {
    std::vector<float> cost = {1.0f, std::numeric_limits<float>::infinity(), 0.0f, 1.0f};
    CHECK_THROWS_AS(hungarian_match(cost, 2, 2), NumericError);
}

TEST_CASE("hungarian 5x5 equals exhaustive permutation minimum") {
    Rng rng(13);
    std::vector<float> cost(25);
    for (auto& v : cost) v = static_cast<float>(rng.uniform(0.0, 10.0));
    auto pairs = hungarian_match(cost, 5, 5);
    REQUIRE(pairs.size() == 5);
    CHECK(assignment_cost(pairs, cost, 5) ==
          doctest::Approx(brute_force_assignment(cost, 5, 5)).epsilon(1e-9));
}

TEST_CASE("hungarian optimality on random rectangular matrices up to 6x6") {
    Rng rng(99);
    for (int trial = 0; trial < 300; ++trial) {
        int n = 1 + static_cast<int>(rng.uniform() * 6.0);
        int m = 1 + static_cast<int>(rng.uniform() * 6.0);
        std::vector<float> cost(static_cast<size_t>(n) * m);
        for (auto& v : cost) v = static_cast<float>(rng.uniform(-5.0, 5.0));
        auto pairs = hungarian_match(cost, n, m);
        REQUIRE(static_cast<int>(pairs.size()) == std::min(n, m));
        // injectivity both ways
        std::vector<int> rs, cs;
        for (auto [r, c] : pairs) {
            rs.push_back(r);
            cs.push_back(c);
        }
        std::sort(rs.begin(), rs.end());
        std::sort(cs.begin(), cs.end());
        CHECK(std::adjacent_find(rs.begin(), rs.end()) == rs.end());
        CHECK(std::adjacent_find(cs.begin(), cs.end()) == cs.end());
        CHECK(assignment_cost(pairs, cost, m) ==
              doctest::Approx(brute_force_assignment(cost, n, m)).epsilon(1e-6));
    }
}

TEST_CASE("cosine schedule endpoints") {
    DiffusionSchedule sched(1000);
    CHECK(sched.abar(0) == 1.0f);
    CHECK(sched.abar(1000) < 1e-4f);
    CHECK(sched.abar(500) > 0.0f);
    CHECK(sched.abar(500) < 1.0f);
    CHECK_THROWS_AS(sched.abar(1001), ContractError);
    CHECK_THROWS_AS(sched.abar(-1), ContractError);
}

TEST_CASE("corrupt_boxes at t=0 recovers the padded ground truth") {
    DetectorConfig cfg = tiny_config();
    cfg.n_proposals = 8;
    Detector model(cfg, 1);
    BoxSet gt;
    gt.boxes = {{0.3f, 0.4f, 0.2f, 0.25f}, {0.7f, 0.6f, 0.15f, 0.1f}};
    gt.classes = {1, 2};
    CorruptResult res = model.corrupt_boxes(gt, 0, 77ull);
    REQUIRE(res.noisy.size() == 8);
    REQUIRE(res.padded_x0.size() == 8);
    for (size_t i = 0; i < res.noisy.size(); ++i) {
        for (int c = 0; c < 4; ++c) {
            CHECK(std::fabs(res.noisy[i][static_cast<size_t>(c)] -
                            res.padded_x0[i][static_cast<size_t>(c)]) <= 1e-6f);
        }
    }
    // cyclic repeats fill at least half the slots
    CHECK(res.padded_x0[0] == gt.boxes[0]);
    CHECK(res.padded_x0[1] == gt.boxes[1]);
    CHECK(res.padded_x0[2] == gt.boxes[0]);
    CHECK(res.padded_x0[3] == gt.boxes[1]);
}

TEST_CASE("corrupt_boxes at t=T produces standard normal signal marginals") {
    DetectorConfig cfg = tiny_config();
    cfg.n_proposals = 50;
    Detector model(cfg, 1);
    BoxSet gt;
    gt.boxes = {{0.5f, 0.5f, 0.3f, 0.3f}};
    gt.classes = {1};
    double sum = 0.0, sq = 0.0;
    int count = 0;
    for (int rep = 0; rep < 60; ++rep) {
        CorruptResult res = model.corrupt_boxes(gt, cfg.diffusion_steps, 1000ull + rep);
        for (float v : res.signal) {
            sum += v;
            sq += static_cast<double>(v) * v;
            count += 1;
        }
    }
    REQUIRE(count >= 10000);
    double mean = sum / count;
    double stddev = std::sqrt(sq / count - mean * mean);
    CHECK(std::fabs(mean) < 0.05);
    CHECK(std::fabs(stddev - 1.0) < 0.05);
}

TEST_CASE("corrupt_boxes determinism and contract checks") {
    Detector model(tiny_config(), 1);
    BoxSet gt;
    gt.boxes = {{0.4f, 0.4f, 0.2f, 0.2f}};
    gt.classes = {1};
    auto a = model.corrupt_boxes(gt, 500, 42ull);
    auto b = model.corrupt_boxes(gt, 500, 42ull);
    CHECK(a.signal == b.signal);
    auto c = model.corrupt_boxes(gt, 500, 43ull);
    CHECK(a.signal != c.signal);

    CHECK_THROWS_AS(model.corrupt_boxes(gt, -1, 1ull), ContractError);
    CHECK_THROWS_AS(model.corrupt_boxes(gt, 1001, 1ull), ContractError);
    BoxSet empty;
    CHECK_THROWS_AS(model.corrupt_boxes(empty, 10, 1ull), ContractError);
    // outputs are valid boxes
    for (const auto& box : a.noisy) {
        CHECK(box[0] >= 0.0f);
        CHECK(box[0] <= 1.0f);
        CHECK(box[2] >= kMinBoxExtent);
        CHECK(box[2] <= 1.0f);
    }
}

TEST_CASE("backbone produces the expected grid and passes grad check") {
    DetectorConfig cfg = tiny_config();
    Detector model(cfg, 5);
    data::ImageBuffer img = random_image(cfg.image_size, 6);
    Tensor f = model.backbone_forward(img);
    CHECK(f.shape() == Shape{16, 16});  // 4x4 grid, embed 16

    data::ImageBuffer wrong = random_image(16, 6);
    CHECK_THROWS_AS(model.backbone_forward(wrong), ShapeError);

    auto params = model.model().parameters();
    std::vector<nn::Parameter*> backbone_params;
    for (auto* p : params) {
        if (p->name().rfind("backbone.", 0) == 0) backbone_params.push_back(p);
    }
    float err = nn::grad_check(
        [&] {
            Tensor y = model.backbone_forward(img);
            return nn::mean(nn::mul(y, y));
        },
        backbone_params, 1e-3f);
    CHECK(err < 1e-3f);
}

TEST_CASE("zeroed backbone maps any image to zero features") {
    DetectorConfig cfg = tiny_config();
    Detector model(cfg, 7);
    for (auto* p : model.model().parameters()) {
        if (p->name().rfind("backbone.", 0) == 0) {
            std::fill(p->tensor().value_mut().begin(), p->tensor().value_mut().end(), 0.0f);
        }
    }
    Tensor f = model.backbone_forward(random_image(cfg.image_size, 8));
    for (float v : f.value()) CHECK(v == 0.0f);
}

TEST_CASE("denoise_step output shapes and zero-head identity") {
    DetectorConfig cfg = tiny_config();
    cfg.n_proposals = 5;
    Detector model(cfg, 9);
    data::ImageBuffer img = random_image(cfg.image_size, 10);
    Tensor features = model.backbone_forward(img);
    std::vector<BoxCxcywh> boxes = {{0.2f, 0.3f, 0.2f, 0.2f},
                                    {0.6f, 0.7f, 0.3f, 0.25f},
                                    {0.5f, 0.5f, 0.4f, 0.4f},
                                    {0.8f, 0.2f, 0.1f, 0.15f},
                                    {0.35f, 0.65f, 0.22f, 0.18f}};
    DenoiseOut out = model.denoise_step(features, boxes, 400);
    CHECK(out.boxes.shape() == Shape{5, 4});
    CHECK(out.logits.shape() == Shape{5, 3});  // 2 classes + background

    // the box head is zero-initialized: deltas vanish, boxes come back unchanged
    for (size_t i = 0; i < boxes.size(); ++i) {
        for (int c = 0; c < 4; ++c) {
            CHECK(std::fabs(out.boxes.value()[i * 4 + static_cast<size_t>(c)] -
                            boxes[i][static_cast<size_t>(c)]) < 1e-6f);
        }
    }
}

TEST_CASE("denoise_step gradients through pooling and head") {
    DetectorConfig cfg = tiny_config();
    Detector model(cfg, 11);
    data::ImageBuffer img = random_image(cfg.image_size, 12);
    std::vector<BoxCxcywh> boxes = {{0.3f, 0.3f, 0.25f, 0.25f},
                                    {0.65f, 0.55f, 0.3f, 0.2f},
                                    {0.5f, 0.75f, 0.2f, 0.3f}};
    auto params = model.model().parameters();
    float err = nn::grad_check(
        [&] {
            Tensor features = model.backbone_forward(img);
            DenoiseOut out = model.denoise_step(features, boxes, 300);
            return nn::add(nn::mean(nn::mul(out.boxes, out.boxes)),
                           nn::mean(nn::mul(out.logits, out.logits)));
        },
        params, 1e-3f);
    CHECK(err < 1e-3f);
}

TEST_CASE("set_loss on a constructed perfect prediction is near zero") {
    DetectorConfig cfg = tiny_config();
    cfg.n_proposals = 2;
    Detector model(cfg, 13);
    BoxSet gt;
    gt.boxes = {{0.3f, 0.4f, 0.2f, 0.2f}, {0.7f, 0.6f, 0.25f, 0.3f}};
    gt.classes = {1, 2};

    DenoiseOut pred;
    pred.boxes = Tensor::from({2, 4}, {0.3f, 0.4f, 0.2f, 0.2f, 0.7f, 0.6f, 0.25f, 0.3f});
    pred.logits = Tensor::from({2, 3}, {20.0f, 0.0f, 0.0f, 0.0f, 20.0f, 0.0f});
    Tensor loss = model.set_loss(pred, gt);
    CHECK(loss.item() < 0.01f);
}

TEST_CASE("set_loss with empty ground truth is the mean background cross entropy") {
    DetectorConfig cfg = tiny_config();
    cfg.n_proposals = 4;
    Detector model(cfg, 14);
    BoxSet empty;
    Rng rng(15);
    std::vector<float> logits(4 * 3);
    for (auto& v : logits) v = static_cast<float>(rng.normal());
    DenoiseOut pred;
    pred.boxes = Tensor::from({4, 4}, std::vector<float>(16, 0.4f));
    pred.logits = Tensor::from({4, 3}, logits);
    Tensor loss = model.set_loss(pred, empty);
    Tensor expect = nn::cross_entropy_rows(pred.logits, {2, 2, 2, 2});
    CHECK(loss.item() == expect.item());
}

TEST_CASE("set_loss rejects more ground truth than proposals") {
    DetectorConfig cfg = tiny_config();
    cfg.n_proposals = 1;
    Detector model(cfg, 16);
    BoxSet gt;
    gt.boxes = {{0.3f, 0.3f, 0.2f, 0.2f}, {0.6f, 0.6f, 0.2f, 0.2f}};
    gt.classes = {1, 1};
    DenoiseOut pred;
    pred.boxes = Tensor::from({1, 4}, {0.5f, 0.5f, 0.2f, 0.2f});
    pred.logits = Tensor::from({1, 3}, {0.0f, 0.0f, 0.0f});
    CHECK_THROWS_AS(model.set_loss(pred, gt), ContractError);
}

TEST_CASE("full training loss passes grad check on a tiny instance") {
    DetectorConfig cfg = tiny_config();  // 3 proposals
    Detector model(cfg, 17);
    data::ImageBuffer img = random_image(cfg.image_size, 18);
    BoxSet gt;
    gt.boxes = {{0.35f, 0.4f, 0.3f, 0.25f}, {0.7f, 0.65f, 0.2f, 0.2f}};
    gt.classes = {1, 2};
    CorruptResult cor = model.corrupt_boxes(gt, 250, 19ull);
    auto params = model.model().parameters();
    float err = nn::grad_check(
        [&] {
            Tensor features = model.backbone_forward(img);
            DenoiseOut out = model.denoise_step(features, cor.noisy, 250);
            return model.set_loss(out, gt);
        },
        params, 1e-3f);
    CHECK(err < 1e-3f);
}

TEST_CASE("inference respects the detection cap at the 300 boundary") {
    DetectorConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.embed_dim = 16;
    cfg.head_hidden = 32;
    cfg.n_classes = 3;
    cfg.n_proposals = 150;  // untrained scores are diffuse: up to 450 candidates
    cfg.score_threshold = 0.05f;
    Detector model(cfg, 20);
    data::ImageBuffer img = random_image(cfg.image_size, 21);
    DetectionSet dets = model.infer(img, 22);
    CHECK(dets.size() <= 300);
    CHECK(dets.size() > 0);

    // scores sorted descending, boxes clamped valid
    for (size_t i = 0; i < dets.size(); ++i) {
        if (i > 0) CHECK(dets[i].score <= dets[i - 1].score);
        CHECK(dets[i].box[0] >= 0.0f);
        CHECK(dets[i].box[0] <= 1.0f);
        CHECK(dets[i].box[1] >= 0.0f);
        CHECK(dets[i].box[1] <= 1.0f);
        CHECK(dets[i].box[2] >= kMinBoxExtent);
        CHECK(dets[i].box[2] <= 1.0f);
        CHECK(dets[i].box[3] >= kMinBoxExtent);
        CHECK(dets[i].box[3] <= 1.0f);
        CHECK(dets[i].class_id >= 1);
        CHECK(dets[i].class_id <= 3);
    }
}

TEST_CASE("inference is bitwise deterministic in weights and seed") {
    DetectorConfig cfg = tiny_config();
    cfg.n_proposals = 10;
    Detector model(cfg, 23);
    data::ImageBuffer img = random_image(cfg.image_size, 24);
    DetectionSet a = model.infer(img, 25);
    DetectionSet b = model.infer(img, 25);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].box == b[i].box);
        CHECK(a[i].class_id == b[i].class_id);
        CHECK(a[i].score == b[i].score);
    }
    DetectionSet c = model.infer(img, 26);
    bool identical = a.size() == c.size();
    if (identical) {
        for (size_t i = 0; i < a.size(); ++i) identical = identical && a[i].box == c[i].box;
    }
    CHECK_FALSE(identical);
}

TEST_CASE("gt_boxes converts pixel annotations to normalized centers") {
    data::SynthConfig scfg;
    scfg.n_images = 2;
    scfg.image_size = 64;
    scfg.seed = 5;
    data::DatasetIndex ds = data::synth_generate(scfg);
    BoxSet gt = gt_boxes(ds, ds.images[0]);
    REQUIRE(gt.size() == ds.annotations_of(ds.images[0].id).size());
    for (size_t i = 0; i < gt.size(); ++i) {
        CHECK(gt.boxes[i][0] > 0.0f);
        CHECK(gt.boxes[i][0] < 1.0f);
        CHECK(gt.boxes[i][2] > 0.0f);
        CHECK(gt.boxes[i][2] <= 0.5f);
        CHECK(gt.classes[i] >= 1);
    }
}

TEST_CASE("detection dump is valid COCO-results JSON") {
    DetectionSet dets = {{{0.5f, 0.5f, 0.25f, 0.25f}, 2, 0.9f}};
    std::string json = detections_to_json({{42, dets}}, 64);
    CHECK(json.find("\"image_id\": 42") != std::string::npos);
    CHECK(json.find("\"category_id\": 2") != std::string::npos);
    // cx 0.5, w 0.25 at 64px: x = (0.5 - 0.125) * 64 = 24, w = 16
    CHECK(json.find("24.0") != std::string::npos);
    CHECK(json.find("16.0") != std::string::npos);
}

TEST_CASE("single image overfit halves the loss well below its start") {
    DetectorConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.embed_dim = 32;
    cfg.head_hidden = 64;
    cfg.n_proposals = 12;
    cfg.n_classes = 2;
    Detector model(cfg, 31);

    data::SynthConfig scfg;
    scfg.n_images = 1;
    scfg.image_size = 32;
    scfg.objects_min = 2;
    scfg.objects_max = 2;
    scfg.scale_min = 0.25f;
    scfg.scale_max = 0.45f;
    scfg.n_classes = 2;
    scfg.seed = 321;
    data::DatasetIndex ds = data::synth_generate(scfg);
    data::ImageBuffer img = data::image_pixels(ds, ds.images[0]);
    BoxSet gt = gt_boxes(ds, ds.images[0]);
    REQUIRE(gt.size() == 2);

    nn::AdamW opt({3e-4f, 0.9f, 0.999f, 0.0f, 1e-8f});
    auto params = model.model().parameters();
    Rng rng(32);
    double initial = 0.0;
    double final_loss = 0.0;
    for (int step = 0; step < 500; ++step) {
        model.model().zero_grad();
        Tensor loss = model.training_loss(img, gt, rng);
        if (step == 0) initial = loss.item();
        final_loss = loss.item();
        nn::backward(loss);
        opt.step(params);
    }
    CAPTURE(initial);
    CAPTURE(final_loss);
    CHECK(final_loss < 0.2 * initial);
}
