#pragma once

#include <cstdint>
#include <vector>

#include "lodet/boxes.hpp"
#include "lodet/data.hpp"
#include "lodet/hungarian.hpp"
#include "lodet/nn.hpp"

namespace lodet::det {

struct DetectorConfig {
    int image_size = 64;
    int patch_size = 8;
    int embed_dim = 64;
    int n_proposals = 50;
    int diffusion_steps = 1000;  // T
    int sampling_steps = 4;
    float signal_scale = 2.0f;
    int n_classes = 3;
    float score_threshold = 0.05f;
    int max_detections = 300;  // evaluation cap carried by the detector output

    int head_hidden = 128;
    int time_embed_dim = 16;
    float lambda_cls = 2.0f;
    float lambda_l1 = 5.0f;
    float lambda_giou = 2.0f;
    float background_weight = 0.2f;   // classification weight of far negatives
    float duplicate_weight = 2.5f;    // weight of unmatched proposals overlapping a gt

    int grid() const { return image_size / patch_size; }
    void validate() const;
};

// Cosine cumulative-alpha schedule; abar(0) == 1 exactly.
class DiffusionSchedule {
public:
    explicit DiffusionSchedule(int steps);
    float abar(int t) const;
    int steps() const { return static_cast<int>(abar_.size()) - 1; }

private:
    std::vector<float> abar_;
};

struct CorruptResult {
    std::vector<BoxCxcywh> noisy;      // clamped back to the valid normalized range
    std::vector<float> signal;         // raw x_t in signal space, n_proposals x 4
    std::vector<BoxCxcywh> padded_x0;  // the padded ground truth the noise was applied to
};

struct DenoiseOut {
    nn::Tensor boxes;   // [N,4] refined normalized cxcywh; w,h floored, otherwise unclamped
    nn::Tensor logits;  // [N, n_classes+1], background last
};

// Diffusion-style detector: trains by denoising noise-corrupted ground-truth
// boxes at a random timestep, infers by deterministically refining boxes
// sampled from noise. The backbone is a patch-embedding MLP over
// non-overlapping patches; the denoising head pools a 2x2 bilinear grid
// inside each box and emits class logits plus box deltas in signal space.
class Detector {
public:
    Detector(DetectorConfig cfg, uint64_t init_seed);

    const DetectorConfig& config() const { return cfg_; }
    const DiffusionSchedule& schedule() const { return schedule_; }
    nn::Model& model() { return model_; }
    const nn::Model& model() const { return model_; }

    // [G*G, embed_dim] feature grid.
    nn::Tensor backbone_forward(const data::ImageBuffer& image);

    CorruptResult corrupt_boxes(const BoxSet& gt, int t, Rng& rng) const;
    CorruptResult corrupt_boxes(const BoxSet& gt, int t, uint64_t seed) const;

    DenoiseOut denoise_step(const nn::Tensor& features, const std::vector<BoxCxcywh>& boxes,
                            int t);

    // Optimal-assignment set loss; with no ground truth this is the mean
    // background cross-entropy.
    nn::Tensor set_loss(const DenoiseOut& pred, const BoxSet& gt) const;

    // One full training forward: corrupt at a uniformly drawn timestep,
    // denoise once, score against gt.
    nn::Tensor training_loss(const data::ImageBuffer& image, const BoxSet& gt, Rng& rng);

    DetectionSet infer(const data::ImageBuffer& image, uint64_t seed);

    // Normalized box coordinates <-> diffusion signal space.
    float to_signal(float v) const { return (v * 2.0f - 1.0f) * cfg_.signal_scale; }
    float from_signal(float s) const { return (s / cfg_.signal_scale + 1.0f) * 0.5f; }

private:
    DetectorConfig cfg_;
    DiffusionSchedule schedule_;
    nn::Model model_;
    nn::Linear* proj_ = nullptr;
    nn::Linear* mlp1_ = nullptr;
    nn::Linear* mlp2_ = nullptr;
    nn::Linear* fc1_ = nullptr;
    nn::Linear* fc2_ = nullptr;
    nn::Linear* cls_ = nullptr;
    nn::Linear* box_ = nullptr;
};

// Ground truth of one image as normalized center-format boxes.
BoxSet gt_boxes(const data::DatasetIndex& ds, const data::ImageInfo& info);

// COCO-results-style dump: [{image_id, category_id, bbox[x,y,w,h] pixels, score}].
std::string detections_to_json(const std::vector<std::pair<int, DetectionSet>>& per_image,
                               int image_size);

}  // namespace lodet::det
