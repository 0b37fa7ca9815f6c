#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "lodet/common.hpp"

namespace lodet::det {

// Normalized center-format box: cx, cy, w, h in [0, 1].
using BoxCxcywh = std::array<float, 4>;
// Corner-format box: x1, y1, x2, y2.
using BoxXyxy = std::array<float, 4>;

inline BoxXyxy to_xyxy(const BoxCxcywh& b) {
    return {b[0] - b[2] * 0.5f, b[1] - b[3] * 0.5f, b[0] + b[2] * 0.5f, b[1] + b[3] * 0.5f};
}

inline BoxCxcywh to_cxcywh(const BoxXyxy& b) {
    return {(b[0] + b[2]) * 0.5f, (b[1] + b[3]) * 0.5f, b[2] - b[0], b[3] - b[1]};
}

// Clamp to the valid normalized range: centers in [0,1], extents in (0,1]
// with a small floor so areas stay positive.
inline constexpr float kMinBoxExtent = 1e-4f;

inline BoxCxcywh clamp_box(const BoxCxcywh& b) {
    auto clamp01 = [](float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); };
    auto clamp_wh = [](float v) {
        return v < kMinBoxExtent ? kMinBoxExtent : (v > 1.0f ? 1.0f : v);
    };
    return {clamp01(b[0]), clamp01(b[1]), clamp_wh(b[2]), clamp_wh(b[3])};
}

// Per-image ground truth or (with scores) predictions.
struct BoxSet {
    std::vector<BoxCxcywh> boxes;
    std::vector<int> classes;
    std::vector<float> scores;  // empty on ground truth; sorted descending on predictions

    size_t size() const { return boxes.size(); }
    bool empty() const { return boxes.empty(); }
};

struct Detection {
    BoxCxcywh box;
    int class_id = 0;
    float score = 0.0f;
};

// Prediction list for one image, sorted by descending score.
using DetectionSet = std::vector<Detection>;

}  // namespace lodet::det
