#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lodet/common.hpp"

namespace lodet::data {

// Interleaved RGB, values in [0, 1].
struct ImageBuffer {
    int width = 0;
    int height = 0;
    std::vector<float> rgb;

    float& at(int x, int y, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    float at(int x, int y, int c) const {
        return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

struct ImageInfo {
    int id = 0;
    int width = 0;
    int height = 0;
    std::string file_name;
    std::shared_ptr<const ImageBuffer> pixels;  // set for in-memory datasets
};

struct Annotation {
    int id = 0;
    int image_id = 0;
    int category_id = 0;
    std::array<float, 4> bbox{};  // x, y, w, h in pixels
};

struct Category {
    int id = 0;
    std::string name;
};

struct DatasetIndex {
    std::vector<ImageInfo> images;
    std::vector<Annotation> annotations;
    std::vector<Category> categories;
    std::string root_dir;  // base for file_name resolution when pixels are not in memory

    const ImageInfo* find_image(int id) const;
    std::vector<const Annotation*> annotations_of(int image_id) const;
    std::vector<int> category_ids() const;
};

// Referential integrity plus bbox validity; IntegrityError names the
// offending annotation.
void validate(const DatasetIndex& ds);

DatasetIndex load_coco_json(const std::string& json_text, const std::string& root_dir = "");
DatasetIndex load_coco_file(const std::string& path);
std::string to_coco_json(const DatasetIndex& ds);
void save_coco_file(const DatasetIndex& ds, const std::string& path);

// Binary PPM (P6), 8-bit.
void write_ppm(const ImageBuffer& img, const std::string& path);
ImageBuffer read_ppm(const std::string& path);

// Resolve pixels for an image: in-memory buffer if present, otherwise the
// referenced PPM file.
ImageBuffer image_pixels(const DatasetIndex& ds, const ImageInfo& info);

// Write all in-memory images as PPM files under dir and the index as
// annotations.json next to them.
void save_dataset(const DatasetIndex& ds, const std::string& dir);

enum class DensityProfile { kSparse, kDense };

struct SynthConfig {
    int n_images = 64;
    int image_size = 64;
    int objects_min = 2;
    int objects_max = 4;
    float scale_min = 0.18f;   // object extent as a fraction of image size
    float scale_max = 0.35f;
    int n_classes = 3;
    float brightness_shift = 0.0f;
    DensityProfile density = DensityProfile::kSparse;
    uint64_t seed = 0;
};

// Deterministic scene generator: one shape family per class on a textured
// background, exact bounding boxes recorded, a global brightness offset as
// the domain-shift knob.
DatasetIndex synth_generate(const SynthConfig& cfg);

struct EpisodeSpec {
    int k = 1;
    uint64_t seed = 0;
    std::vector<int> class_ids;
};

// Seeded greedy episode sampling: walk classes in ascending id, draw images
// containing the class until its image count reaches k. An image counts
// toward every class it contains; all annotations of a selected image are
// kept. CoverageError names any class with fewer than k candidate images.
DatasetIndex sample_k_shot(const DatasetIndex& ds, const EpisodeSpec& spec);

struct SplitResult {
    DatasetIndex train;
    DatasetIndex val;
};

// Seeded image-level split; `fraction` is the validation share. Both sides
// keep all categories when the data allows it.
SplitResult split(const DatasetIndex& ds, float fraction, uint64_t seed);

}  // namespace lodet::data
