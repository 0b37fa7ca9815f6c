#include "lodet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace lodet::data {

const ImageInfo* DatasetIndex::find_image(int id) const {
    for (const auto& im : images)
        if (im.id == id) return &im;
    return nullptr;
}

std::vector<const Annotation*> DatasetIndex::annotations_of(int image_id) const {
    std::vector<const Annotation*> out;
    for (const auto& a : annotations)
        if (a.image_id == image_id) out.push_back(&a);
    return out;
}

std::vector<int> DatasetIndex::category_ids() const {
    std::vector<int> out;
    for (const auto& c : categories) out.push_back(c.id);
    std::sort(out.begin(), out.end());
    return out;
}

void validate(const DatasetIndex& ds) {
    std::set<int> image_ids, category_ids, ann_ids;
    for (const auto& im : ds.images) {
        if (!image_ids.insert(im.id).second) {
            throw IntegrityError("duplicate image id " + std::to_string(im.id));
        }
        if (im.width <= 0 || im.height <= 0) {
            throw IntegrityError("image " + std::to_string(im.id) + " has invalid dimensions");
        }
    }
    for (const auto& c : ds.categories) {
        if (!category_ids.insert(c.id).second) {
            throw IntegrityError("duplicate category id " + std::to_string(c.id));
        }
    }
    for (const auto& a : ds.annotations) {
        if (!ann_ids.insert(a.id).second) {
            throw IntegrityError("duplicate annotation id " + std::to_string(a.id));
        }
        if (!image_ids.count(a.image_id)) {
            throw IntegrityError("annotation " + std::to_string(a.id) +
                                 " references missing image_id " + std::to_string(a.image_id));
        }
        if (!category_ids.count(a.category_id)) {
            throw IntegrityError("annotation " + std::to_string(a.id) +
                                 " references missing category_id " + std::to_string(a.category_id));
        }
        const ImageInfo* im = ds.find_image(a.image_id);
        float x = a.bbox[0], y = a.bbox[1], w = a.bbox[2], h = a.bbox[3];
        if (w <= 0.0f || h <= 0.0f || x < 0.0f || y < 0.0f ||
            x + w > static_cast<float>(im->width) + 1e-3f ||
            y + h > static_cast<float>(im->height) + 1e-3f) {
            throw IntegrityError("annotation " + std::to_string(a.id) +
                                 " bbox outside image bounds");
        }
    }
}

DatasetIndex load_coco_json(const std::string& json_text, const std::string& root_dir) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError("COCO JSON parse error at byte " + std::to_string(e.byte) + ": " +
                         e.what());
    }
    if (!doc.is_object() || !doc.contains("images") || !doc.contains("annotations") ||
        !doc.contains("categories")) {
        throw ParseError("COCO JSON must contain images/annotations/categories arrays");
    }
    DatasetIndex ds;
    ds.root_dir = root_dir;
    try {
        for (const auto& j : doc["images"]) {
            ImageInfo im;
            im.id = j.at("id").get<int>();
            im.width = j.at("width").get<int>();
            im.height = j.at("height").get<int>();
            im.file_name = j.value("file_name", "");
            ds.images.push_back(std::move(im));
        }
        for (const auto& j : doc["annotations"]) {
            Annotation a;
            a.id = j.at("id").get<int>();
            a.image_id = j.at("image_id").get<int>();
            a.category_id = j.at("category_id").get<int>();
            auto bb = j.at("bbox");
            if (!bb.is_array() || bb.size() != 4) {
                throw ParseError("annotation " + std::to_string(a.id) + " bbox must have 4 values");
            }
            for (int i = 0; i < 4; ++i) a.bbox[static_cast<size_t>(i)] = bb[static_cast<size_t>(i)].get<float>();
            ds.annotations.push_back(a);
        }
        for (const auto& j : doc["categories"]) {
            Category c;
            c.id = j.at("id").get<int>();
            c.name = j.value("name", "");
            ds.categories.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("COCO JSON field error: ") + e.what());
    }
    validate(ds);
    return ds;
}

DatasetIndex load_coco_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return load_coco_json(ss.str(), fs::path(path).parent_path().string());
}

std::string to_coco_json(const DatasetIndex& ds) {
    json doc;
    doc["images"] = json::array();
    for (const auto& im : ds.images) {
        doc["images"].push_back(
            {{"id", im.id}, {"width", im.width}, {"height", im.height}, {"file_name", im.file_name}});
    }
    doc["annotations"] = json::array();
    for (const auto& a : ds.annotations) {
        doc["annotations"].push_back({{"id", a.id},
                                      {"image_id", a.image_id},
                                      {"category_id", a.category_id},
                                      {"bbox", {a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]}},
                                      {"area", a.bbox[2] * a.bbox[3]},
                                      {"iscrowd", 0}});
    }
    doc["categories"] = json::array();
    for (const auto& c : ds.categories) {
        doc["categories"].push_back({{"id", c.id}, {"name", c.name}});
    }
    return doc.dump(2);
}

void save_coco_file(const DatasetIndex& ds, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << to_coco_json(ds);
}

void write_ppm(const ImageBuffer& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                float v = img.at(x, y, c);
                v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        }
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

ImageBuffer read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw ParseError(path + ": not a P6 PPM file");
    int w = 0, h = 0, maxval = 0;
    is >> w >> h >> maxval;
    if (w <= 0 || h <= 0 || maxval != 255) throw ParseError(path + ": unsupported PPM header");
    is.get();  // single whitespace after header
    ImageBuffer img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<size_t>(w) * h * 3);
    std::vector<unsigned char> raw(img.rgb.size());
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw ParseError(path + ": truncated PPM payload");
    for (size_t i = 0; i < raw.size(); ++i) img.rgb[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

ImageBuffer image_pixels(const DatasetIndex& ds, const ImageInfo& info) {
    if (info.pixels) return *info.pixels;
    if (info.file_name.empty()) {
        throw IoError("image " + std::to_string(info.id) + " has neither pixels nor a file");
    }
    fs::path p = ds.root_dir.empty() ? fs::path(info.file_name)
                                     : fs::path(ds.root_dir) / info.file_name;
    return read_ppm(p.string());
}

void save_dataset(const DatasetIndex& ds, const std::string& dir) {
    fs::create_directories(dir);
    DatasetIndex meta = ds;
    for (auto& im : meta.images) {
        if (im.pixels) {
            if (im.file_name.empty()) im.file_name = "img_" + std::to_string(im.id) + ".ppm";
            write_ppm(*im.pixels, (fs::path(dir) / im.file_name).string());
        }
    }
    save_coco_file(meta, (fs::path(dir) / "annotations.json").string());
}

namespace {

struct ShapeSpec {
    int kind;  // 0 rectangle, 1 disk, 2 triangle, 3 diamond, 4 ring, 5 cross
    float r, g, b;
};

// One shape family and base color per class id (1-based), cycling past six.
ShapeSpec class_shape(int class_id) {
    static const ShapeSpec table[] = {
        {0, 0.64f, 0.18f, 0.14f},  // rectangles, brick red
        {1, 0.14f, 0.58f, 0.20f},  // disks, green
        {2, 0.16f, 0.24f, 0.62f},  // triangles, blue
        {3, 0.60f, 0.55f, 0.12f},  // diamonds, ochre
        {4, 0.50f, 0.16f, 0.55f},  // rings, violet
        {5, 0.12f, 0.55f, 0.55f},  // crosses, teal
    };
    return table[(class_id - 1) % 6];
}

bool inside_shape(int kind, float u, float v) {
    // u, v in [-1, 1] relative to the bbox center
    switch (kind) {
        case 0: return true;
        case 1: return u * u + v * v <= 1.0f;
        case 2: return v >= -1.0f && std::fabs(u) <= (1.0f - (v + 1.0f) * 0.5f);
        case 3: return std::fabs(u) + std::fabs(v) <= 1.0f;
        case 4: {
            float d = u * u + v * v;
            return d <= 1.0f && d >= 0.25f;
        }
        default: return std::fabs(u) <= 0.34f || std::fabs(v) <= 0.34f;
    }
}

float rect_overlap(const std::array<float, 4>& a, const std::array<float, 4>& b) {
    float ix = std::max(0.0f, std::min(a[0] + a[2], b[0] + b[2]) - std::max(a[0], b[0]));
    float iy = std::max(0.0f, std::min(a[1] + a[3], b[1] + b[3]) - std::max(a[1], b[1]));
    float inter = ix * iy;
    float uni = a[2] * a[3] + b[2] * b[3] - inter;
    return uni > 0.0f ? inter / uni : 0.0f;
}

}  // namespace

DatasetIndex synth_generate(const SynthConfig& cfg) {
    if (cfg.scale_min <= 0.0f || cfg.scale_max > 0.5f || cfg.scale_min > cfg.scale_max) {
        throw ConfigError("synth_generate: object_scale range must lie in (0, 0.5] with min <= max");
    }
    if (cfg.objects_min < 1 || cfg.objects_min > cfg.objects_max) {
        throw ConfigError("synth_generate: objects_per_image range invalid");
    }
    Rng rng(cfg.seed);
    DatasetIndex ds;
    for (int c = 1; c <= cfg.n_classes; ++c) {
        static const char* names[] = {"rectangle", "disk", "triangle", "diamond", "ring", "cross"};
        std::string name = names[(c - 1) % 6];
        if (c > 6) name += "_" + std::to_string(c);
        ds.categories.push_back({c, name});
    }

    int ann_id = 1;
    const int size = cfg.image_size;
    for (int idx = 0; idx < cfg.n_images; ++idx) {
        auto img = std::make_shared<ImageBuffer>();
        img->width = size;
        img->height = size;
        img->rgb.resize(static_cast<size_t>(size) * size * 3);

        // Textured background: base tone, a gentle diagonal gradient, pixel noise.
        float base = static_cast<float>(rng.uniform(0.16, 0.24));
        float gx = static_cast<float>(rng.uniform(-0.05, 0.05));
        float gy = static_cast<float>(rng.uniform(-0.05, 0.05));
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                float t = base + gx * (static_cast<float>(x) / size - 0.5f) +
                          gy * (static_cast<float>(y) / size - 0.5f);
                for (int c = 0; c < 3; ++c) {
                    float n = static_cast<float>(rng.uniform(-0.04, 0.04));
                    img->at(x, y, c) = t + n;
                }
            }
        }

        int n_obj = rng.uniform_int(cfg.objects_min, cfg.objects_max);
        float cluster_x = static_cast<float>(rng.uniform(0.25, 0.75));
        float cluster_y = static_cast<float>(rng.uniform(0.25, 0.75));
        std::vector<std::array<float, 4>> placed;
        for (int ob = 0; ob < n_obj; ++ob) {
            int class_id = rng.uniform_int(1, cfg.n_classes);
            ShapeSpec spec = class_shape(class_id);
            float w = static_cast<float>(rng.uniform(cfg.scale_min, cfg.scale_max)) * size;
            float aspect = static_cast<float>(rng.uniform(0.75, 1.3333));
            float h = std::min(w * aspect, cfg.scale_max * size);
            w = std::max(w, 3.0f);
            h = std::max(h, 3.0f);

            std::array<float, 4> bbox{};
            float max_overlap = cfg.density == DensityProfile::kSparse ? 0.15f : 0.5f;
            bool ok = false;
            for (int attempt = 0; attempt < 24 && !ok; ++attempt) {
                float x0, y0;
                if (cfg.density == DensityProfile::kDense) {
                    x0 = cluster_x * size + static_cast<float>(rng.normal(0.0, 0.22)) * size - w / 2;
                    y0 = cluster_y * size + static_cast<float>(rng.normal(0.0, 0.22)) * size - h / 2;
                } else {
                    x0 = static_cast<float>(rng.uniform(0.0, size - w));
                    y0 = static_cast<float>(rng.uniform(0.0, size - h));
                }
                x0 = std::clamp(x0, 0.0f, static_cast<float>(size) - w);
                y0 = std::clamp(y0, 0.0f, static_cast<float>(size) - h);
                bbox = {x0, y0, w, h};
                ok = true;
                for (const auto& p : placed) {
                    if (rect_overlap(bbox, p) > max_overlap) {
                        ok = false;
                        break;
                    }
                }
            }
            placed.push_back(bbox);

            float jr = static_cast<float>(rng.uniform(-0.02, 0.02));
            int px0 = static_cast<int>(std::floor(bbox[0]));
            int py0 = static_cast<int>(std::floor(bbox[1]));
            int px1 = static_cast<int>(std::ceil(bbox[0] + bbox[2]));
            int py1 = static_cast<int>(std::ceil(bbox[1] + bbox[3]));
            float cx = bbox[0] + bbox[2] / 2, cy = bbox[1] + bbox[3] / 2;
            for (int y = std::max(0, py0); y < std::min(size, py1); ++y) {
                for (int x = std::max(0, px0); x < std::min(size, px1); ++x) {
                    float u = (static_cast<float>(x) + 0.5f - cx) / (bbox[2] / 2);
                    float v = (static_cast<float>(y) + 0.5f - cy) / (bbox[3] / 2);
                    if (std::fabs(u) <= 1.0f && std::fabs(v) <= 1.0f &&
                        inside_shape(spec.kind, u, v)) {
                        img->at(x, y, 0) = spec.r + jr;
                        img->at(x, y, 1) = spec.g + jr;
                        img->at(x, y, 2) = spec.b + jr;
                    }
                }
            }

            Annotation a;
            a.id = ann_id++;
            a.image_id = idx + 1;
            a.category_id = class_id;
            a.bbox = bbox;
            ds.annotations.push_back(a);
        }

        if (cfg.brightness_shift != 0.0f) {
            for (auto& v : img->rgb) v = std::clamp(v + cfg.brightness_shift, 0.0f, 1.0f);
        }

        ImageInfo info;
        info.id = idx + 1;
        info.width = size;
        info.height = size;
        info.file_name = "synth_" + std::to_string(idx + 1) + ".ppm";
        info.pixels = std::move(img);
        ds.images.push_back(std::move(info));
    }
    validate(ds);
    return ds;
}

namespace {

DatasetIndex subset_by_images(const DatasetIndex& ds, const std::vector<int>& image_ids) {
    std::set<int> keep(image_ids.begin(), image_ids.end());
    DatasetIndex out;
    out.categories = ds.categories;
    out.root_dir = ds.root_dir;
    for (const auto& im : ds.images) {
        if (keep.count(im.id)) out.images.push_back(im);
    }
    for (const auto& a : ds.annotations) {
        if (keep.count(a.image_id)) out.annotations.push_back(a);
    }
    return out;
}

std::map<int, std::vector<int>> images_per_class(const DatasetIndex& ds) {
    std::map<int, std::set<int>> tmp;
    for (const auto& a : ds.annotations) tmp[a.category_id].insert(a.image_id);
    std::map<int, std::vector<int>> out;
    for (auto& [cid, ids] : tmp) out[cid] = std::vector<int>(ids.begin(), ids.end());
    return out;
}

std::set<int> classes_of_image(const DatasetIndex& ds, int image_id) {
    std::set<int> out;
    for (const auto& a : ds.annotations)
        if (a.image_id == image_id) out.insert(a.category_id);
    return out;
}

}  // namespace

DatasetIndex sample_k_shot(const DatasetIndex& ds, const EpisodeSpec& spec) {
    if (spec.k < 1) throw ContractError("sample_k_shot: k must be >= 1");
    if (spec.class_ids.empty()) throw ContractError("sample_k_shot: class_ids must be non-empty");
    auto by_class = images_per_class(ds);
    std::vector<int> classes = spec.class_ids;
    std::sort(classes.begin(), classes.end());
    for (int cid : classes) {
        auto it = by_class.find(cid);
        int have = it == by_class.end() ? 0 : static_cast<int>(it->second.size());
        if (have < spec.k) {
            throw CoverageError("class " + std::to_string(cid) + " has only " +
                                std::to_string(have) + " images, need k=" + std::to_string(spec.k));
        }
    }

    Rng rng(spec.seed);
    std::set<int> selected;
    std::map<int, int> count;  // per-class selected-image count
    for (int cid : classes) count[cid] = 0;

    auto bump = [&](int image_id) {
        for (int cid : classes_of_image(ds, image_id)) {
            auto it = count.find(cid);
            if (it != count.end()) it->second += 1;
        }
    };

    for (int cid : classes) {
        std::vector<int> candidates = by_class[cid];  // ascending image id
        rng.shuffle(candidates);
        size_t next = 0;
        while (count[cid] < spec.k) {
            if (next >= candidates.size()) {
                throw CoverageError("class " + std::to_string(cid) +
                                    " ran out of candidate images");
            }
            int image_id = candidates[next++];
            if (selected.count(image_id)) continue;
            selected.insert(image_id);
            bump(image_id);
        }
    }
    return subset_by_images(ds, std::vector<int>(selected.begin(), selected.end()));
}

SplitResult split(const DatasetIndex& ds, float fraction, uint64_t seed) {
    if (fraction <= 0.0f || fraction >= 1.0f) {
        throw ConfigError("split: fraction must lie strictly between 0 and 1");
    }
    std::vector<int> ids;
    for (const auto& im : ds.images) ids.push_back(im.id);
    std::sort(ids.begin(), ids.end());
    Rng rng(seed);
    rng.shuffle(ids);
    size_t n_val = static_cast<size_t>(std::lround(fraction * static_cast<double>(ids.size())));
    if (n_val == 0 || n_val == ids.size()) {
        throw ConfigError("split: fraction " + std::to_string(fraction) + " leaves a side empty");
    }
    std::vector<int> val_ids(ids.begin(), ids.begin() + static_cast<long>(n_val));
    std::vector<int> train_ids(ids.begin() + static_cast<long>(n_val), ids.end());

    // Category-retention repair: when a class is present overall but missing
    // from one side, swap in a donor image from the other side.
    auto present = [&](const std::vector<int>& side, int cid) {
        for (int id : side)
            if (classes_of_image(ds, id).count(cid)) return true;
        return false;
    };
    for (const auto& cat : ds.categories) {
        bool anywhere = present(ids, cat.id);
        if (!anywhere) continue;
        for (int pass = 0; pass < 2; ++pass) {
            auto& missing_side = pass == 0 ? val_ids : train_ids;
            auto& donor_side = pass == 0 ? train_ids : val_ids;
            if (present(missing_side, cat.id) || donor_side.size() < 2) continue;
            for (size_t d = 0; d < donor_side.size(); ++d) {
                if (!classes_of_image(ds, donor_side[d]).count(cat.id)) continue;
                // swap donor with the first image on the missing side whose
                // classes all appear elsewhere on that side
                for (size_t m = 0; m < missing_side.size(); ++m) {
                    bool safe = true;
                    for (int cid : classes_of_image(ds, missing_side[m])) {
                        int elsewhere = 0;
                        for (size_t o = 0; o < missing_side.size(); ++o) {
                            if (o != m && classes_of_image(ds, missing_side[o]).count(cid)) {
                                elsewhere = 1;
                                break;
                            }
                        }
                        if (!elsewhere) {
                            safe = false;
                            break;
                        }
                    }
                    if (safe) {
                        std::swap(missing_side[m], donor_side[d]);
                        break;
                    }
                }
                if (present(missing_side, cat.id)) break;
            }
        }
    }

    SplitResult out;
    out.val = subset_by_images(ds, val_ids);
    out.train = subset_by_images(ds, train_ids);
    return out;
}

}  // namespace lodet::data
