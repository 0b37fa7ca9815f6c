#include "lodet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

namespace lodet::eval {

double iou(const det::BoxXyxy& a, const det::BoxXyxy& b) {
    if (a[2] <= a[0] || a[3] <= a[1] || b[2] <= b[0] || b[3] <= b[1]) {
        throw ContractError("iou: degenerate box");
    }
    double ix = std::max(0.0, static_cast<double>(std::min(a[2], b[2])) - std::max(a[0], b[0]));
    double iy = std::max(0.0, static_cast<double>(std::min(a[3], b[3])) - std::max(a[1], b[1]));
    double inter = ix * iy;
    double area_a = (static_cast<double>(a[2]) - a[0]) * (static_cast<double>(a[3]) - a[1]);
    double area_b = (static_cast<double>(b[2]) - b[0]) * (static_cast<double>(b[3]) - b[1]);
    return inter / (area_a + area_b - inter);
}

std::vector<bool> match_detections(const det::DetectionSet& dets, const det::BoxSet& gts,
                                   double iou_thr, int max_dets) {
    for (size_t i = 1; i < dets.size(); ++i) {
        if (dets[i].score > dets[i - 1].score) {
            throw ContractError("match_detections: detections must be sorted by descending score");
        }
    }
    size_t kept = std::min(dets.size(), static_cast<size_t>(std::max(0, max_dets)));
    std::vector<bool> labels(kept, false);
    std::vector<bool> gt_used(gts.size(), false);
    for (size_t di = 0; di < kept; ++di) {
        const auto& d = dets[di];
        int best_gt = -1;
        double best_iou = -1.0;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_used[gi] || gts.classes[gi] != d.class_id) continue;
            double v = iou(det::to_xyxy(d.box), det::to_xyxy(gts.boxes[gi]));
            // strict > keeps the lowest gt index on IoU ties
            if (v >= iou_thr && v > best_iou) {
                best_iou = v;
                best_gt = static_cast<int>(gi);
            }
        }
        if (best_gt >= 0) {
            gt_used[static_cast<size_t>(best_gt)] = true;
            labels[di] = true;
        }
    }
    return labels;
}

double average_precision(const std::vector<std::pair<float, bool>>& scored_labels, int n_gt) {
    if (n_gt < 0) throw ContractError("average_precision: negative ground-truth count");
    if (n_gt == 0) return 0.0;
    if (scored_labels.empty()) return 0.0;

    std::vector<std::pair<float, bool>> sorted = scored_labels;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });

    size_t n = sorted.size();
    std::vector<double> precision(n), recall(n);
    int tp = 0, fp = 0;
    for (size_t i = 0; i < n; ++i) {
        (sorted[i].second ? tp : fp) += 1;
        precision[i] = static_cast<double>(tp) / static_cast<double>(tp + fp);
        recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    // Monotone non-increasing precision envelope.
    for (size_t i = n - 1; i > 0; --i) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }

    double acc = 0.0;
    for (int r = 0; r <= 100; ++r) {
        double thr = static_cast<double>(r) / 100.0;
        auto it = std::lower_bound(recall.begin(), recall.end(), thr);
        if (it != recall.end()) acc += precision[static_cast<size_t>(it - recall.begin())];
    }
    return acc / 101.0;
}

EvalResult evaluate(const std::map<int, det::DetectionSet>& dets_per_image,
                    const std::map<int, det::BoxSet>& gts_per_image,
                    const std::vector<int>& classes, double iou_thr, int max_dets) {
    {
        std::set<int> dk, gk;
        for (const auto& [k, v] : dets_per_image) dk.insert(k);
        for (const auto& [k, v] : gts_per_image) gk.insert(k);
        if (dk != gk) {
            throw ContractError("evaluate: detection and ground-truth image id sets differ");
        }
    }

    EvalResult res;
    res.n_images = static_cast<int>(gts_per_image.size());

    // Cap and label per image once, then pool per class.
    struct Labeled {
        float score;
        int class_id;
        bool tp;
    };
    std::vector<Labeled> pool;
    std::map<int, int> gt_count;
    for (const auto& [image_id, gts] : gts_per_image) {
        const auto& dets = dets_per_image.at(image_id);
        auto labels = match_detections(dets, gts, iou_thr, max_dets);
        for (size_t i = 0; i < labels.size(); ++i) {
            pool.push_back({dets[i].score, dets[i].class_id, labels[i]});
        }
        for (int c : gts.classes) gt_count[c] += 1;
        res.n_gt += static_cast<int>(gts.size());
        res.n_det += static_cast<int>(labels.size());
    }

    double acc = 0.0;
    int n_present = 0;
    for (int c : classes) {
        int n_gt_c = gt_count.count(c) ? gt_count[c] : 0;
        if (n_gt_c == 0) continue;  // absent from ground truth: excluded from the mean
        std::vector<std::pair<float, bool>> scored;
        for (const auto& l : pool) {
            if (l.class_id == c) scored.emplace_back(l.score, l.tp);
        }
        double ap = average_precision(scored, n_gt_c);
        res.per_class_ap[c] = ap;
        acc += ap;
        n_present += 1;
    }
    res.map50 = n_present > 0 ? acc / n_present : 0.0;
    return res;
}

std::string to_json(const EvalResult& r) {
    nlohmann::json j;
    j["map50"] = r.map50;
    j["per_class_ap"] = nlohmann::json::object();
    for (const auto& [c, ap] : r.per_class_ap) j["per_class_ap"][std::to_string(c)] = ap;
    j["n_images"] = r.n_images;
    j["n_gt"] = r.n_gt;
    j["n_det"] = r.n_det;
    return j.dump(2);
}

}  // namespace lodet::eval
