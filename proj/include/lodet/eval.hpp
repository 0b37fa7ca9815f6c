#pragma once

#include <map>
#include <string>
#include <vector>

#include "lodet/boxes.hpp"

namespace lodet::eval {

struct EvalResult {
    std::map<int, double> per_class_ap;  // classes present in ground truth
    double map50 = 0.0;
    int n_images = 0;
    int n_gt = 0;
    int n_det = 0;
};

// Intersection over union of corner-format boxes. Degenerate boxes
// (x2 <= x1 or y2 <= y1) are a contract violation.
double iou(const det::BoxXyxy& a, const det::BoxXyxy& b);

// Per-detection TP/FP labels for one image. Keeps the top `max_dets`
// detections (input must be sorted by descending score), then per class
// greedily matches each detection to the unmatched ground-truth box of the
// same class with the highest IoU >= iou_thr.
std::vector<bool> match_detections(const det::DetectionSet& dets, const det::BoxSet& gts,
                                   double iou_thr, int max_dets);

// 101-point interpolated average precision from scored TP/FP labels.
// Labels may arrive in any order; ties are broken by insertion order.
double average_precision(const std::vector<std::pair<float, bool>>& scored_labels, int n_gt);

// Class-mean AP at one IoU threshold with a per-image detection cap. The
// detection and ground-truth maps must cover the same image ids.
EvalResult evaluate(const std::map<int, det::DetectionSet>& dets_per_image,
                    const std::map<int, det::BoxSet>& gts_per_image,
                    const std::vector<int>& classes, double iou_thr = 0.5, int max_dets = 300);

std::string to_json(const EvalResult& r);

}  // namespace lodet::eval
