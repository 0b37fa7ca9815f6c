#include "lodet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace lodet::det {

using nn::Tensor;

void DetectorConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
        throw ConfigError("image_size must be a positive multiple of patch_size");
    }
    if (n_proposals < 1) throw ConfigError("n_proposals must be >= 1");
    if (diffusion_steps < 1) throw ConfigError("diffusion_steps must be >= 1");
    if (sampling_steps < 1 || sampling_steps > diffusion_steps) {
        throw ConfigError("sampling_steps must lie in [1, diffusion_steps]");
    }
    if (signal_scale <= 0.0f) throw ConfigError("signal_scale must be positive");
    if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
    if (time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even");
}

DiffusionSchedule::DiffusionSchedule(int steps) {
    // abar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), s = 0.008
    const double s = 0.008;
    auto f = [&](double t) {
        double x = ((t / steps + s) / (1.0 + s)) * M_PI / 2.0;
        double c = std::cos(x);
        return c * c;
    };
    const double f0 = f(0.0);
    abar_.resize(static_cast<size_t>(steps) + 1);
    abar_[0] = 1.0f;
    for (int t = 1; t <= steps; ++t) {
        abar_[static_cast<size_t>(t)] =
            static_cast<float>(std::clamp(f(static_cast<double>(t)) / f0, 0.0, 1.0));
    }
}

float DiffusionSchedule::abar(int t) const {
    if (t < 0 || t >= static_cast<int>(abar_.size())) {
        throw ContractError("diffusion step " + std::to_string(t) + " outside [0, " +
                            std::to_string(abar_.size() - 1) + "]");
    }
    return abar_[static_cast<size_t>(t)];
}

Detector::Detector(DetectorConfig cfg, uint64_t init_seed)
    : cfg_(cfg), schedule_(cfg.diffusion_steps) {
    cfg_.validate();
    Rng rng(init_seed);
    const int patch_dim = cfg_.patch_size * cfg_.patch_size * 3;
    const int d = cfg_.embed_dim;
    proj_ = model_.add_linear("backbone.proj", patch_dim, d, true, rng);
    mlp1_ = model_.add_linear("backbone.mlp1", d, d, true, rng);
    mlp2_ = model_.add_linear("backbone.mlp2", d, d, true, rng);

    const int head_in = 4 * d + 4 + cfg_.time_embed_dim;
    fc1_ = model_.add_linear("head.fc1", head_in, cfg_.head_hidden, true, rng);
    fc2_ = model_.add_linear("head.fc2", cfg_.head_hidden, cfg_.head_hidden, true, rng);
    cls_ = model_.add_linear("head.cls", cfg_.head_hidden, cfg_.n_classes + 1, true, rng);
    box_ = model_.add_linear("head.box", cfg_.head_hidden, 4, true, rng);
    // Zero box head: the first denoising step starts as the identity map.
    std::fill(box_->weight->tensor().value_mut().begin(),
              box_->weight->tensor().value_mut().end(), 0.0f);
}

nn::Tensor Detector::backbone_forward(const data::ImageBuffer& image) {
    if (image.width != cfg_.image_size || image.height != cfg_.image_size) {
        throw ShapeError("backbone expects " + std::to_string(cfg_.image_size) + "x" +
                         std::to_string(cfg_.image_size) + " input, got " +
                         std::to_string(image.width) + "x" + std::to_string(image.height));
    }
    const int g = cfg_.grid();
    const int p = cfg_.patch_size;
    const int patch_dim = p * p * 3;
    std::vector<float> patches(static_cast<size_t>(g) * g * patch_dim);
    for (int pi = 0; pi < g; ++pi) {
        for (int pj = 0; pj < g; ++pj) {
            float* row = patches.data() + (static_cast<size_t>(pi) * g + pj) * patch_dim;
            int off = 0;
            for (int y = 0; y < p; ++y) {
                for (int x = 0; x < p; ++x) {
                    for (int c = 0; c < 3; ++c) {
                        row[off++] = image.at(pj * p + x, pi * p + y, c);
                    }
                }
            }
        }
    }
    Tensor x = Tensor::from({g * g, patch_dim}, std::move(patches));
    Tensor e = proj_->forward(x);
    Tensor h = nn::relu(mlp1_->forward(e));
    return mlp2_->forward(h);
}

CorruptResult Detector::corrupt_boxes(const BoxSet& gt, int t, Rng& rng) const {
    if (t < 0 || t > cfg_.diffusion_steps) {
        throw ContractError("corrupt_boxes: step " + std::to_string(t) + " outside [0, " +
                            std::to_string(cfg_.diffusion_steps) + "]");
    }
    if (gt.empty()) throw ContractError("corrupt_boxes: ground truth must be non-empty");
    const int n = cfg_.n_proposals;
    const int n_gt = static_cast<int>(gt.size());

    // One cycle of the ground truth, then uniform random boxes. A second
    // cycle would hand near-identical inputs opposing class labels, which a
    // per-box head cannot fit.
    CorruptResult out;
    out.padded_x0.resize(static_cast<size_t>(n));
    int n_repeat = std::min(n, n_gt);
    for (int i = 0; i < n_repeat; ++i) out.padded_x0[static_cast<size_t>(i)] = gt.boxes[static_cast<size_t>(i % n_gt)];
    for (int i = n_repeat; i < n; ++i) {
        out.padded_x0[static_cast<size_t>(i)] = {static_cast<float>(rng.uniform(0.05, 0.95)),
                                                 static_cast<float>(rng.uniform(0.05, 0.95)),
                                                 static_cast<float>(rng.uniform(0.05, 0.40)),
                                                 static_cast<float>(rng.uniform(0.05, 0.40))};
    }

    float ab = schedule_.abar(t);
    float sa = std::sqrt(ab);
    float sn = std::sqrt(1.0f - ab);
    out.signal.resize(static_cast<size_t>(n) * 4);
    out.noisy.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        BoxCxcywh noisy{};
        for (int c = 0; c < 4; ++c) {
            float x0 = to_signal(out.padded_x0[static_cast<size_t>(i)][static_cast<size_t>(c)]);
            float eps = static_cast<float>(rng.normal());
            float xt = sa * x0 + sn * eps;
            out.signal[static_cast<size_t>(i) * 4 + c] = xt;
            noisy[static_cast<size_t>(c)] = from_signal(xt);
        }
        out.noisy[static_cast<size_t>(i)] = clamp_box(noisy);
    }
    return out;
}

CorruptResult Detector::corrupt_boxes(const BoxSet& gt, int t, uint64_t seed) const {
    Rng rng(seed);
    return corrupt_boxes(gt, t, rng);
}

namespace {

// Bilinear taps into a g x g feature grid at a normalized point.
void bilinear_taps(float px, float py, int g, std::vector<nn::Tap>& taps) {
    auto clampf = [](float v, float lo, float hi) { return v < lo ? lo : (v > hi ? hi : v); };
    float u = clampf(px * static_cast<float>(g) - 0.5f, 0.0f, static_cast<float>(g) - 1.0f);
    float v = clampf(py * static_cast<float>(g) - 0.5f, 0.0f, static_cast<float>(g) - 1.0f);
    int j0 = static_cast<int>(u);
    int i0 = static_cast<int>(v);
    int j1 = std::min(j0 + 1, g - 1);
    int i1 = std::min(i0 + 1, g - 1);
    float fu = u - static_cast<float>(j0);
    float fv = v - static_cast<float>(i0);
    taps.push_back({i0 * g + j0, (1 - fu) * (1 - fv)});
    taps.push_back({i0 * g + j1, fu * (1 - fv)});
    taps.push_back({i1 * g + j0, (1 - fu) * fv});
    taps.push_back({i1 * g + j1, fu * fv});
}

}  // namespace

DenoiseOut Detector::denoise_step(const nn::Tensor& features, const std::vector<BoxCxcywh>& boxes,
                                  int t) {
    const int n = static_cast<int>(boxes.size());
    const int g = cfg_.grid();
    if (features.rank() != 2 || features.dim(0) != g * g || features.dim(1) != cfg_.embed_dim) {
        throw ShapeError("denoise_step: feature grid has shape " + shape_str(features.shape()));
    }
    nn::check_finite(features.value(), "denoise_step features");

    std::vector<BoxCxcywh> valid(boxes.size());
    for (size_t i = 0; i < boxes.size(); ++i) {
        for (float c : boxes[i]) {
            if (!std::isfinite(c)) throw NumericError("denoise_step: non-finite box input");
        }
        valid[i] = clamp_box(boxes[i]);
    }

    // 2x2 sample grid at the quadrant centers of each box.
    std::vector<std::vector<nn::Tap>> taps[4];
    for (auto& tv : taps) tv.resize(static_cast<size_t>(n));
    static const float offs[4][2] = {{-0.25f, -0.25f}, {0.25f, -0.25f},
                                     {-0.25f, 0.25f}, {0.25f, 0.25f}};
    for (int i = 0; i < n; ++i) {
        const auto& b = valid[static_cast<size_t>(i)];
        for (int spt = 0; spt < 4; ++spt) {
            float px = b[0] + offs[spt][0] * b[2];
            float py = b[1] + offs[spt][1] * b[3];
            bilinear_taps(px, py, g, taps[spt][static_cast<size_t>(i)]);
        }
    }
    std::vector<Tensor> pooled_parts;
    pooled_parts.reserve(6);
    for (auto& tv : taps) pooled_parts.push_back(nn::pool_rows(features, tv));

    std::vector<float> coord_data(static_cast<size_t>(n) * 4);
    std::vector<float> sig_data(static_cast<size_t>(n) * 4);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < 4; ++c) {
            coord_data[static_cast<size_t>(i) * 4 + c] = valid[static_cast<size_t>(i)][static_cast<size_t>(c)];
            sig_data[static_cast<size_t>(i) * 4 + c] =
                to_signal(valid[static_cast<size_t>(i)][static_cast<size_t>(c)]);
        }
    }
    pooled_parts.push_back(Tensor::from({n, 4}, coord_data));

    const int te = cfg_.time_embed_dim;
    std::vector<float> temb_row(static_cast<size_t>(te));
    for (int f = 0; f < te / 2; ++f) {
        double freq = std::pow(10000.0, -static_cast<double>(f) / (te / 2));
        temb_row[static_cast<size_t>(2 * f)] = static_cast<float>(std::sin(t * freq));
        temb_row[static_cast<size_t>(2 * f + 1)] = static_cast<float>(std::cos(t * freq));
    }
    std::vector<float> temb_data(static_cast<size_t>(n) * te);
    for (int i = 0; i < n; ++i) {
        std::copy(temb_row.begin(), temb_row.end(), temb_data.begin() + static_cast<size_t>(i) * te);
    }
    pooled_parts.push_back(Tensor::from({n, te}, std::move(temb_data)));

    Tensor trunk = nn::concat_cols(pooled_parts);
    Tensor h1 = nn::relu(fc1_->forward(trunk));
    Tensor h2 = nn::relu(fc2_->forward(h1));
    Tensor logits = cls_->forward(h2);
    Tensor deltas = box_->forward(h2);

    // Deltas apply in signal space; the refined box comes back to normalized
    // coordinates with extents floored away from zero.
    Tensor sig_in = Tensor::from({n, 4}, std::move(sig_data));
    Tensor refined_sig = nn::add(sig_in, deltas);
    Tensor refined = nn::add_scalar(nn::scale(refined_sig, 0.5f / cfg_.signal_scale), 0.5f);
    Tensor cx = nn::slice_cols(refined, 0, 1);
    Tensor cy = nn::slice_cols(refined, 1, 1);
    Tensor w = nn::maximum(nn::slice_cols(refined, 2, 1), Tensor::full({n, 1}, kMinBoxExtent));
    Tensor h = nn::maximum(nn::slice_cols(refined, 3, 1), Tensor::full({n, 1}, kMinBoxExtent));
    DenoiseOut out;
    out.boxes = nn::concat_cols({cx, cy, w, h});
    out.logits = logits;
    return out;
}

namespace {

struct RawBox {
    float x1, y1, x2, y2;
    float area() const { return (x2 - x1) * (y2 - y1); }
};

RawBox raw_xyxy(const float* cxcywh) {
    float w = std::max(cxcywh[2], kMinBoxExtent);
    float h = std::max(cxcywh[3], kMinBoxExtent);
    return {cxcywh[0] - w / 2, cxcywh[1] - h / 2, cxcywh[0] + w / 2, cxcywh[1] + h / 2};
}

float raw_giou(const RawBox& a, const RawBox& b) {
    float ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
    float ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
    float inter = std::max(0.0f, ix2 - ix1) * std::max(0.0f, iy2 - iy1);
    float uni = a.area() + b.area() - inter;
    float iou = uni > 0.0f ? inter / uni : 0.0f;
    float ex1 = std::min(a.x1, b.x1), ey1 = std::min(a.y1, b.y1);
    float ex2 = std::max(a.x2, b.x2), ey2 = std::max(a.y2, b.y2);
    float enc = (ex2 - ex1) * (ey2 - ey1);
    return enc > 0.0f ? iou - (enc - uni) / enc : iou;
}

}  // namespace

nn::Tensor Detector::set_loss(const DenoiseOut& pred, const BoxSet& gt) const {
    const int n = pred.logits.dim(0);
    const int n_cls = cfg_.n_classes;
    if (pred.logits.dim(1) != n_cls + 1 || pred.boxes.dim(0) != n || pred.boxes.dim(1) != 4) {
        throw ShapeError("set_loss: inconsistent prediction shapes " +
                         shape_str(pred.boxes.shape()) + " / " + shape_str(pred.logits.shape()));
    }
    const int n_gt = static_cast<int>(gt.size());
    if (n_gt > n) {
        throw ContractError("set_loss: " + std::to_string(n_gt) + " ground-truth boxes exceed " +
                            std::to_string(n) + " proposals");
    }
    const int background = n_cls;

    std::vector<int> targets(static_cast<size_t>(n), background);
    std::vector<int> matched_rows;
    std::vector<float> matched_gt;

    if (n_gt > 0) {
        // Matching cost from detached values: classification surprisal plus
        // L1 and GIoU geometry terms.
        const float* lg = pred.logits.value().data();
        const float* bx = pred.boxes.value().data();
        std::vector<double> logprob(static_cast<size_t>(n) * (n_cls + 1));
        for (int i = 0; i < n; ++i) {
            const float* row = lg + static_cast<size_t>(i) * (n_cls + 1);
            double mx = row[0];
            for (int j = 1; j <= n_cls; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double z = 0.0;
            for (int j = 0; j <= n_cls; ++j) z += std::exp(row[j] - mx);
            double lz = std::log(z) + mx;
            for (int j = 0; j <= n_cls; ++j)
                logprob[static_cast<size_t>(i) * (n_cls + 1) + j] = row[j] - lz;
        }
        std::vector<float> cost(static_cast<size_t>(n_gt) * n);
        for (int gi = 0; gi < n_gt; ++gi) {
            int cls_idx = gt.classes[static_cast<size_t>(gi)] - 1;
            if (cls_idx < 0 || cls_idx >= n_cls) {
                throw ContractError("set_loss: ground-truth class id " +
                                    std::to_string(gt.classes[static_cast<size_t>(gi)]) +
                                    " outside [1, " + std::to_string(n_cls) + "]");
            }
            RawBox gb = raw_xyxy(gt.boxes[static_cast<size_t>(gi)].data());
            for (int pi = 0; pi < n; ++pi) {
                const float* pb = bx + static_cast<size_t>(pi) * 4;
                float l1 = 0.0f;
                for (int c = 0; c < 4; ++c)
                    l1 += std::fabs(pb[c] - gt.boxes[static_cast<size_t>(gi)][static_cast<size_t>(c)]);
                float gio = raw_giou(raw_xyxy(pb), gb);
                float nll = -static_cast<float>(
                    logprob[static_cast<size_t>(pi) * (n_cls + 1) + cls_idx]);
                cost[static_cast<size_t>(gi) * n + pi] =
                    cfg_.lambda_cls * nll + cfg_.lambda_l1 * l1 + cfg_.lambda_giou * (1.0f - gio);
            }
        }
        for (auto [gi, pi] : hungarian_match(cost, n_gt, n)) {
            targets[static_cast<size_t>(pi)] = gt.classes[static_cast<size_t>(gi)] - 1;
            matched_rows.push_back(pi);
            for (int c = 0; c < 4; ++c)
                matched_gt.push_back(gt.boxes[static_cast<size_t>(gi)][static_cast<size_t>(c)]);
        }
    }

    // Classification weights: matched full, overlapping unmatched (the
    // would-be duplicates) heaviest, far negatives light.
    std::vector<float> ce_weights(static_cast<size_t>(n), cfg_.background_weight);
    if (n_gt > 0) {
        const float* bx = pred.boxes.value().data();
        for (int pi = 0; pi < n; ++pi) {
            float best = 0.0f;
            RawBox pb = raw_xyxy(bx + static_cast<size_t>(pi) * 4);
            for (int gi = 0; gi < n_gt; ++gi) {
                RawBox gb = raw_xyxy(gt.boxes[static_cast<size_t>(gi)].data());
                float ix1 = std::max(pb.x1, gb.x1), iy1 = std::max(pb.y1, gb.y1);
                float ix2 = std::min(pb.x2, gb.x2), iy2 = std::min(pb.y2, gb.y2);
                float inter = std::max(0.0f, ix2 - ix1) * std::max(0.0f, iy2 - iy1);
                float uni = pb.area() + gb.area() - inter;
                if (uni > 0.0f) best = std::max(best, inter / uni);
            }
            if (best >= 0.5f) ce_weights[static_cast<size_t>(pi)] = cfg_.duplicate_weight;
            else if (best >= 0.25f) ce_weights[static_cast<size_t>(pi)] = 1.0f;
        }
    }
    for (int pi : matched_rows) ce_weights[static_cast<size_t>(pi)] = 1.0f;
    Tensor ce = nn::cross_entropy_rows(pred.logits, targets, ce_weights);
    if (matched_rows.empty()) return ce;

    const int m = static_cast<int>(matched_rows.size());
    Tensor mp = nn::gather_rows(pred.boxes, matched_rows);
    Tensor mg = Tensor::from({m, 4}, matched_gt);
    Tensor l1_term = nn::scale(nn::sum(nn::abs(nn::sub(mp, mg))), 1.0f / static_cast<float>(m));

    // GIoU on corner conversions, all differentiable elementwise.
    Tensor pcx = nn::slice_cols(mp, 0, 1), pcy = nn::slice_cols(mp, 1, 1);
    Tensor pw = nn::slice_cols(mp, 2, 1), ph = nn::slice_cols(mp, 3, 1);
    Tensor px1 = nn::sub(pcx, nn::scale(pw, 0.5f)), px2 = nn::add(pcx, nn::scale(pw, 0.5f));
    Tensor py1 = nn::sub(pcy, nn::scale(ph, 0.5f)), py2 = nn::add(pcy, nn::scale(ph, 0.5f));
    std::vector<float> g1(static_cast<size_t>(m)), g2(static_cast<size_t>(m)),
        g3(static_cast<size_t>(m)), g4(static_cast<size_t>(m)), ga(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        RawBox gb = raw_xyxy(matched_gt.data() + static_cast<size_t>(i) * 4);
        g1[static_cast<size_t>(i)] = gb.x1;
        g2[static_cast<size_t>(i)] = gb.y1;
        g3[static_cast<size_t>(i)] = gb.x2;
        g4[static_cast<size_t>(i)] = gb.y2;
        ga[static_cast<size_t>(i)] = gb.area();
    }
    Tensor gx1 = Tensor::from({m, 1}, g1), gy1 = Tensor::from({m, 1}, g2);
    Tensor gx2 = Tensor::from({m, 1}, g3), gy2 = Tensor::from({m, 1}, g4);
    Tensor garea = Tensor::from({m, 1}, ga);

    Tensor iw = nn::relu(nn::sub(nn::minimum(px2, gx2), nn::maximum(px1, gx1)));
    Tensor ih = nn::relu(nn::sub(nn::minimum(py2, gy2), nn::maximum(py1, gy1)));
    Tensor inter = nn::mul(iw, ih);
    Tensor parea = nn::mul(pw, ph);
    Tensor uni = nn::sub(nn::add(parea, garea), inter);
    Tensor iou = nn::div(inter, uni);
    Tensor ew = nn::sub(nn::maximum(px2, gx2), nn::minimum(px1, gx1));
    Tensor eh = nn::sub(nn::maximum(py2, gy2), nn::minimum(py1, gy1));
    Tensor earea = nn::mul(ew, eh);
    Tensor giou = nn::sub(iou, nn::div(nn::sub(earea, uni), earea));
    Tensor giou_term = nn::scale(nn::sum(nn::sub(Tensor::full({m, 1}, 1.0f), giou)),
                                 1.0f / static_cast<float>(m));

    return nn::add(ce, nn::add(nn::scale(l1_term, cfg_.lambda_l1),
                               nn::scale(giou_term, cfg_.lambda_giou)));
}

nn::Tensor Detector::training_loss(const data::ImageBuffer& image, const BoxSet& gt, Rng& rng) {
    int t = rng.uniform_int(1, cfg_.diffusion_steps);
    CorruptResult cor = corrupt_boxes(gt, t, rng);
    Tensor features = backbone_forward(image);
    DenoiseOut dn = denoise_step(features, cor.noisy, t);
    return set_loss(dn, gt);
}

DetectionSet Detector::infer(const data::ImageBuffer& image, uint64_t seed) {
    nn::NoGradGuard no_grad;
    Rng rng(seed);
    const int n = cfg_.n_proposals;
    const float lim = cfg_.signal_scale;

    Tensor features = backbone_forward(image);

    std::vector<float> x(static_cast<size_t>(n) * 4);
    for (auto& v : x) v = static_cast<float>(rng.normal());

    // Uniformly spaced timestep ladder T = t_0 > t_1 > ... > t_S = 0.
    const int s_steps = cfg_.sampling_steps;
    std::vector<int> times(static_cast<size_t>(s_steps) + 1);
    for (int k = 0; k <= s_steps; ++k) {
        times[static_cast<size_t>(k)] = static_cast<int>(std::lround(
            static_cast<double>(cfg_.diffusion_steps) * (s_steps - k) / s_steps));
    }

    std::vector<float> logits;
    for (int k = 0; k < s_steps; ++k) {
        int t_cur = times[static_cast<size_t>(k)];
        int t_next = times[static_cast<size_t>(k) + 1];

        std::vector<BoxCxcywh> boxes(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            BoxCxcywh b{};
            for (int c = 0; c < 4; ++c) b[static_cast<size_t>(c)] = from_signal(x[static_cast<size_t>(i) * 4 + c]);
            boxes[static_cast<size_t>(i)] = clamp_box(b);
        }
        DenoiseOut dn = denoise_step(features, boxes, t_cur);
        logits.assign(dn.logits.value().begin(), dn.logits.value().end());

        // DDIM update with the clamped x0 estimate.
        float ab_cur = schedule_.abar(t_cur);
        float ab_next = schedule_.abar(t_next);
        float sa_cur = std::sqrt(ab_cur), sn_cur = std::sqrt(1.0f - ab_cur);
        float sa_next = std::sqrt(ab_next), sn_next = std::sqrt(1.0f - ab_next);
        const float* pb = dn.boxes.value().data();
        for (size_t i = 0; i < x.size(); ++i) {
            float x0 = std::clamp(to_signal(pb[i]), -lim, lim);
            if (sn_cur <= 0.0f) {
                x[i] = x0;
            } else {
                float eps = (x[i] - sa_cur * x0) / sn_cur;
                x[i] = sa_next * x0 + sn_next * eps;
            }
        }
    }

    DetectionSet dets;
    const int n_cls = cfg_.n_classes;
    for (int i = 0; i < n; ++i) {
        BoxCxcywh b{};
        for (int c = 0; c < 4; ++c) b[static_cast<size_t>(c)] = from_signal(x[static_cast<size_t>(i) * 4 + c]);
        b = clamp_box(b);
        const float* row = logits.data() + static_cast<size_t>(i) * (n_cls + 1);
        float mx = row[0];
        for (int j = 1; j <= n_cls; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j <= n_cls; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        for (int j = 0; j < n_cls; ++j) {
            float p = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / z);
            if (p >= cfg_.score_threshold) {
                dets.push_back({b, j + 1, p});
            }
        }
    }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(dets.size()) > cfg_.max_detections) {
        dets.resize(static_cast<size_t>(cfg_.max_detections));
    }
    return dets;
}

BoxSet gt_boxes(const data::DatasetIndex& ds, const data::ImageInfo& info) {
    BoxSet out;
    for (const auto* a : ds.annotations_of(info.id)) {
        float w = static_cast<float>(info.width);
        float h = static_cast<float>(info.height);
        out.boxes.push_back({(a->bbox[0] + a->bbox[2] / 2) / w, (a->bbox[1] + a->bbox[3] / 2) / h,
                             a->bbox[2] / w, a->bbox[3] / h});
        out.classes.push_back(a->category_id);
    }
    return out;
}

std::string detections_to_json(const std::vector<std::pair<int, DetectionSet>>& per_image,
                               int image_size) {
    nlohmann::json arr = nlohmann::json::array();
    const float s = static_cast<float>(image_size);
    for (const auto& [image_id, dets] : per_image) {
        for (const auto& d : dets) {
            BoxXyxy b = to_xyxy(d.box);
            arr.push_back({{"image_id", image_id},
                           {"category_id", d.class_id},
                           {"bbox", {b[0] * s, b[1] * s, (b[2] - b[0]) * s, (b[3] - b[1]) * s}},
                           {"score", d.score}});
        }
    }
    return arr.dump(2);
}

}  // namespace lodet::det
