#include "lodet/ops.hpp"

#include <algorithm>
#include <cmath>

namespace lodet::nn {

namespace {

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

float* grad_of(const NodePtr& n) {
    n->ensure_grad();
    return n->grad.data();
}

// Double view of a node: its shadow when present, else the f32 values.
inline double sv(const NodePtr& n, size_t i) {
    return n->shadow.empty() ? static_cast<double>(n->value[i]) : n->shadow[i];
}

inline bool want_shadow(const Tensor& t) { return shadow_eval() || t.numel() == 1; }

// Shared scaffolding for elementwise binary ops: float forward plus float
// gradient factors, with a double twin for the shadow path.
template <typename Fwd, typename Bwd, typename DFwd>
Tensor ew_binary(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd, DFwd dfwd,
                 const char* name) {
    require_same_shape(a, b, name);
    size_t n = a.value().size();
    std::vector<float> out(n);
    const float* pa = a.value().data();
    const float* pb = b.value().data();
    for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    auto an = a.node();
    auto bn = b.node();
    Tensor t = Tensor::from_op(
        a.shape(), std::move(out), {a, b},
        [an, bn, bwd](TensorNode& self) {
            const float* g = self.grad.data();
            const float* pa = an->value.data();
            const float* pb = bn->value.data();
            float* ga = an->requires_grad ? grad_of(an) : nullptr;
            float* gb = bn->requires_grad ? grad_of(bn) : nullptr;
            for (size_t i = 0; i < self.value.size(); ++i) {
                auto [da, db] = bwd(pa[i], pb[i]);
                if (ga) ga[i] += g[i] * da;
                if (gb) gb[i] += g[i] * db;
            }
        },
        name);
    if (want_shadow(t)) {
        auto& sh = t.node()->shadow;
        sh.resize(n);
        for (size_t i = 0; i < n; ++i) sh[i] = dfwd(sv(an, i), sv(bn, i));
    }
    return t;
}

template <typename Fwd, typename Bwd, typename DFwd>
Tensor ew_unary(const Tensor& a, Fwd fwd, Bwd bwd, DFwd dfwd, const char* name) {
    size_t n = a.value().size();
    std::vector<float> out(n);
    const float* pa = a.value().data();
    for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
    auto an = a.node();
    Tensor t = Tensor::from_op(
        a.shape(), std::move(out), {a},
        [an, bwd](TensorNode& self) {
            if (!an->requires_grad) return;
            const float* g = self.grad.data();
            const float* pa = an->value.data();
            const float* po = self.value.data();
            float* ga = grad_of(an);
            for (size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i] * bwd(pa[i], po[i]);
        },
        name);
    if (want_shadow(t)) {
        auto& sh = t.node()->shadow;
        sh.resize(n);
        for (size_t i = 0; i < n; ++i) sh[i] = dfwd(sv(an, i));
    }
    return t;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
    const float* pa = a.value().data();
    const float* pb = b.value().data();
    for (int i = 0; i < m; ++i) {
        float* oi = out.data() + static_cast<size_t>(i) * n;
        const float* ai = pa + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            float av = ai[p];
            const float* bp = pb + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) oi[j] += av * bp[j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    Tensor t = Tensor::from_op(
        {m, n}, std::move(out), {a, b},
        [an, bn, m, k, n](TensorNode& self) {
            const float* g = self.grad.data();
            const float* pa = an->value.data();
            const float* pb = bn->value.data();
            if (an->requires_grad) {
                float* ga = grad_of(an);
                // da[i,p] += sum_j g[i,j] * b[p,j]
                for (int i = 0; i < m; ++i) {
                    const float* gi = g + static_cast<size_t>(i) * n;
                    float* gai = ga + static_cast<size_t>(i) * k;
                    for (int p = 0; p < k; ++p) {
                        const float* bp = pb + static_cast<size_t>(p) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += static_cast<double>(gi[j]) * bp[j];
                        gai[p] += static_cast<float>(acc);
                    }
                }
            }
            if (bn->requires_grad) {
                float* gb = grad_of(bn);
                // db[p,j] += sum_i a[i,p] * g[i,j], inner sum in double
                for (int p = 0; p < k; ++p) {
                    float* gbp = gb + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i) {
                            acc += static_cast<double>(pa[static_cast<size_t>(i) * k + p]) *
                                   g[static_cast<size_t>(i) * n + j];
                        }
                        gbp[j] += static_cast<float>(acc);
                    }
                }
            }
        },
        "matmul");
    if (shadow_eval()) {
        auto& sh = t.node()->shadow;
        sh.assign(static_cast<size_t>(m) * n, 0.0);
        for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
                double av = sv(an, static_cast<size_t>(i) * k + p);
                for (int j = 0; j < n; ++j) {
                    sh[static_cast<size_t>(i) * n + j] +=
                        av * sv(bn, static_cast<size_t>(p) * n + j);
                }
            }
        }
    }
    return t;
}

namespace {

Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
    require_rank2(x, "linear");
    require_rank2(w, "linear");
    int n = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (w.dim(1) != in) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
    }
    if (bias && bias->numel() != out) {
        throw ShapeError("linear: bias " + shape_str(bias->shape()) +
                         " incompatible with weight " + shape_str(w.shape()));
    }
    std::vector<float> y(static_cast<size_t>(n) * out);
    const float* px = x.value().data();
    const float* pw = w.value().data();
    const float* pbias = bias ? bias->value().data() : nullptr;
    for (int i = 0; i < n; ++i) {
        const float* xi = px + static_cast<size_t>(i) * in;
        float* yi = y.data() + static_cast<size_t>(i) * out;
        for (int o = 0; o < out; ++o) {
            const float* wo = pw + static_cast<size_t>(o) * in;
            float acc = pbias ? pbias[o] : 0.0f;
            for (int c = 0; c < in; ++c) acc += xi[c] * wo[c];
            yi[o] = acc;
        }
    }
    std::vector<Tensor> parents = {x, w};
    if (bias) parents.push_back(*bias);
    auto xn = x.node();
    auto wn = w.node();
    NodePtr bn = bias ? bias->node() : nullptr;
    Tensor t = Tensor::from_op(
        {n, out}, std::move(y), std::move(parents),
        [xn, wn, bn, n, in, out](TensorNode& self) {
            const float* g = self.grad.data();
            const float* px = xn->value.data();
            const float* pw = wn->value.data();
            if (xn->requires_grad) {
                float* gx = grad_of(xn);
                for (int i = 0; i < n; ++i) {
                    const float* gi = g + static_cast<size_t>(i) * out;
                    float* gxi = gx + static_cast<size_t>(i) * in;
                    for (int c = 0; c < in; ++c) {
                        double acc = 0.0;
                        for (int o = 0; o < out; ++o) {
                            acc += static_cast<double>(gi[o]) * pw[static_cast<size_t>(o) * in + c];
                        }
                        gxi[c] += static_cast<float>(acc);
                    }
                }
            }
            if (wn->requires_grad) {
                float* gw = grad_of(wn);
                for (int o = 0; o < out; ++o) {
                    float* gwo = gw + static_cast<size_t>(o) * in;
                    for (int c = 0; c < in; ++c) {
                        double acc = 0.0;
                        for (int i = 0; i < n; ++i) {
                            acc += static_cast<double>(g[static_cast<size_t>(i) * out + o]) *
                                   px[static_cast<size_t>(i) * in + c];
                        }
                        gwo[c] += static_cast<float>(acc);
                    }
                }
            }
            if (bn && bn->requires_grad) {
                float* gb = grad_of(bn);
                for (int o = 0; o < out; ++o) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i) acc += g[static_cast<size_t>(i) * out + o];
                    gb[o] += static_cast<float>(acc);
                }
            }
        },
        "linear");
    if (shadow_eval()) {
        auto& sh = t.node()->shadow;
        sh.assign(static_cast<size_t>(n) * out, 0.0);
        for (int i = 0; i < n; ++i) {
            for (int o = 0; o < out; ++o) {
                double acc = bn ? sv(bn, static_cast<size_t>(o)) : 0.0;
                for (int c = 0; c < in; ++c) {
                    acc += sv(xn, static_cast<size_t>(i) * in + c) *
                           sv(wn, static_cast<size_t>(o) * in + c);
                }
                sh[static_cast<size_t>(i) * out + o] = acc;
            }
        }
    }
    return t;
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return linear_impl(x, w, &b); }
Tensor linear_no_bias(const Tensor& x, const Tensor& w) { return linear_impl(x, w, nullptr); }

Tensor add(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, [](float x, float y) { return x + y; },
        [](float, float) { return std::pair{1.0f, 1.0f}; },
        [](double x, double y) { return x + y; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, [](float x, float y) { return x - y; },
        [](float, float) { return std::pair{1.0f, -1.0f}; },
        [](double x, double y) { return x - y; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, [](float x, float y) { return x * y; },
        [](float x, float y) { return std::pair{y, x}; },
        [](double x, double y) { return x * y; }, "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, [](float x, float y) { return x / y; },
        [](float x, float y) { return std::pair{1.0f / y, -x / (y * y)}; },
        [](double x, double y) { return x / y; }, "div");
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, [](float x, float y) { return std::max(x, y); },
        [](float x, float y) { return x >= y ? std::pair{1.0f, 0.0f} : std::pair{0.0f, 1.0f}; },
        [](double x, double y) { return std::max(x, y); }, "maximum");
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    return ew_binary(
        a, b, [](float x, float y) { return std::min(x, y); },
        [](float x, float y) { return x <= y ? std::pair{1.0f, 0.0f} : std::pair{0.0f, 1.0f}; },
        [](double x, double y) { return std::min(x, y); }, "minimum");
}

Tensor add_rows(const Tensor& a, const Tensor& row) {
    require_rank2(a, "add_rows");
    int m = a.dim(0), n = a.dim(1);
    if (row.numel() != n) {
        throw ShapeError("add_rows: row " + shape_str(row.shape()) + " incompatible with " +
                         shape_str(a.shape()));
    }
    std::vector<float> out(a.value().begin(), a.value().end());
    const float* pr = row.value().data();
    for (int i = 0; i < m; ++i) {
        float* oi = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) oi[j] += pr[j];
    }
    auto an = a.node();
    auto rn = row.node();
    Tensor t = Tensor::from_op(
        {m, n}, std::move(out), {a, row},
        [an, rn, m, n](TensorNode& self) {
            const float* g = self.grad.data();
            if (an->requires_grad) {
                float* ga = grad_of(an);
                for (size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i];
            }
            if (rn->requires_grad) {
                float* gr = grad_of(rn);
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i) acc += g[static_cast<size_t>(i) * n + j];
                    gr[j] += static_cast<float>(acc);
                }
            }
        },
        "add_rows");
    if (shadow_eval()) {
        auto& sh = t.node()->shadow;
        sh.resize(static_cast<size_t>(m) * n);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                sh[static_cast<size_t>(i) * n + j] =
                    sv(an, static_cast<size_t>(i) * n + j) + sv(rn, static_cast<size_t>(j));
            }
        }
    }
    return t;
}

Tensor scale(const Tensor& a, float c) {
    return ew_unary(
        a, [c](float x) { return c * x; }, [c](float, float) { return c; },
        [c](double x) { return static_cast<double>(c) * x; }, "scale");
}

Tensor add_scalar(const Tensor& a, float c) {
    return ew_unary(
        a, [c](float x) { return x + c; }, [](float, float) { return 1.0f; },
        [c](double x) { return x + static_cast<double>(c); }, "add_scalar");
}

Tensor neg(const Tensor& a) {
    return ew_unary(
        a, [](float x) { return -x; }, [](float, float) { return -1.0f; },
        [](double x) { return -x; }, "neg");
}

Tensor abs(const Tensor& a) {
    return ew_unary(
        a, [](float x) { return std::fabs(x); },
        [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); },
        [](double x) { return std::fabs(x); }, "abs");
}

Tensor relu(const Tensor& a) {
    return ew_unary(
        a, [](float x) { return x > 0.0f ? x : 0.0f; },
        [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; },
        [](double x) { return x > 0.0 ? x : 0.0; }, "relu");
}

Tensor sigmoid(const Tensor& a) {
    return ew_unary(
        a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
        [](float, float y) { return y * (1.0f - y); },
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, "sigmoid");
}

Tensor exp(const Tensor& a) {
    return ew_unary(
        a, [](float x) { return std::exp(x); }, [](float, float y) { return y; },
        [](double x) { return std::exp(x); }, "exp");
}

Tensor log(const Tensor& a) {
    return ew_unary(
        a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; },
        [](double x) { return std::log(x); }, "log");
}

namespace {

Tensor reduce_all(const Tensor& a, bool take_mean, const char* name) {
    double acc = 0.0;
    for (float x : a.value()) acc += x;
    float denom = take_mean ? static_cast<float>(a.numel()) : 1.0f;
    float out = static_cast<float>(acc) / denom;
    auto an = a.node();
    Tensor t = Tensor::from_op(
        {1}, {out}, {a},
        [an, denom](TensorNode& self) {
            if (!an->requires_grad) return;
            float g = self.grad[0] / denom;
            float* ga = grad_of(an);
            for (size_t i = 0; i < an->value.size(); ++i) ga[i] += g;
        },
        name);
    double hi_acc = 0.0;
    for (size_t i = 0; i < an->value.size(); ++i) hi_acc += sv(an, i);
    t.node()->shadow = {hi_acc / static_cast<double>(denom)};
    return t;
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce_all(a, false, "sum"); }
Tensor mean(const Tensor& a) { return reduce_all(a, true, "mean"); }

Tensor softmax_rows(const Tensor& a) {
    require_rank2(a, "softmax_rows");
    int m = a.dim(0), n = a.dim(1);
    std::vector<float> out(a.value().size());
    const float* pa = a.value().data();
    for (int i = 0; i < m; ++i) {
        const float* xi = pa + static_cast<size_t>(i) * n;
        float* oi = out.data() + static_cast<size_t>(i) * n;
        float mx = xi[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            z += oi[j];
        }
        float inv = static_cast<float>(1.0 / z);
        for (int j = 0; j < n; ++j) oi[j] *= inv;
    }
    auto an = a.node();
    Tensor t = Tensor::from_op(
        {m, n}, std::move(out), {a},
        [an, m, n](TensorNode& self) {
            if (!an->requires_grad) return;
            const float* g = self.grad.data();
            const float* s = self.value.data();
            float* ga = grad_of(an);
            for (int i = 0; i < m; ++i) {
                const float* gi = g + static_cast<size_t>(i) * n;
                const float* si = s + static_cast<size_t>(i) * n;
                float* gai = ga + static_cast<size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += static_cast<double>(gi[j]) * si[j];
                for (int j = 0; j < n; ++j) gai[j] += si[j] * (gi[j] - static_cast<float>(dot));
            }
        },
        "softmax_rows");
    if (shadow_eval()) {
        auto& sh = t.node()->shadow;
        sh.resize(static_cast<size_t>(m) * n);
        for (int i = 0; i < m; ++i) {
            double mx = sv(an, static_cast<size_t>(i) * n);
            for (int j = 1; j < n; ++j) mx = std::max(mx, sv(an, static_cast<size_t>(i) * n + j));
            double z = 0.0;
            for (int j = 0; j < n; ++j) {
                double e = std::exp(sv(an, static_cast<size_t>(i) * n + j) - mx);
                sh[static_cast<size_t>(i) * n + j] = e;
                z += e;
            }
            for (int j = 0; j < n; ++j) sh[static_cast<size_t>(i) * n + j] /= z;
        }
    }
    return t;
}

Tensor smooth_l1(const Tensor& a, const Tensor& b, float beta) {
    require_same_shape(a, b, "smooth_l1");
    size_t n = a.value().size();
    const float* pa = a.value().data();
    const float* pb = b.value().data();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        float d = pa[i] - pb[i];
        float ad = std::fabs(d);
        acc += ad < beta ? 0.5f * d * d / beta : ad - 0.5f * beta;
    }
    float out = static_cast<float>(acc / static_cast<double>(n));
    auto an = a.node();
    auto bn = b.node();
    Tensor t = Tensor::from_op(
        {1}, {out}, {a, b},
        [an, bn, beta, n](TensorNode& self) {
            float g = self.grad[0] / static_cast<float>(n);
            const float* pa = an->value.data();
            const float* pb = bn->value.data();
            float* ga = an->requires_grad ? grad_of(an) : nullptr;
            float* gb = bn->requires_grad ? grad_of(bn) : nullptr;
            for (size_t i = 0; i < n; ++i) {
                float d = pa[i] - pb[i];
                float dd = std::fabs(d) < beta ? d / beta : (d > 0.0f ? 1.0f : -1.0f);
                if (ga) ga[i] += g * dd;
                if (gb) gb[i] -= g * dd;
            }
        },
        "smooth_l1");
    double hi_acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double d = sv(an, i) - sv(bn, i);
        double ad = std::fabs(d);
        hi_acc += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
    }
    t.node()->shadow = {hi_acc / static_cast<double>(n)};
    return t;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    return cross_entropy_rows(logits, targets, {});
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<float>& weights) {
    require_rank2(logits, "cross_entropy_rows");
    int m = logits.dim(0), n = logits.dim(1);
    if (static_cast<int>(targets.size()) != m) {
        throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
    }
    if (!weights.empty() && static_cast<int>(weights.size()) != m) {
        throw ShapeError("cross_entropy_rows: weight count does not match rows");
    }
    for (int t : targets) {
        if (t < 0 || t >= n) {
            throw ContractError("cross_entropy_rows: target class " + std::to_string(t) +
                                " out of range [0," + std::to_string(n) + ")");
        }
    }
    auto weight_of = [&weights](int i) {
        return weights.empty() ? 1.0f : weights[static_cast<size_t>(i)];
    };
    double wsum = 0.0;
    for (int i = 0; i < m; ++i) wsum += weight_of(i);
    if (wsum <= 0.0) throw ContractError("cross_entropy_rows: weights sum to zero");

    auto ln = logits.node();
    double acc = 0.0;
    for (int i = 0; i < m; ++i) {
        double mx = sv(ln, static_cast<size_t>(i) * n);
        for (int j = 1; j < n; ++j) mx = std::max(mx, sv(ln, static_cast<size_t>(i) * n + j));
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += std::exp(sv(ln, static_cast<size_t>(i) * n + j) - mx);
        acc += weight_of(i) * (std::log(z) + mx -
                               sv(ln, static_cast<size_t>(i) * n + targets[static_cast<size_t>(i)]));
    }
    float out = static_cast<float>(acc / wsum);
    std::vector<float> weights_copy = weights;
    Tensor t = Tensor::from_op(
        {1}, {out}, {logits},
        [ln, targets, weights_copy, wsum, m, n](TensorNode& self) {
            if (!ln->requires_grad) return;
            float g = self.grad[0] / static_cast<float>(wsum);
            const float* pl = ln->value.data();
            float* gl = grad_of(ln);
            for (int i = 0; i < m; ++i) {
                const float* xi = pl + static_cast<size_t>(i) * n;
                float* gi = gl + static_cast<size_t>(i) * n;
                float w = weights_copy.empty() ? 1.0f : weights_copy[static_cast<size_t>(i)];
                float mx = xi[0];
                for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
                double z = 0.0;
                for (int j = 0; j < n; ++j) z += std::exp(static_cast<double>(xi[j]) - mx);
                for (int j = 0; j < n; ++j) {
                    float p = static_cast<float>(std::exp(static_cast<double>(xi[j]) - mx) / z);
                    gi[j] += g * w * (p - (j == targets[static_cast<size_t>(i)] ? 1.0f : 0.0f));
                }
            }
        },
        "cross_entropy_rows");
    t.node()->shadow = {acc / wsum};
    return t;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& rows) {
    require_rank2(a, "gather_rows");
    int m = a.dim(0), n = a.dim(1);
    for (int r : rows) {
        if (r < 0 || r >= m) {
            throw ContractError("gather_rows: row " + std::to_string(r) + " out of range [0," +
                                std::to_string(m) + ")");
        }
    }
    int k = static_cast<int>(rows.size());
    std::vector<float> out(static_cast<size_t>(k) * n);
    const float* pa = a.value().data();
    for (int i = 0; i < k; ++i) {
        std::copy_n(pa + static_cast<size_t>(rows[static_cast<size_t>(i)]) * n, n,
                    out.data() + static_cast<size_t>(i) * n);
    }
    auto an = a.node();
    Tensor t = Tensor::from_op(
        {k, n}, std::move(out), {a},
        [an, rows, n](TensorNode& self) {
            if (!an->requires_grad) return;
            const float* g = self.grad.data();
            float* ga = grad_of(an);
            for (size_t i = 0; i < rows.size(); ++i) {
                const float* gi = g + i * static_cast<size_t>(n);
                float* gr = ga + static_cast<size_t>(rows[i]) * n;
                for (int j = 0; j < n; ++j) gr[j] += gi[j];
            }
        },
        "gather_rows");
    if (shadow_eval()) {
        auto& sh = t.node()->shadow;
        sh.resize(static_cast<size_t>(k) * n);
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < n; ++j) {
                sh[static_cast<size_t>(i) * n + j] =
                    sv(an, static_cast<size_t>(rows[static_cast<size_t>(i)]) * n + j);
            }
        }
    }
    return t;
}

Tensor slice_cols(const Tensor& a, int col0, int ncols) {
    require_rank2(a, "slice_cols");
    int m = a.dim(0), n = a.dim(1);
    if (col0 < 0 || ncols <= 0 || col0 + ncols > n) {
        throw ShapeError("slice_cols: [" + std::to_string(col0) + "," +
                         std::to_string(col0 + ncols) + ") out of " + shape_str(a.shape()));
    }
    std::vector<float> out(static_cast<size_t>(m) * ncols);
    const float* pa = a.value().data();
    for (int i = 0; i < m; ++i) {
        std::copy_n(pa + static_cast<size_t>(i) * n + col0, ncols,
                    out.data() + static_cast<size_t>(i) * ncols);
    }
    auto an = a.node();
    Tensor t = Tensor::from_op(
        {m, ncols}, std::move(out), {a},
        [an, col0, ncols, m, n](TensorNode& self) {
            if (!an->requires_grad) return;
            const float* g = self.grad.data();
            float* ga = grad_of(an);
            for (int i = 0; i < m; ++i) {
                const float* gi = g + static_cast<size_t>(i) * ncols;
                float* gr = ga + static_cast<size_t>(i) * n + col0;
                for (int j = 0; j < ncols; ++j) gr[j] += gi[j];
            }
        },
        "slice_cols");
    if (want_shadow(t)) {
        auto& sh = t.node()->shadow;
        sh.resize(static_cast<size_t>(m) * ncols);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < ncols; ++j) {
                sh[static_cast<size_t>(i) * ncols + j] =
                    sv(an, static_cast<size_t>(i) * n + col0 + j);
            }
        }
    }
    return t;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    int m = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) {
            throw ShapeError("concat_cols: incompatible part " + shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    std::vector<float> out(static_cast<size_t>(m) * total);
    int off = 0;
    for (const auto& p : parts) {
        int n = p.dim(1);
        const float* pp = p.value().data();
        for (int i = 0; i < m; ++i) {
            std::copy_n(pp + static_cast<size_t>(i) * n, n,
                        out.data() + static_cast<size_t>(i) * total + off);
        }
        off += n;
    }
    std::vector<NodePtr> nodes;
    std::vector<int> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.dim(1));
    }
    Tensor t = Tensor::from_op(
        {m, total}, std::move(out), parts,
        [nodes, widths, m, total](TensorNode& self) {
            const float* g = self.grad.data();
            int off = 0;
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                int n = widths[pi];
                if (nodes[pi]->requires_grad) {
                    float* gp = grad_of(nodes[pi]);
                    for (int i = 0; i < m; ++i) {
                        const float* gi = g + static_cast<size_t>(i) * total + off;
                        float* gpi = gp + static_cast<size_t>(i) * n;
                        for (int j = 0; j < n; ++j) gpi[j] += gi[j];
                    }
                }
                off += n;
            }
        },
        "concat_cols");
    if (shadow_eval()) {
        auto& sh = t.node()->shadow;
        sh.resize(static_cast<size_t>(m) * total);
        int offset = 0;
        for (size_t pi = 0; pi < nodes.size(); ++pi) {
            int n = widths[pi];
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    sh[static_cast<size_t>(i) * total + offset + j] =
                        sv(nodes[pi], static_cast<size_t>(i) * n + j);
                }
            }
            offset += n;
        }
    }
    return t;
}

Tensor pool_rows(const Tensor& features, const std::vector<std::vector<Tap>>& taps) {
    require_rank2(features, "pool_rows");
    int rows = features.dim(0), d = features.dim(1);
    int n = static_cast<int>(taps.size());
    std::vector<float> out(static_cast<size_t>(n) * d, 0.0f);
    const float* pf = features.value().data();
    for (int i = 0; i < n; ++i) {
        float* oi = out.data() + static_cast<size_t>(i) * d;
        for (const Tap& t : taps[static_cast<size_t>(i)]) {
            if (t.row < 0 || t.row >= rows) {
                throw ContractError("pool_rows: tap row " + std::to_string(t.row) +
                                    " out of range [0," + std::to_string(rows) + ")");
            }
            const float* fr = pf + static_cast<size_t>(t.row) * d;
            for (int j = 0; j < d; ++j) oi[j] += t.weight * fr[j];
        }
    }
    auto fn = features.node();
    Tensor t = Tensor::from_op(
        {n, d}, std::move(out), {features},
        [fn, taps, d](TensorNode& self) {
            if (!fn->requires_grad) return;
            const float* g = self.grad.data();
            float* gf = grad_of(fn);
            std::vector<double> staged(fn->value.size(), 0.0);
            for (size_t i = 0; i < taps.size(); ++i) {
                const float* gi = g + i * static_cast<size_t>(d);
                for (const Tap& t : taps[i]) {
                    double* gr = staged.data() + static_cast<size_t>(t.row) * d;
                    for (int j = 0; j < d; ++j) gr[j] += static_cast<double>(t.weight) * gi[j];
                }
            }
            for (size_t i = 0; i < staged.size(); ++i) {
                if (staged[i] != 0.0) gf[i] += static_cast<float>(staged[i]);
            }
        },
        "pool_rows");
    if (shadow_eval()) {
        auto& sh = t.node()->shadow;
        sh.assign(static_cast<size_t>(n) * d, 0.0);
        for (int i = 0; i < n; ++i) {
            for (const Tap& tap : taps[static_cast<size_t>(i)]) {
                for (int j = 0; j < d; ++j) {
                    sh[static_cast<size_t>(i) * d + j] +=
                        static_cast<double>(tap.weight) *
                        sv(fn, static_cast<size_t>(tap.row) * d + j);
                }
            }
        }
    }
    return t;
}

}  // namespace lodet::nn
