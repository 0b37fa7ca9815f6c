#pragma once

#include <array>
#include <vector>

#include "lodet/tensor.hpp"

namespace lodet::nn {

// Dense op library over rank-1/2 tensors, each op recording its gradient
// rule. Matrix layout is row-major throughout.

// c[m,n] = a[m,k] * b[k,n]; gradient rule da = g*b^T, db = a^T*g.
Tensor matmul(const Tensor& a, const Tensor& b);

// y[n,out] = x[n,in] * W^T + b; the layer-shaped primitive used by Linear.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear_no_bias(const Tensor& x, const Tensor& w);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

// a[m,n] + row[n] broadcast over rows.
Tensor add_rows(const Tensor& a, const Tensor& row);

Tensor scale(const Tensor& a, float c);
Tensor add_scalar(const Tensor& a, float c);
Tensor neg(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Row-wise numerically stable softmax over the last dimension of a 2-D tensor.
Tensor softmax_rows(const Tensor& a);

// Mean Huber loss with transition point beta. Gradient flows to both sides.
Tensor smooth_l1(const Tensor& a, const Tensor& b, float beta = 1.0f);

// Mean softmax cross-entropy of logits[n,k] against integer targets. The
// weighted overload takes the weighted mean (sum w_i ce_i / sum w_i).
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<float>& weights);

// Row selection / layout ops.
Tensor gather_rows(const Tensor& a, const std::vector<int>& rows);
Tensor slice_cols(const Tensor& a, int col0, int ncols);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Weighted gather used for bilinear feature pooling: each output row i is
// sum_k taps[i][k].weight * features[taps[i][k].row]. Tap positions and
// weights are constants; gradient flows only into `features`.
struct Tap {
    int row;
    float weight;
};
Tensor pool_rows(const Tensor& features, const std::vector<std::vector<Tap>>& taps);

}  // namespace lodet::nn
