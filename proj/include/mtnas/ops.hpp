#pragma once

#include <vector>

#include "mtnas/tensor.hpp"

namespace mtnas::ops {

// Elementwise / arithmetic.
Tensor add(const Tensor& a, const Tensor& b);  // same shape, or rank-1 b broadcast over the last axis
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// Linear algebra. 2D (M,K)x(K,N) or batched 3D (B,M,K)x(B,K,N).
Tensor matmul(const Tensor& a, const Tensor& b);
// y = x W^T + b with x (N,K), w (O,K), b (O).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Normalization.
Tensor softmax(const Tensor& a, int axis);
// Normalizes along the last axis; zero-variance lanes map to zero (eps=1e-5).
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias);

// Shape manipulation.
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, const std::vector<int>& perm);
Tensor slice(const Tensor& a, const std::vector<int>& starts,
             const std::vector<int>& extents);
Tensor concat(const std::vector<Tensor>& ts, int axis);

// Reductions.
Tensor sum(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean(const Tensor& a, int axis);
Tensor mean_all(const Tensor& a);

// Losses.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
Tensor l1_loss(const Tensor& pred, const Tensor& target);

// Spatial kernels on (H, W, C) maps.
// Partitions into non-overlapping win x win windows, zero-padding H and W
// up to the next multiple of win: -> (n_windows, win*win, C).
Tensor window_partition(const Tensor& a, int win);
Tensor window_reverse(const Tensor& a, int height, int width, int win);
Tensor nearest_upsample_2x(const Tensor& a);
Tensor avgpool_2x(const Tensor& a);
Tensor global_avg_pool(const Tensor& a);

// Key-position mask for padded windows: (n_windows, t, t) with 0 on valid
// keys and -1e9 on pad keys. Empty tensor when win divides both sides.
Tensor window_pad_mask(int height, int width, int win);

}  // namespace mtnas::ops
