#pragma once

#include <map>
#include <utility>
#include <vector>

#include "mtnas/ops.hpp"
#include "mtnas/search_space.hpp"
#include "mtnas/tensor.hpp"

namespace mtnas {

// Weights of one WSA+FFN block. Shapes follow the owning store: supernet
// maxima for the shared tensors, or exactly-sized slices for a subnet.
struct BlockWeights {
  Tensor qkv_w, qkv_b;    // (3E, E), (3E)
  Tensor proj_w, proj_b;  // (E, E), (E)
  Tensor ffn1_w, ffn1_b;  // (H, E), (H) with H = mlp_ratio * E
  Tensor ffn2_w, ffn2_b;  // (E, H), (E)
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;  // (E)

  std::vector<Tensor*> tensors();
};

struct HeadSpec {
  TaskId task;
  HeadShape shape;
};

// image (H, W, C) -> (H/patch, W/patch, E) token map, linear projection of
// non-overlapping patches. w is (E, patch*patch*C).
Tensor patch_embed(const Tensor& image, const Tensor& w, const Tensor& b,
                   int patch = kPatchSize);

// Pre-LN residual block: x + WSA(LN(x)), then + FFN(LN(.)). Attention is
// restricted to win x win windows; win is clipped to the feature side and
// pad positions are masked out when win does not divide the side.
Tensor wsa_block(const Tensor& x, const BlockWeights& w, int heads, int win);

// 2x2 patch concat + linear: (H, W, E_in) -> (H/2, W/2, E_out),
// w (E_out, 4*E_in).
Tensor patch_merge(const Tensor& x, const Tensor& w, const Tensor& b);

// Nearest 2x + linear: (H, W, E_in) -> (2H, 2W, E_out), w (E_out, E_in).
Tensor upsample(const Tensor& x, const Tensor& w, const Tensor& b);

// Per-level feature(s) -> full-resolution map (out_side, out_side, C_out).
// Multi-scale inputs are projected per level and summed.
Tensor dense_head(const std::vector<std::pair<int, Tensor>>& features,
                  const std::map<int, std::pair<Tensor, Tensor>>& proj,
                  int out_side);

// Global average pool + 2-layer MLP -> (1, n_classes). Multi-scale inputs
// share the second layer; per-level first layers are summed pre-activation.
Tensor point_head(const std::vector<std::pair<int, Tensor>>& features,
                  const std::map<int, std::pair<Tensor, Tensor>>& proj,
                  const Tensor& w2, const Tensor& b2);

}  // namespace mtnas
