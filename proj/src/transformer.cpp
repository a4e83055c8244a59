#include "mtnas/transformer.hpp"

#include <cmath>

namespace mtnas {

namespace o = ops;

std::vector<Tensor*> BlockWeights::tensors() {
  return {&qkv_w, &qkv_b, &proj_w, &proj_b, &ffn1_w, &ffn1_b,
          &ffn2_w, &ffn2_b, &ln1_g, &ln1_b, &ln2_g, &ln2_b};
}

Tensor patch_embed(const Tensor& image, const Tensor& w, const Tensor& b, int patch) {
  if (image.rank() != 3) throw ShapeError("patch_embed: expected (H, W, C) image");
  int h = image.shape()[0], wd = image.shape()[1], c = image.shape()[2];
  if (h % patch != 0 || wd % patch != 0) {
    throw ShapeError("patch_embed: image side not divisible by patch size");
  }
  int n = (h / patch) * (wd / patch);
  Tensor patches = o::window_partition(image, patch);  // (n, patch*patch, c)
  patches = o::reshape(patches, {n, patch * patch * c});
  Tensor tokens = o::linear(patches, w, b);
  int e = w.shape()[0];
  return o::reshape(tokens, {h / patch, wd / patch, e});
}

namespace {

// Replicates a per-window (B, T, T) additive mask across `heads` so it can
// be added to (B*heads, T, T) attention scores. Mask is a constant.
Tensor repeat_mask_per_head(const Tensor& mask, int heads) {
  int b = mask.shape()[0], t = mask.shape()[1];
  Array out(static_cast<Eigen::Index>(b) * heads * t * t);
  for (int i = 0; i < b; ++i) {
    for (int h = 0; h < heads; ++h) {
      std::copy_n(mask.value().data() + static_cast<Eigen::Index>(i) * t * t, t * t,
                  out.data() + (static_cast<Eigen::Index>(i) * heads + h) * t * t);
    }
  }
  return Tensor::from({b * heads, t, t}, std::move(out));
}

}  // namespace

Tensor wsa_block(const Tensor& x, const BlockWeights& w, int heads, int win) {
  if (x.rank() != 3) throw ShapeError("wsa_block: expected (H, W, E) feature map");
  int h = x.shape()[0], wd = x.shape()[1], e = x.shape()[2];
  if (heads < 1 || e % heads != 0) {
    throw ConfigError("wsa_block: " + std::to_string(heads) +
                      " heads do not partition " + std::to_string(e) + " channels");
  }
  int hd = e / heads;
  int win_eff = std::min(win, std::max(h, wd));
  int n = h * wd;

  Tensor flat = o::reshape(x, {n, e});
  Tensor normed = o::layer_norm(flat, w.ln1_g, w.ln1_b);
  Tensor qkv = o::linear(normed, w.qkv_w, w.qkv_b);  // (n, 3e)
  Tensor windows = o::window_partition(o::reshape(qkv, {h, wd, 3 * e}), win_eff);
  int b = windows.shape()[0], t = windows.shape()[1];

  auto split_heads = [&](int part) {
    Tensor s = o::slice(windows, {0, 0, part * e}, {b, t, e});
    s = o::reshape(s, {b, t, heads, hd});
    s = o::transpose(s, {0, 2, 1, 3});
    return o::reshape(s, {b * heads, t, hd});
  };
  Tensor q = split_heads(0), k = split_heads(1), v = split_heads(2);

  Tensor scores = o::scale(o::matmul(q, o::transpose(k, {0, 2, 1})), 1.0 / std::sqrt(hd));
  Tensor mask = o::window_pad_mask(h, wd, win_eff);
  if (mask.defined()) scores = o::add(scores, repeat_mask_per_head(mask, heads));
  Tensor attn = o::softmax(scores, 2);
  Tensor ctx = o::matmul(attn, v);  // (b*heads, t, hd)
  ctx = o::reshape(ctx, {b, heads, t, hd});
  ctx = o::transpose(ctx, {0, 2, 1, 3});
  ctx = o::reshape(ctx, {b, t, e});
  ctx = o::window_reverse(ctx, h, wd, win_eff);
  ctx = o::reshape(ctx, {n, e});
  Tensor attended = o::add(flat, o::linear(ctx, w.proj_w, w.proj_b));

  Tensor normed2 = o::layer_norm(attended, w.ln2_g, w.ln2_b);
  Tensor f = o::linear(normed2, w.ffn1_w, w.ffn1_b);
  f = o::gelu(f);
  f = o::linear(f, w.ffn2_w, w.ffn2_b);
  Tensor out = o::add(attended, f);
  return o::reshape(out, {h, wd, e});
}

Tensor patch_merge(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3) throw ShapeError("patch_merge: expected (H, W, E)");
  int h = x.shape()[0], wd = x.shape()[1], e = x.shape()[2];
  if (h % 2 != 0 || wd % 2 != 0) throw ShapeError("patch_merge: odd spatial side");
  Tensor grouped = o::window_partition(x, 2);  // (h/2 * wd/2, 4, e)
  grouped = o::reshape(grouped, {h / 2 * (wd / 2), 4 * e});
  Tensor merged = o::linear(grouped, w, b);
  return o::reshape(merged, {h / 2, wd / 2, w.shape()[0]});
}

Tensor upsample(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3) throw ShapeError("upsample: expected (H, W, E)");
  Tensor up = o::nearest_upsample_2x(x);
  int h = up.shape()[0], wd = up.shape()[1], e = up.shape()[2];
  Tensor flat = o::reshape(up, {h * wd, e});
  Tensor projected = o::linear(flat, w, b);
  return o::reshape(projected, {h, wd, w.shape()[0]});
}

Tensor dense_head(const std::vector<std::pair<int, Tensor>>& features,
                  const std::map<int, std::pair<Tensor, Tensor>>& proj,
                  int out_side) {
  if (features.empty()) throw ArgumentError("dense_head: no input features");
  Tensor acc;
  for (const auto& [level, feat] : features) {
    auto it = proj.find(level);
    if (it == proj.end()) throw ConfigError("dense_head: no projection for level " + std::to_string(level));
    int h = feat.shape()[0], wd = feat.shape()[1], e = feat.shape()[2];
    Tensor flat = o::reshape(feat, {h * wd, e});
    Tensor y = o::linear(flat, it->second.first, it->second.second);
    int c = it->second.first.shape()[0];
    y = o::reshape(y, {h, wd, c});
    while (y.shape()[0] < out_side) y = o::nearest_upsample_2x(y);
    if (y.shape()[0] != out_side) {
      throw ConfigError("dense_head: feature side does not scale to output side");
    }
    acc = acc.defined() ? o::add(acc, y) : y;
  }
  return acc;
}

Tensor point_head(const std::vector<std::pair<int, Tensor>>& features,
                  const std::map<int, std::pair<Tensor, Tensor>>& proj,
                  const Tensor& w2, const Tensor& b2) {
  if (features.empty()) throw ArgumentError("point_head: no input features");
  Tensor acc;
  for (const auto& [level, feat] : features) {
    auto it = proj.find(level);
    if (it == proj.end()) throw ConfigError("point_head: no projection for level " + std::to_string(level));
    Tensor pooled = o::global_avg_pool(feat);  // (E)
    Tensor hid = o::linear(o::reshape(pooled, {1, pooled.shape()[0]}),
                           it->second.first, it->second.second);
    acc = acc.defined() ? o::add(acc, hid) : hid;
  }
  return o::linear(o::gelu(acc), w2, b2);
}

}  // namespace mtnas
