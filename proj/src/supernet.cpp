#include "mtnas/supernet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace mtnas {

namespace o = ops;
using nlohmann::json;

namespace {

Tensor trunc_normal(Shape shape, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Array a(shape_size(shape));
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    double x;
    do {
      x = dist(rng);
    } while (std::abs(x) > 2 * sigma);
    a[i] = x;
  }
  return Tensor::from(std::move(shape), std::move(a), /*requires_grad=*/true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor ones_param(Shape shape) {
  return Tensor::constant(std::move(shape), 1.0, true);
}

int ffn_hidden(double mlp_ratio, int embed) {
  return static_cast<int>(std::lround(mlp_ratio * embed));
}

BlockWeights init_block(int e_max, int h_max, Rng& rng) {
  BlockWeights b;
  b.qkv_w = trunc_normal({3 * e_max, e_max}, 0.02, rng);
  b.qkv_b = zeros_param({3 * e_max});
  b.proj_w = trunc_normal({e_max, e_max}, 0.02, rng);
  b.proj_b = zeros_param({e_max});
  b.ffn1_w = trunc_normal({h_max, e_max}, 0.02, rng);
  b.ffn1_b = zeros_param({h_max});
  b.ffn2_w = trunc_normal({e_max, h_max}, 0.02, rng);
  b.ffn2_b = zeros_param({e_max});
  b.ln1_g = ones_param({e_max});
  b.ln1_b = zeros_param({e_max});
  b.ln2_g = ones_param({e_max});
  b.ln2_b = zeros_param({e_max});
  return b;
}

// Stable (name, tensor) enumeration shared by parameters() and checkpoints.
std::vector<std::pair<std::string, Tensor>> named_tensors(const Supernet& sn,
                                                          bool include_logits) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch.w", sn.patch_w);
  out.emplace_back("patch.b", sn.patch_b);
  for (const auto& [id, blocks] : sn.layers) {
    std::string base = layer_component(id).id;
    for (size_t i = 0; i < blocks.size(); ++i) {
      const BlockWeights& b = blocks[i];
      std::string p = base + ".blk" + std::to_string(i) + ".";
      out.emplace_back(p + "qkv_w", b.qkv_w);
      out.emplace_back(p + "qkv_b", b.qkv_b);
      out.emplace_back(p + "proj_w", b.proj_w);
      out.emplace_back(p + "proj_b", b.proj_b);
      out.emplace_back(p + "ffn1_w", b.ffn1_w);
      out.emplace_back(p + "ffn1_b", b.ffn1_b);
      out.emplace_back(p + "ffn2_w", b.ffn2_w);
      out.emplace_back(p + "ffn2_b", b.ffn2_b);
      out.emplace_back(p + "ln1_g", b.ln1_g);
      out.emplace_back(p + "ln1_b", b.ln1_b);
      out.emplace_back(p + "ln2_g", b.ln2_g);
      out.emplace_back(p + "ln2_b", b.ln2_b);
    }
  }
  for (const auto& [level, wb] : sn.pools) {
    std::string p = pool_component(level).id + ".";
    out.emplace_back(p + "w", wb.first);
    out.emplace_back(p + "b", wb.second);
  }
  for (const auto& [id, wb] : sn.ups) {
    std::string p = up_component(id).id + ".";
    out.emplace_back(p + "w", wb.first);
    out.emplace_back(p + "b", wb.second);
  }
  for (const auto& [task, store] : sn.heads) {
    std::string p = head_component(task).id + ".";
    for (const auto& [level, wb] : store.proj) {
      std::string q = p + "proj" + std::to_string(level) + ".";
      out.emplace_back(q + "w", wb.first);
      out.emplace_back(q + "b", wb.second);
    }
    if (store.w2.defined()) {
      out.emplace_back(p + "mlp.w2", store.w2);
      out.emplace_back(p + "mlp.b2", store.b2);
    }
  }
  if (include_logits) out.emplace_back("skeleton_logits", sn.skeleton_logits);
  return out;
}

}  // namespace

std::vector<Tensor> Supernet::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors(*this, /*include_logits=*/false)) {
    out.push_back(t);
  }
  return out;
}

void Supernet::zero_grads() {
  for (auto& t : parameters()) t.zero_grad();
  skeleton_logits.zero_grad();
}

Supernet init_supernet(const CellSpace& space, SkeletonMode mode,
                       const std::map<TaskId, HeadShape>& head_shapes,
                       std::uint64_t seed) {
  space.validate();
  // Attention requires every head choice to partition every embed choice at
  // its level; spaces that only serve counting/sampling may skip this.
  for (int level = 1; level <= 4; ++level) {
    for (int h : space.head_choices[level - 1]) {
      for (int e : space.embed_choices[level - 1]) {
        if (e % h != 0) {
          throw ConfigError("head count " + std::to_string(h) +
                            " does not divide embed dim " + std::to_string(e) +
                            " at level " + std::to_string(level));
        }
      }
    }
  }
  Supernet sn;
  sn.space = space;
  sn.mode = mode;
  sn.head_shapes = head_shapes;
  sn.graph = full_grid_graph(mode, head_shapes);
  Rng rng(seed);

  int e1 = space.max_embed(1);
  sn.patch_w = trunc_normal({e1, kPatchSize * kPatchSize * kImageChannels}, 0.02, rng);
  sn.patch_b = zeros_param({e1});

  for (const LayerId& id : all_layer_ids()) {
    int e_max = space.max_embed(id.level);
    int h_max = ffn_hidden(space.max_mlp_ratio(), e_max);
    std::vector<BlockWeights> blocks;
    for (int i = 0; i < space.max_depth(); ++i) blocks.push_back(init_block(e_max, h_max, rng));
    sn.layers[id] = std::move(blocks);
    if (!id.is_encoder()) {
      int e_in = space.max_embed(id.level + 1);
      sn.ups[id] = {trunc_normal({e_max, e_in}, 0.02, rng), zeros_param({e_max})};
    }
  }
  for (int level = 1; level <= 3; ++level) {
    int e_in = space.max_embed(level);
    int e_out = space.max_embed(level + 1);
    sn.pools[level] = {trunc_normal({e_out, 4 * e_in}, 0.02, rng), zeros_param({e_out})};
  }
  for (const auto& [task, shape] : head_shapes) {
    HeadStore store;
    for (int level = 1; level <= 4; ++level) {
      int e_max = space.max_embed(level);
      int rows = shape.dense ? shape.out_channels : shape.hidden;
      store.proj[level] = {trunc_normal({rows, e_max}, 0.02, rng), zeros_param({rows})};
    }
    if (!shape.dense) {
      store.w2 = trunc_normal({shape.out_channels, shape.hidden}, 0.02, rng);
      store.b2 = zeros_param({shape.out_channels});
    }
    sn.heads[task] = std::move(store);
    sn.task_order.push_back(task);
  }
  int n_skeletons = static_cast<int>(enumerate_skeletons(mode).size());
  int n_tasks = std::max<int>(1, static_cast<int>(head_shapes.size()));
  sn.skeleton_logits = Tensor::zeros({n_skeletons, n_tasks}, true);
  return sn;
}

namespace {

// Prefix slice of the stacked QKV store: the first E rows of each third.
Tensor slice_qkv(const Tensor& full, int e_max, int e, bool is_bias) {
  std::vector<Tensor> parts;
  for (int t = 0; t < 3; ++t) {
    if (is_bias) {
      parts.push_back(o::slice(full, {t * e_max}, {e}));
    } else {
      parts.push_back(o::slice(full, {t * e_max, 0}, {e, e}));
    }
  }
  return o::concat(parts, 0);
}

}  // namespace

SubnetView slice(const Supernet& sn, const CellConfig& cfg) {
  cfg.validate(sn.space);
  SubnetView view;
  view.cfg = cfg;
  int e1 = cfg.at({1, 1}).embed;
  view.patch_w = o::slice(sn.patch_w, {0, 0}, {e1, sn.patch_w.shape()[1]});
  view.patch_b = o::slice(sn.patch_b, {0}, {e1});

  for (const auto& [id, blocks] : sn.layers) {
    const LayerChoice& lc = cfg.at(id);
    int e_max = sn.space.max_embed(id.level);
    int e = lc.embed;
    std::vector<BlockWeights> sliced;
    for (int i = 0; i < lc.depth; ++i) {
      const BlockWeights& full = blocks[i];
      int h = ffn_hidden(lc.blocks[i].mlp_ratio, e);
      BlockWeights b;
      b.qkv_w = slice_qkv(full.qkv_w, e_max, e, false);
      b.qkv_b = slice_qkv(full.qkv_b, e_max, e, true);
      b.proj_w = o::slice(full.proj_w, {0, 0}, {e, e});
      b.proj_b = o::slice(full.proj_b, {0}, {e});
      b.ffn1_w = o::slice(full.ffn1_w, {0, 0}, {h, e});
      b.ffn1_b = o::slice(full.ffn1_b, {0}, {h});
      b.ffn2_w = o::slice(full.ffn2_w, {0, 0}, {e, h});
      b.ffn2_b = o::slice(full.ffn2_b, {0}, {e});
      b.ln1_g = o::slice(full.ln1_g, {0}, {e});
      b.ln1_b = o::slice(full.ln1_b, {0}, {e});
      b.ln2_g = o::slice(full.ln2_g, {0}, {e});
      b.ln2_b = o::slice(full.ln2_b, {0}, {e});
      sliced.push_back(std::move(b));
    }
    view.blocks[id] = std::move(sliced);
  }

  for (const auto& [level, wb] : sn.pools) {
    int e_in_max = sn.space.max_embed(level);
    int e_in = cfg.at({level, level}).embed;
    int e_out = cfg.at({level + 1, level + 1}).embed;
    std::vector<Tensor> groups;
    for (int g = 0; g < 4; ++g) {
      groups.push_back(o::slice(wb.first, {0, g * e_in_max}, {e_out, e_in}));
    }
    view.pools[level] = {o::concat(groups, 1), o::slice(wb.second, {0}, {e_out})};
  }

  for (const auto& [id, wb] : sn.ups) {
    int e_in = cfg.at({id.level + 1, id.encode_depth}).embed;
    int e_out = cfg.at(id).embed;
    view.ups[id] = {o::slice(wb.first, {0, 0}, {e_out, e_in}),
                    o::slice(wb.second, {0}, {e_out})};
  }

  for (const auto& [task, store] : sn.heads) {
    SubnetHead head;
    for (const LayerId& id : all_layer_ids()) {
      const auto& wb = store.proj.at(id.level);
      int e = cfg.at(id).embed;
      head.proj[id] = {o::slice(wb.first, {0, 0}, {wb.first.shape()[0], e}), wb.second};
    }
    head.w2 = store.w2;
    head.b2 = store.b2;
    view.heads[task] = std::move(head);
  }
  return view;
}

namespace {
Tensor detach(const Tensor& t) {
  if (!t.defined()) return t;
  return Tensor::from(t.shape(), t.value());
}
}  // namespace

SubnetView SubnetView::detached() const {
  SubnetView out;
  out.cfg = cfg;
  out.patch_w = detach(patch_w);
  out.patch_b = detach(patch_b);
  for (const auto& [id, bs] : blocks) {
    std::vector<BlockWeights> copy;
    for (const BlockWeights& b : bs) {
      BlockWeights d;
      d.qkv_w = detach(b.qkv_w);
      d.qkv_b = detach(b.qkv_b);
      d.proj_w = detach(b.proj_w);
      d.proj_b = detach(b.proj_b);
      d.ffn1_w = detach(b.ffn1_w);
      d.ffn1_b = detach(b.ffn1_b);
      d.ffn2_w = detach(b.ffn2_w);
      d.ffn2_b = detach(b.ffn2_b);
      d.ln1_g = detach(b.ln1_g);
      d.ln1_b = detach(b.ln1_b);
      d.ln2_g = detach(b.ln2_g);
      d.ln2_b = detach(b.ln2_b);
      copy.push_back(std::move(d));
    }
    out.blocks[id] = std::move(copy);
  }
  for (const auto& [level, wb] : pools) out.pools[level] = {detach(wb.first), detach(wb.second)};
  for (const auto& [id, wb] : ups) out.ups[id] = {detach(wb.first), detach(wb.second)};
  for (const auto& [task, h] : heads) {
    SubnetHead d;
    for (const auto& [id, wb] : h.proj) d.proj[id] = {detach(wb.first), detach(wb.second)};
    d.w2 = detach(h.w2);
    d.b2 = detach(h.b2);
    out.heads[task] = std::move(d);
  }
  return out;
}

std::array<CellConfig, 4> sandwich_sample(const CellSpace& space, Rng& rng) {
  return {sample_cell_config(space, rng, SampleMode::kMax),
          sample_cell_config(space, rng, SampleMode::kMin),
          sample_cell_config(space, rng, SampleMode::kUniform),
          sample_cell_config(space, rng, SampleMode::kUniform)};
}

std::map<LayerId, Tensor> forward_grid(const SubnetView& view,
                                       const MultiTaskGraph& graph,
                                       const Tensor& image) {
  std::map<LayerId, Tensor> feats;
  auto apply_blocks = [&view](Tensor x, LayerId id) {
    const LayerChoice& lc = view.cfg.at(id);
    const auto& blocks = view.blocks.at(id);
    for (int i = 0; i < lc.depth; ++i) {
      x = wsa_block(x, blocks[i], lc.blocks[i].heads, lc.blocks[i].window);
    }
    return x;
  };

  Tensor cur = patch_embed(image, view.patch_w, view.patch_b);
  for (int level = 1; level <= 4; ++level) {
    LayerId enc{level, level};
    if (!graph.has(layer_component(enc).id)) break;
    if (level > 1) {
      const auto& pool = view.pools.at(level - 1);
      cur = patch_merge(cur, pool.first, pool.second);
    }
    cur = apply_blocks(cur, enc);
    feats[enc] = cur;
  }
  for (int d = 2; d <= 4; ++d) {
    for (int level = d - 1; level >= 1; --level) {
      LayerId dec{level, d};
      if (!graph.has(layer_component(dec).id)) continue;
      LayerId src{level + 1, d};
      auto fit = feats.find(src);
      if (fit == feats.end()) {
        throw ConfigError("decoder layer " + layer_component(dec).id +
                          " has no upstream feature in graph");
      }
      const auto& up = view.ups.at(dec);
      Tensor x = upsample(fit->second, up.first, up.second);
      feats[dec] = apply_blocks(x, dec);
    }
  }
  return feats;
}

Tensor run_task_head(const SubnetView& view, TaskId task, const HeadShape& shape,
                     const Skeleton& skeleton,
                     const std::map<LayerId, Tensor>& features) {
  const SubnetHead& head = view.heads.at(task);
  std::vector<std::pair<int, Tensor>> inputs;
  std::map<int, std::pair<Tensor, Tensor>> proj;
  for (const LayerId& layer : skeleton.output_layers()) {
    auto fit = features.find(layer);
    if (fit == features.end()) {
      throw ConfigError("skeleton output layer " + layer_component(layer).id +
                        " not present in computed features");
    }
    inputs.emplace_back(layer.level, fit->second);
    proj[layer.level] = head.proj.at(layer);
  }
  if (shape.dense) return dense_head(inputs, proj, kImageSide);
  return point_head(inputs, proj, head.w2, head.b2);
}

namespace {

constexpr char kMagic[8] = {'M', 'T', 'N', 'A', 'S', 'C', 'K', '1'};

}  // namespace

void save_checkpoint(const Supernet& sn, const std::string& path) {
  auto entries = named_tensors(sn, /*include_logits=*/true);
  json manifest;
  manifest["version"] = 1;
  manifest["step"] = sn.step;
  manifest["mode"] = to_string(sn.mode);
  manifest["preset"] = sn.space.preset;
  json tasks = json::array();
  for (const auto& [task, shape] : sn.head_shapes) {
    tasks.push_back({{"id", task},
                     {"dense", shape.dense},
                     {"out_channels", shape.out_channels},
                     {"hidden", shape.hidden}});
  }
  manifest["tasks"] = tasks;
  json items = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : entries) {
    items.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size());
  }
  manifest["entries"] = items;
  std::string header = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PersistenceError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 8);
  std::uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, t] : entries) {
    out.write(reinterpret_cast<const char*>(t.value().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw PersistenceError("checkpoint write failed: " + path);
}

Supernet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError("cannot open checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw PersistenceError("bad checkpoint magic in " + path);
  }
  std::uint64_t hlen = 0;
  if (!in.read(reinterpret_cast<char*>(&hlen), 8)) {
    throw PersistenceError("truncated checkpoint header: " + path);
  }
  std::string header(hlen, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(hlen))) {
    throw PersistenceError("truncated checkpoint manifest: " + path);
  }
  json manifest;
  try {
    manifest = json::parse(header);
  } catch (const json::exception& e) {
    throw PersistenceError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  if (manifest.at("version").get<int>() != 1) {
    throw PersistenceError("unsupported checkpoint version");
  }
  std::map<TaskId, HeadShape> shapes;
  for (const auto& t : manifest.at("tasks")) {
    HeadShape s;
    s.dense = t.at("dense").get<bool>();
    s.out_channels = t.at("out_channels").get<int>();
    s.hidden = t.at("hidden").get<int>();
    shapes[t.at("id").get<TaskId>()] = s;
  }
  Supernet sn = init_supernet(CellSpace::from_preset(manifest.at("preset").get<std::string>()),
                              skeleton_mode_from_string(manifest.at("mode").get<std::string>()),
                              shapes, /*seed=*/0);
  sn.step = manifest.at("step").get<long>();

  auto entries = named_tensors(sn, /*include_logits=*/true);
  std::map<std::string, Tensor> by_name(entries.begin(), entries.end());
  for (const auto& item : manifest.at("entries")) {
    std::string name = item.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw PersistenceError("unknown checkpoint entry: " + name);
    Tensor t = it->second;
    if (item.at("shape").get<Shape>() != t.shape()) {
      throw PersistenceError("shape mismatch for checkpoint entry " + name);
    }
    if (!in.read(reinterpret_cast<char*>(t.value_mut().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw PersistenceError("truncated checkpoint data at entry " + name);
    }
  }
  return sn;
}

AdamW::AdamW(std::vector<Tensor> params, Tensor logits, Settings settings)
    : params_(std::move(params)), logits_(std::move(logits)), settings_(settings) {
  slots_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    slots_[i].m = Array::Zero(params_[i].size());
    slots_[i].v = Array::Zero(params_[i].size());
  }
  if (logits_.defined()) {
    logit_slot_.m = Array::Zero(logits_.size());
    logit_slot_.v = Array::Zero(logits_.size());
  }
}

double AdamW::learning_rate(int step_index) const {
  const auto& s = settings_;
  if (s.warmup_steps > 0 && step_index < s.warmup_steps) {
    return s.lr * (step_index + 1) / s.warmup_steps;
  }
  int span = std::max(1, s.total_steps - s.warmup_steps);
  double t = std::min(1.0, static_cast<double>(step_index - s.warmup_steps) / span);
  return s.lr_min + 0.5 * (s.lr - s.lr_min) * (1.0 + std::cos(M_PI * t));
}

void AdamW::update(Tensor& p, Slot& slot, double lr, double wd) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Array g = p.grad();
  slot.m = beta1 * slot.m + (1 - beta1) * g;
  slot.v = beta2 * slot.v + (1 - beta2) * g.square();
  double c1 = 1 - std::pow(beta1, static_cast<double>(t_));
  double c2 = 1 - std::pow(beta2, static_cast<double>(t_));
  Array mhat = slot.m / c1;
  Array vhat = slot.v / c2;
  Array& value = p.value_mut();
  if (wd > 0) value *= (1 - lr * wd);
  value -= lr * mhat / (vhat.sqrt() + eps);
  check_finite(value, "adamw update");
}

void AdamW::step(int step_index) {
  ++t_;
  double lr = learning_rate(step_index);
  for (size_t i = 0; i < params_.size(); ++i) {
    // Decay matrices only; biases and LN vectors are rank-1.
    double wd = params_[i].rank() >= 2 ? settings_.weight_decay : 0.0;
    update(params_[i], slots_[i], lr, wd);
  }
  if (logits_.defined()) update(logits_, logit_slot_, settings_.logit_lr, 0.0);
}

}  // namespace mtnas
