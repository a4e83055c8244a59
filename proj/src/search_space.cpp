#include "mtnas/search_space.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>

namespace mtnas {

using nlohmann::json;

std::string to_string(SkeletonMode mode) {
  return mode == SkeletonMode::kSingle ? "single" : "multi";
}

SkeletonMode skeleton_mode_from_string(const std::string& s) {
  if (s == "single") return SkeletonMode::kSingle;
  if (s == "multi") return SkeletonMode::kMulti;
  throw ArgumentError("unknown skeleton mode: " + s);
}

const std::vector<LayerId>& all_layer_ids() {
  static const std::vector<LayerId> ids = [] {
    std::vector<LayerId> v;
    for (int d = 1; d <= 4; ++d) {
      for (int level = 1; level <= d; ++level) v.push_back({level, d});
    }
    std::sort(v.begin(), v.end());
    return v;
  }();
  return ids;
}

int feature_side(int level) { return (kImageSide / kPatchSize) >> (level - 1); }

std::vector<LayerId> Skeleton::output_layers() const {
  validate();
  if (mode == SkeletonMode::kSingle) return {output};
  std::vector<LayerId> out;
  for (int level = 1; level <= 4; ++level) {
    out.push_back({level, depth_per_level[level - 1]});
  }
  return out;
}

void Skeleton::validate() const {
  if (mode == SkeletonMode::kSingle) {
    if (!output.valid()) {
      throw ArgumentError("invalid single-scale skeleton output layer");
    }
    return;
  }
  for (int level = 1; level <= 4; ++level) {
    int d = depth_per_level[level - 1];
    if (d < level || d > 4) {
      throw ArgumentError("invalid multi-scale encode depth at level " +
                          std::to_string(level));
    }
  }
  if (depth_per_level[3] != 4) {
    throw ArgumentError("multi-scale level-4 output must use encode depth 4");
  }
}

std::vector<Skeleton> enumerate_skeletons(SkeletonMode mode) {
  std::vector<Skeleton> out;
  if (mode == SkeletonMode::kSingle) {
    for (const LayerId& id : all_layer_ids()) {
      Skeleton s;
      s.mode = SkeletonMode::kSingle;
      s.output = id;
      out.push_back(s);
    }
    return out;
  }
  for (int d1 = 1; d1 <= 4; ++d1) {
    for (int d2 = 2; d2 <= 4; ++d2) {
      for (int d3 = 3; d3 <= 4; ++d3) {
        Skeleton s;
        s.mode = SkeletonMode::kMulti;
        s.depth_per_level = {d1, d2, d3, 4};
        out.push_back(s);
      }
    }
  }
  return out;
}

int skeleton_index(const Skeleton& s) {
  auto all = enumerate_skeletons(s.mode);
  auto it = std::find(all.begin(), all.end(), s);
  if (it == all.end()) throw ArgumentError("skeleton not found in its space");
  return static_cast<int>(it - all.begin());
}

BigInt space_cardinality(SkeletonMode mode, int n_tasks) {
  if (n_tasks < 1) throw ArgumentError("space_cardinality: n_tasks must be >= 1");
  BigInt per_task = static_cast<int>(enumerate_skeletons(mode).size());
  BigInt total = 1;
  for (int i = 0; i < n_tasks; ++i) total *= per_task;
  return total;
}

Component patch_embed_component() {
  return {ComponentKind::kPatchEmbed, "patch_embed", {}, -1};
}

Component layer_component(LayerId layer) {
  if (layer.is_encoder()) {
    return {ComponentKind::kEncLayer, "b" + std::to_string(layer.level), layer, -1};
  }
  return {ComponentKind::kDecLayer,
          "dec" + std::to_string(layer.level) + "_" + std::to_string(layer.encode_depth),
          layer, -1};
}

Component pool_component(int from_level) {
  return {ComponentKind::kPool, "pool" + std::to_string(from_level),
          {from_level, from_level}, -1};
}

Component up_component(LayerId into_layer) {
  return {ComponentKind::kUp,
          "up" + std::to_string(into_layer.level) + "_" +
              std::to_string(into_layer.encode_depth),
          into_layer, -1};
}

Component head_component(TaskId task) {
  return {ComponentKind::kHead, "head" + std::to_string(task), {}, task};
}

std::vector<Component> skeleton_components(const Skeleton& s, TaskId task) {
  s.validate();
  std::vector<Component> out;
  auto push_unique = [&out](const Component& c) {
    for (const auto& e : out) {
      if (e.id == c.id) return;
    }
    out.push_back(c);
  };

  int max_d = 0;
  for (const LayerId& layer : s.output_layers()) {
    max_d = std::max(max_d, layer.encode_depth);
  }
  push_unique(patch_embed_component());
  for (int level = 1; level <= max_d; ++level) {
    if (level > 1) push_unique(pool_component(level - 1));
    push_unique(layer_component({level, level}));
  }
  for (const LayerId& layer : s.output_layers()) {
    for (int level = layer.encode_depth - 1; level >= layer.level; --level) {
      push_unique(up_component({level, layer.encode_depth}));
      push_unique(layer_component({level, layer.encode_depth}));
    }
  }
  push_unique(head_component(task));
  return out;
}

namespace {

// Grid wiring: producer component feeding a given layer.
std::string upstream_of(const LayerId& layer) {
  if (layer.is_encoder()) {
    return layer.level == 1 ? "patch_embed" : pool_component(layer.level - 1).id;
  }
  return up_component(layer).id;
}

void add_grid_edges(MultiTaskGraph& g) {
  g.edges.clear();
  auto edge = [&g](const std::string& a, const std::string& b) {
    if (g.has(a) && g.has(b)) g.edges.emplace_back(a, b);
  };
  for (const auto& [id, c] : g.components) {
    if (c.kind == ComponentKind::kEncLayer || c.kind == ComponentKind::kDecLayer) {
      edge(upstream_of(c.layer), id);
    } else if (c.kind == ComponentKind::kPool) {
      edge(layer_component({c.layer.level, c.layer.level}).id, id);
    } else if (c.kind == ComponentKind::kUp) {
      // Source is the next-deeper layer of the same return path.
      LayerId src{c.layer.level + 1, c.layer.encode_depth};
      edge(layer_component(src).id, id);
    }
  }
  for (const auto& [task, skel] : g.assignment) {
    for (const LayerId& layer : skel.output_layers()) {
      edge(layer_component(layer).id, head_component(task).id);
    }
  }
}

}  // namespace

std::set<std::string> MultiTaskGraph::component_ids() const {
  std::set<std::string> ids;
  for (const auto& [id, c] : components) ids.insert(id);
  return ids;
}

std::vector<LayerId> MultiTaskGraph::layers() const {
  std::vector<LayerId> out;
  for (const auto& [id, c] : components) {
    if (c.kind == ComponentKind::kEncLayer || c.kind == ComponentKind::kDecLayer) {
      out.push_back(c.layer);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

MultiTaskGraph union_skeletons(const std::map<TaskId, Skeleton>& assignments,
                               const std::map<TaskId, HeadShape>& head_shapes) {
  if (assignments.empty()) throw ArgumentError("union_skeletons: no task assignments");
  MultiTaskGraph g;
  g.mode = assignments.begin()->second.mode;
  for (const auto& [task, skel] : assignments) {
    if (skel.mode != g.mode) {
      throw ArgumentError("union_skeletons: mixed skeleton modes");
    }
    for (const Component& c : skeleton_components(skel, task)) {
      g.components.emplace(c.id, c);
    }
  }
  g.assignment = assignments;
  g.head_shapes = head_shapes;
  for (const auto& [task, skel] : assignments) {
    if (!g.head_shapes.count(task)) g.head_shapes[task] = HeadShape{};
  }
  add_grid_edges(g);
  return g;
}

MultiTaskGraph full_grid_graph(SkeletonMode mode,
                               const std::map<TaskId, HeadShape>& head_shapes) {
  MultiTaskGraph g;
  g.mode = mode;
  TaskId any_task = head_shapes.empty() ? 0 : head_shapes.begin()->first;
  for (const Skeleton& s : enumerate_skeletons(mode)) {
    for (const Component& c : skeleton_components(s, any_task)) {
      if (c.kind != ComponentKind::kHead) g.components.emplace(c.id, c);
    }
  }
  for (const auto& [task, shape] : head_shapes) {
    Component h = head_component(task);
    g.components.emplace(h.id, h);
  }
  g.head_shapes = head_shapes;
  add_grid_edges(g);
  return g;
}

void CellSpace::validate() const {
  auto check_sorted = [](const auto& v, const char* what) {
    if (v.empty()) throw ConfigError(std::string("cell space: empty ") + what);
    if (!std::is_sorted(v.begin(), v.end()) ||
        std::adjacent_find(v.begin(), v.end()) != v.end()) {
      throw ConfigError(std::string("cell space: ") + what +
                        " must be strictly ascending");
    }
  };
  for (int level = 1; level <= 4; ++level) {
    check_sorted(embed_choices[level - 1], "embed choices");
    check_sorted(head_choices[level - 1], "head choices");
  }
  check_sorted(depth_choices, "depth choices");
  check_sorted(mlp_ratio_choices, "mlp ratio choices");
  check_sorted(window_choices, "window choices");
}

CellSpace CellSpace::desk() {
  CellSpace s;
  s.embed_choices = {{{8, 12, 16}, {16, 24, 32}, {32, 48, 64}, {64, 96, 128}}};
  s.head_choices = {{{2, 4}, {2, 4}, {2, 4}, {2, 4}}};
  s.depth_choices = {1, 2};
  s.mlp_ratio_choices = {2, 4};
  s.window_choices = {2, 4, 8};
  s.preset = "desk";
  return s;
}

CellSpace CellSpace::paper_small() {
  CellSpace s;
  s.embed_choices = {{{64, 96, 128}, {160, 192, 224}, {352, 384, 416}, {732, 768, 800}}};
  s.head_choices = {{{2, 3, 4}, {5, 6, 7}, {11, 12, 13}, {23, 24, 25}}};
  s.depth_choices = {2, 4};
  s.mlp_ratio_choices = {3.5, 4};
  s.window_choices = {5, 7, 9};
  s.preset = "paper-small";
  return s;
}

CellSpace CellSpace::paper_base() {
  CellSpace s;
  s.embed_choices = {{{96, 128, 160}, {192, 256, 320}, {448, 512, 576}, {960, 1024, 1088}}};
  s.head_choices = {{{3, 4, 5}, {6, 8, 10}, {14, 16, 18}, {30, 32, 34}}};
  s.depth_choices = {2, 4};
  s.mlp_ratio_choices = {3.5, 4};
  s.window_choices = {5, 7, 9};
  s.preset = "paper-base";
  return s;
}

CellSpace CellSpace::from_preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper-small") return paper_small();
  if (name == "paper-base") return paper_base();
  throw ConfigError("unknown cell space preset: " + name);
}

const LayerChoice& CellConfig::at(LayerId id) const {
  auto it = layers.find(id);
  if (it == layers.end()) {
    throw ConfigError("cell config missing layer (level " + std::to_string(id.level) +
                      ", depth " + std::to_string(id.encode_depth) + ")");
  }
  return it->second;
}

void CellConfig::validate(const CellSpace& space) const {
  auto contains = [](const auto& v, auto x) {
    return std::find(v.begin(), v.end(), x) != v.end();
  };
  for (const LayerId& id : all_layer_ids()) {
    const LayerChoice& lc = at(id);
    if (!contains(space.embed_choices[id.level - 1], lc.embed)) {
      throw ConfigError("embed dim " + std::to_string(lc.embed) +
                        " outside choices at level " + std::to_string(id.level));
    }
    if (!contains(space.depth_choices, lc.depth) ||
        static_cast<int>(lc.blocks.size()) != lc.depth) {
      throw ConfigError("bad depth/block count at level " + std::to_string(id.level));
    }
    for (const BlockChoice& b : lc.blocks) {
      if (!contains(space.head_choices[id.level - 1], b.heads) ||
          !contains(space.mlp_ratio_choices, b.mlp_ratio) ||
          !contains(space.window_choices, b.window)) {
        throw ConfigError("block choice outside space at level " +
                          std::to_string(id.level));
      }
    }
  }
}

std::uint64_t CellConfig::hash() const {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&h](std::uint64_t x) {
    h ^= x;
    h *= 1099511628211ull;
  };
  for (const auto& [id, lc] : layers) {
    mix(id.level);
    mix(id.encode_depth);
    mix(lc.embed);
    mix(lc.depth);
    for (const auto& b : lc.blocks) {
      mix(b.heads);
      mix(static_cast<std::uint64_t>(b.mlp_ratio * 16));
      mix(b.window);
    }
  }
  return h;
}

namespace {

template <typename T>
T pick(const std::vector<T>& choices, Rng& rng, SampleMode mode) {
  switch (mode) {
    case SampleMode::kMin:
      return choices.front();
    case SampleMode::kMax:
      return choices.back();
    case SampleMode::kUniform: {
      std::uniform_int_distribution<size_t> dist(0, choices.size() - 1);
      return choices[dist(rng)];
    }
  }
  throw ArgumentError("bad sample mode");
}

}  // namespace

CellConfig sample_cell_config(const CellSpace& space, Rng& rng, SampleMode mode) {
  CellConfig cfg;
  for (const LayerId& id : all_layer_ids()) {
    LayerChoice lc;
    lc.embed = pick(space.embed_choices[id.level - 1], rng, mode);
    lc.depth = pick(space.depth_choices, rng, mode);
    for (int b = 0; b < lc.depth; ++b) {
      BlockChoice bc;
      bc.heads = pick(space.head_choices[id.level - 1], rng, mode);
      bc.mlp_ratio = pick(space.mlp_ratio_choices, rng, mode);
      bc.window = pick(space.window_choices, rng, mode);
      lc.blocks.push_back(bc);
    }
    cfg.layers[id] = lc;
  }
  return cfg;
}

namespace {

long long block_params(int embed, double mlp_ratio) {
  long long e = embed;
  long long h = std::llround(mlp_ratio * embed);
  long long qkv = 3 * e * e + 3 * e;
  long long proj = e * e + e;
  long long ffn = h * e + h + e * h + e;
  long long ln = 4 * e;
  return qkv + proj + ffn + ln;
}

long long head_params(const HeadShape& shape, const std::vector<int>& embeds) {
  long long total = 0;
  if (shape.dense) {
    for (int e : embeds) total += static_cast<long long>(shape.out_channels) * e + shape.out_channels;
  } else {
    for (int e : embeds) total += static_cast<long long>(shape.hidden) * e + shape.hidden;
    total += static_cast<long long>(shape.out_channels) * shape.hidden + shape.out_channels;
  }
  return total;
}

}  // namespace

long long count_params(const MultiTaskGraph& graph, const CellConfig& cfg,
                       const CellSpace& space) {
  cfg.validate(space);
  long long total = 0;
  for (const auto& [id, c] : graph.components) {
    switch (c.kind) {
      case ComponentKind::kPatchEmbed: {
        int e1 = cfg.at({1, 1}).embed;
        total += static_cast<long long>(e1) * (kPatchSize * kPatchSize * kImageChannels) + e1;
        break;
      }
      case ComponentKind::kEncLayer:
      case ComponentKind::kDecLayer: {
        const LayerChoice& lc = cfg.at(c.layer);
        for (const BlockChoice& b : lc.blocks) total += block_params(lc.embed, b.mlp_ratio);
        break;
      }
      case ComponentKind::kPool: {
        int e_in = cfg.at({c.layer.level, c.layer.level}).embed;
        int e_out = cfg.at({c.layer.level + 1, c.layer.level + 1}).embed;
        total += static_cast<long long>(e_out) * 4 * e_in + e_out;
        break;
      }
      case ComponentKind::kUp: {
        int e_in = cfg.at({c.layer.level + 1, c.layer.encode_depth}).embed;
        int e_out = cfg.at(c.layer).embed;
        total += static_cast<long long>(e_out) * e_in + e_out;
        break;
      }
      case ComponentKind::kHead: {
        auto it = graph.head_shapes.find(c.task);
        HeadShape shape = it != graph.head_shapes.end() ? it->second : HeadShape{};
        std::vector<int> embeds;
        auto att = graph.assignment.find(c.task);
        if (att != graph.assignment.end()) {
          for (const LayerId& layer : att->second.output_layers()) {
            embeds.push_back(cfg.at(layer).embed);
          }
        } else {
          // Full-grid graph: heads carry one projection per grid layer so
          // any skeleton can attach.
          for (const LayerId& layer : all_layer_ids()) embeds.push_back(cfg.at(layer).embed);
        }
        total += head_params(shape, embeds);
        break;
      }
    }
  }
  return total;
}

std::string skeleton_to_json(const Skeleton& s) {
  json j;
  j["version"] = 1;
  j["mode"] = to_string(s.mode);
  if (s.mode == SkeletonMode::kSingle) {
    j["output"] = {{"level", s.output.level}, {"encode_depth", s.output.encode_depth}};
  } else {
    j["encode_depth_per_level"] = s.depth_per_level;
  }
  return j.dump(2);
}

Skeleton skeleton_from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.at("version").get<int>() != 1) {
    throw PersistenceError("unsupported skeleton serialization version");
  }
  Skeleton s;
  s.mode = skeleton_mode_from_string(j.at("mode").get<std::string>());
  if (s.mode == SkeletonMode::kSingle) {
    s.output.level = j.at("output").at("level").get<int>();
    s.output.encode_depth = j.at("output").at("encode_depth").get<int>();
  } else {
    auto v = j.at("encode_depth_per_level").get<std::vector<int>>();
    if (v.size() != 4) throw PersistenceError("expected 4 encode depths");
    std::copy(v.begin(), v.end(), s.depth_per_level.begin());
  }
  s.validate();
  return s;
}

std::string cell_config_to_json(const CellConfig& cfg) {
  json layers = json::array();
  for (const auto& [id, lc] : cfg.layers) {
    json blocks = json::array();
    for (const BlockChoice& b : lc.blocks) {
      blocks.push_back({{"heads", b.heads}, {"mlp_ratio", b.mlp_ratio}, {"window", b.window}});
    }
    layers.push_back({{"level", id.level},
                      {"encode_depth", id.encode_depth},
                      {"embed", lc.embed},
                      {"depth", lc.depth},
                      {"blocks", blocks}});
  }
  json j;
  j["version"] = 1;
  j["layers"] = layers;
  return j.dump(2);
}

CellConfig cell_config_from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.at("version").get<int>() != 1) {
    throw PersistenceError("unsupported cell config serialization version");
  }
  CellConfig cfg;
  for (const auto& layer : j.at("layers")) {
    LayerId id{layer.at("level").get<int>(), layer.at("encode_depth").get<int>()};
    LayerChoice lc;
    lc.embed = layer.at("embed").get<int>();
    lc.depth = layer.at("depth").get<int>();
    for (const auto& b : layer.at("blocks")) {
      lc.blocks.push_back({b.at("heads").get<int>(), b.at("mlp_ratio").get<double>(),
                           b.at("window").get<int>()});
    }
    cfg.layers[id] = lc;
  }
  return cfg;
}

std::string graph_to_json(const MultiTaskGraph& g) {
  json j;
  j["version"] = 1;
  j["mode"] = to_string(g.mode);
  json comps = json::array();
  for (const auto& [id, c] : g.components) comps.push_back(id);
  j["components"] = comps;
  json edges = json::array();
  for (const auto& [a, b] : g.edges) edges.push_back({a, b});
  j["edges"] = edges;
  json assign = json::object();
  for (const auto& [task, skel] : g.assignment) {
    assign[std::to_string(task)] = json::parse(skeleton_to_json(skel));
  }
  j["assignment"] = assign;
  return j.dump(2);
}

}  // namespace mtnas
