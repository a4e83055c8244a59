#pragma once

#include <array>
#include <boost/multiprecision/cpp_int.hpp>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mtnas/errors.hpp"

namespace mtnas {

using BigInt = boost::multiprecision::cpp_int;
using Rng = std::mt19937_64;
using TaskId = int;

enum class SkeletonMode { kSingle, kMulti };

std::string to_string(SkeletonMode mode);
SkeletonMode skeleton_mode_from_string(const std::string& s);

// One cell in the branched layer grid. level indexes the output stride
// (1 => 1/4, 4 => 1/32); encode_depth is the deepest encoder level of the
// path the cell belongs to. level == encode_depth marks an encoder layer,
// level < encode_depth a decoder layer on the depth-d return path.
struct LayerId {
  int level = 0;
  int encode_depth = 0;

  bool is_encoder() const { return level == encode_depth; }
  bool valid() const {
    return level >= 1 && level <= 4 && encode_depth >= level && encode_depth <= 4;
  }
  friend bool operator==(const LayerId&, const LayerId&) = default;
  // Canonical order: encode depth ascending, then level ascending.
  friend bool operator<(const LayerId& a, const LayerId& b) {
    if (a.encode_depth != b.encode_depth) return a.encode_depth < b.encode_depth;
    return a.level < b.level;
  }
};

// The 10 valid grid layers in canonical order.
const std::vector<LayerId>& all_layer_ids();

struct Skeleton {
  SkeletonMode mode = SkeletonMode::kSingle;
  LayerId output;                                // single-scale
  std::array<int, 4> depth_per_level{0, 0, 0, 0};  // multi-scale: d_l, d_4 == 4

  // Output layers: one for single-scale, four (levels 1..4) for multi-scale.
  std::vector<LayerId> output_layers() const;
  void validate() const;
  friend bool operator==(const Skeleton&, const Skeleton&) = default;
};

enum class ComponentKind { kPatchEmbed, kEncLayer, kPool, kUp, kDecLayer, kHead };

// Point heads aggregate with global average pooling and a 2-layer MLP;
// dense heads project per pixel and upsample to input resolution.
struct HeadShape {
  bool dense = true;
  int out_channels = 1;
  int hidden = 32;  // point heads only
  friend bool operator==(const HeadShape&, const HeadShape&) = default;
};

struct Component {
  ComponentKind kind;
  std::string id;
  LayerId layer;     // enc/dec layers and ups; pools use layer.level as source level
  TaskId task = -1;  // heads only
  friend bool operator==(const Component&, const Component&) = default;
};

Component patch_embed_component();
Component layer_component(LayerId layer);
Component pool_component(int from_level);
Component up_component(LayerId into_layer);
Component head_component(TaskId task);

struct MultiTaskGraph {
  SkeletonMode mode = SkeletonMode::kSingle;
  std::map<std::string, Component> components;
  std::vector<std::pair<std::string, std::string>> edges;
  std::map<TaskId, Skeleton> assignment;
  std::map<TaskId, HeadShape> head_shapes;

  bool has(const std::string& id) const { return components.count(id) > 0; }
  std::set<std::string> component_ids() const;
  std::vector<LayerId> layers() const;  // grid layers present, canonical order
};

std::vector<Skeleton> enumerate_skeletons(SkeletonMode mode);
// Index of s within enumerate_skeletons(s.mode); fixes U matrix rows.
int skeleton_index(const Skeleton& s);

BigInt space_cardinality(SkeletonMode mode, int n_tasks);

// Ordered component path (topological) ending in head(task).
std::vector<Component> skeleton_components(const Skeleton& s, TaskId task);

MultiTaskGraph union_skeletons(const std::map<TaskId, Skeleton>& assignments,
                               const std::map<TaskId, HeadShape>& head_shapes = {});

// Full grid over all 10 layers with every task head attached at every
// enumerable skeleton; the supernet graph.
MultiTaskGraph full_grid_graph(SkeletonMode mode,
                               const std::map<TaskId, HeadShape>& head_shapes);

struct CellSpace {
  std::array<std::vector<int>, 4> embed_choices;  // per level 1..4
  std::array<std::vector<int>, 4> head_choices;
  std::vector<int> depth_choices;
  std::vector<double> mlp_ratio_choices;
  std::vector<int> window_choices;
  std::string preset;

  int max_embed(int level) const { return embed_choices[level - 1].back(); }
  int min_embed(int level) const { return embed_choices[level - 1].front(); }
  int max_depth() const { return depth_choices.back(); }
  double max_mlp_ratio() const { return mlp_ratio_choices.back(); }
  void validate() const;

  static CellSpace desk();
  static CellSpace paper_small();   // 22.3-62.2M row of the published table
  static CellSpace paper_base();    // 37.2-108.7M row
  static CellSpace from_preset(const std::string& name);
};

struct BlockChoice {
  int heads = 0;
  double mlp_ratio = 0;
  int window = 0;
  friend bool operator==(const BlockChoice&, const BlockChoice&) = default;
};

struct LayerChoice {
  int embed = 0;
  int depth = 0;
  std::vector<BlockChoice> blocks;  // blocks.size() == depth
  friend bool operator==(const LayerChoice&, const LayerChoice&) = default;
};

// The subnet encoding: one choice record per grid layer (all 10 layers,
// so one config applies to any graph).
struct CellConfig {
  std::map<LayerId, LayerChoice> layers;

  const LayerChoice& at(LayerId id) const;
  void validate(const CellSpace& space) const;
  friend bool operator==(const CellConfig&, const CellConfig&) = default;
  std::uint64_t hash() const;
};

enum class SampleMode { kMin, kMax, kUniform };

CellConfig sample_cell_config(const CellSpace& space, Rng& rng, SampleMode mode);

long long count_params(const MultiTaskGraph& graph, const CellConfig& cfg,
                       const CellSpace& space);

// Versioned structured-text (JSON) forms.
std::string skeleton_to_json(const Skeleton& s);
Skeleton skeleton_from_json(const std::string& text);
std::string cell_config_to_json(const CellConfig& cfg);
CellConfig cell_config_from_json(const std::string& text);
std::string graph_to_json(const MultiTaskGraph& g);

constexpr int kPatchSize = 4;
constexpr int kImageSide = 64;
constexpr int kImageChannels = 1;

// Feature side at a stride level for the default 64x64 input: 16, 8, 4, 2.
int feature_side(int level);

}  // namespace mtnas
