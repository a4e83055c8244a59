#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "mtnas/transformer.hpp"

namespace mtnas {

struct HeadStore {
  std::map<int, std::pair<Tensor, Tensor>> proj;  // level -> (w, b)
  Tensor w2, b2;                                  // point heads only
};

// The shared weight store: every component of every enumerable skeleton at
// cell-space maxima. Subnets inherit by prefix slicing.
struct Supernet {
  CellSpace space;
  SkeletonMode mode = SkeletonMode::kSingle;
  MultiTaskGraph graph;  // full grid
  std::map<TaskId, HeadShape> head_shapes;

  Tensor patch_w, patch_b;
  std::map<LayerId, std::vector<BlockWeights>> layers;  // max_depth blocks each
  std::map<int, std::pair<Tensor, Tensor>> pools;       // source level -> (w, b)
  std::map<LayerId, std::pair<Tensor, Tensor>> ups;     // target layer -> (w, b)
  std::map<TaskId, HeadStore> heads;

  Tensor skeleton_logits;  // (|S|, |T|), tasks in ascending id order
  std::vector<TaskId> task_order;
  long step = 0;

  // Every trainable weight except the skeleton logits, in a stable order.
  std::vector<Tensor> parameters() const;
  void zero_grads();
};

Supernet init_supernet(const CellSpace& space, SkeletonMode mode,
                       const std::map<TaskId, HeadShape>& head_shapes,
                       std::uint64_t seed);

// Head weights sliced per attachment layer (a head can read any grid layer
// of its level, and those layers may carry different embed dims).
struct SubnetHead {
  std::map<LayerId, std::pair<Tensor, Tensor>> proj;
  Tensor w2, b2;  // point heads only
};

// A subnet's weights: index ranges into the supernet tensors, materialized
// as graph slice nodes so gradients accumulate into the shared store.
struct SubnetView {
  CellConfig cfg;
  Tensor patch_w, patch_b;
  std::map<LayerId, std::vector<BlockWeights>> blocks;  // cfg depth per layer
  std::map<int, std::pair<Tensor, Tensor>> pools;
  std::map<LayerId, std::pair<Tensor, Tensor>> ups;
  std::map<TaskId, SubnetHead> heads;

  // Copies every sliced weight into fresh leaves (no supernet aliasing).
  SubnetView detached() const;
};

SubnetView slice(const Supernet& sn, const CellConfig& cfg);

// Sandwich rule: [largest, smallest, uniform, uniform].
std::array<CellConfig, 4> sandwich_sample(const CellSpace& space, Rng& rng);

// Forward features of every grid layer present in `graph`.
std::map<LayerId, Tensor> forward_grid(const SubnetView& view,
                                       const MultiTaskGraph& graph,
                                       const Tensor& image);

// Task output for a given skeleton attachment, reading from grid features.
Tensor run_task_head(const SubnetView& view, TaskId task, const HeadShape& shape,
                     const Skeleton& skeleton,
                     const std::map<LayerId, Tensor>& features);

void save_checkpoint(const Supernet& sn, const std::string& path);
Supernet load_checkpoint(const std::string& path);

// Decoupled-weight-decay adaptive-moment optimizer with linear warmup and
// cosine decay. Rank-1 tensors (biases, LN vectors) skip weight decay.
class AdamW {
 public:
  struct Settings {
    double lr = 5e-4;
    double lr_min = 5e-6;
    double weight_decay = 0.05;
    double logit_lr = 0.05;  // skeleton logits train on their own rate
    int warmup_steps = 0;
    int total_steps = 1;
  };

  AdamW(std::vector<Tensor> params, Tensor logits, Settings settings);
  void step(int step_index);
  double learning_rate(int step_index) const;

 private:
  struct Slot {
    Array m, v;
  };
  void update(Tensor& p, Slot& slot, double lr, double wd);

  std::vector<Tensor> params_;
  Tensor logits_;
  Settings settings_;
  std::vector<Slot> slots_;
  Slot logit_slot_;
  long t_ = 0;
};

}  // namespace mtnas
