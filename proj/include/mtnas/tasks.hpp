#pragma once

#include <string>
#include <vector>

#include "mtnas/search_space.hpp"
#include "mtnas/tensor.hpp"

namespace mtnas {

struct MetricSpec {
  std::string name;
  bool lower_is_better = false;
};

enum class TaskKind { kDenseRegress, kDenseSeg, kPointClass };
enum class LossKind { kL1, kCrossEntropy };

struct TaskSpec {
  TaskId id = 0;
  std::string name;
  TaskKind kind = TaskKind::kDenseRegress;
  LossKind loss = LossKind::kL1;
  double lambda = 1.0;
  HeadShape head;
  MetricSpec metric;
};

constexpr int kSegClasses = 4;   // background + 3 shape classes
constexpr int kCountClasses = 4; // 0..3 shapes

struct Scene {
  Array image;                 // kImageSide^2 grayscale in [0, 1]
  std::vector<int> seg_labels; // kImageSide^2, classes 0..3
  Array edge_map;              // kImageSide^2, normalized Sobel magnitude of labels
  int shape_count_class = 0;
};

struct Dataset {
  std::vector<Scene> scenes;
  // 70/15/15 split by index.
  std::vector<int> train, val, test;
};

Dataset generate_dataset(int n, std::uint64_t seed);

// T1 autoencode, T2 edge, T3 segmentation, T4 shape-count class.
std::vector<TaskSpec> default_tasks();

std::map<TaskId, HeadShape> head_shapes(const std::vector<TaskSpec>& tasks);

Tensor scene_image_tensor(const Scene& scene);

// Loss of one task's head output against one scene's target.
Tensor task_loss(const TaskSpec& spec, const Tensor& output, const Scene& scene);

// Metric table M over a set of scenes; outputs[i] is the raw head output
// for scenes[i] (dense: H*W*C row-major; point: class logits).
using TaskMetrics = std::map<TaskId, std::vector<double>>;

TaskMetrics evaluate(const std::map<TaskId, std::vector<Array>>& outputs,
                     const std::vector<Scene>& scenes,
                     const std::vector<TaskSpec>& specs);

std::map<TaskId, std::vector<MetricSpec>> metric_specs(const std::vector<TaskSpec>& tasks);

}  // namespace mtnas
