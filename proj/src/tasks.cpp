#include "mtnas/tasks.hpp"

#include <algorithm>
#include <cmath>

#include "mtnas/ops.hpp"

namespace mtnas {

namespace {

constexpr int kSide = kImageSide;

struct ShapeDef {
  bool is_rect;
  int cls;
  int cx, cy, half_w, half_h;  // circles use half_w as radius
  double intensity;

  bool contains(int y, int x) const {
    if (is_rect) {
      return std::abs(x - cx) <= half_w && std::abs(y - cy) <= half_h;
    }
    int dx = x - cx, dy = y - cy;
    return dx * dx + dy * dy <= half_w * half_w;
  }
  bool overlaps(const ShapeDef& other) const {
    // Conservative bounding-box test with a 1-px margin.
    int aw = half_w + 1, ah = (is_rect ? half_h : half_w) + 1;
    int bw = other.half_w + 1, bh = (other.is_rect ? other.half_h : other.half_w) + 1;
    return std::abs(cx - other.cx) <= aw + bw && std::abs(cy - other.cy) <= ah + bh;
  }
};

Array sobel_edges(const std::vector<int>& labels) {
  // 3x3 Sobel on the label field with clamp-to-edge padding, normalized by
  // the per-scene maximum magnitude.
  auto at = [&labels](int y, int x) {
    y = std::clamp(y, 0, kSide - 1);
    x = std::clamp(x, 0, kSide - 1);
    return static_cast<double>(labels[y * kSide + x]);
  };
  Array mag(kSide * kSide);
  double mx = 0;
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      double gx = -at(y - 1, x - 1) - 2 * at(y, x - 1) - at(y + 1, x - 1) +
                  at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1);
      double gy = -at(y - 1, x - 1) - 2 * at(y - 1, x) - at(y - 1, x + 1) +
                  at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1);
      double m = std::sqrt(gx * gx + gy * gy);
      mag[y * kSide + x] = m;
      mx = std::max(mx, m);
    }
  }
  if (mx > 0) mag /= mx;
  return mag;
}

Scene make_scene(Rng& rng) {
  std::uniform_int_distribution<int> count_dist(1, 3);
  int count = count_dist(rng);
  std::vector<int> classes{1, 2, 3};
  std::shuffle(classes.begin(), classes.end(), rng);

  std::vector<ShapeDef> shapes;
  std::uniform_int_distribution<int> coord(10, kSide - 11);
  std::uniform_int_distribution<int> half(4, 9);
  std::uniform_int_distribution<int> kind(0, 1);
  std::uniform_real_distribution<double> bright(0.4, 1.0);
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      ShapeDef s;
      s.is_rect = kind(rng) == 1;
      s.cls = classes[i];
      s.cx = coord(rng);
      s.cy = coord(rng);
      s.half_w = half(rng);
      s.half_h = half(rng);
      s.intensity = bright(rng);
      bool ok = true;
      for (const ShapeDef& prev : shapes) ok = ok && !s.overlaps(prev);
      if (ok) {
        shapes.push_back(s);
        break;
      }
    }
  }

  Scene scene;
  scene.image = Array(kSide * kSide);
  scene.seg_labels.assign(kSide * kSide, 0);
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      double v = 0.05 + 0.1 * x / (kSide - 1);
      int cls = 0;
      for (const ShapeDef& s : shapes) {
        if (s.contains(y, x)) {
          v = s.intensity;
          cls = s.cls;
          break;
        }
      }
      scene.image[y * kSide + x] = v;
      scene.seg_labels[y * kSide + x] = cls;
    }
  }
  scene.edge_map = sobel_edges(scene.seg_labels);
  scene.shape_count_class = static_cast<int>(shapes.size());
  return scene;
}

}  // namespace

Dataset generate_dataset(int n, std::uint64_t seed) {
  if (n < 1) throw ArgumentError("generate_dataset: n must be >= 1");
  Dataset ds;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) ds.scenes.push_back(make_scene(rng));
  int train_end = n * 70 / 100;
  int val_end = n * 85 / 100;
  for (int i = 0; i < train_end; ++i) ds.train.push_back(i);
  for (int i = train_end; i < val_end; ++i) ds.val.push_back(i);
  for (int i = val_end; i < n; ++i) ds.test.push_back(i);
  return ds;
}

std::vector<TaskSpec> default_tasks() {
  std::vector<TaskSpec> tasks;
  tasks.push_back({1, "autoencode", TaskKind::kDenseRegress, LossKind::kL1, 0.1,
                   HeadShape{true, 1, 0}, MetricSpec{"mean_l1", true}});
  tasks.push_back({2, "edge", TaskKind::kDenseRegress, LossKind::kL1, 1.0,
                   HeadShape{true, 1, 0}, MetricSpec{"mean_l1", true}});
  tasks.push_back({3, "segmentation", TaskKind::kDenseSeg, LossKind::kCrossEntropy, 1.0,
                   HeadShape{true, kSegClasses, 0}, MetricSpec{"miou", false}});
  tasks.push_back({4, "count_class", TaskKind::kPointClass, LossKind::kCrossEntropy, 2.0,
                   HeadShape{false, kCountClasses, 32}, MetricSpec{"accuracy", false}});
  return tasks;
}

std::map<TaskId, HeadShape> head_shapes(const std::vector<TaskSpec>& tasks) {
  std::map<TaskId, HeadShape> out;
  for (const TaskSpec& t : tasks) out[t.id] = t.head;
  return out;
}

Tensor scene_image_tensor(const Scene& scene) {
  return Tensor::from({kSide, kSide, kImageChannels}, scene.image);
}

Tensor task_loss(const TaskSpec& spec, const Tensor& output, const Scene& scene) {
  switch (spec.kind) {
    case TaskKind::kDenseRegress: {
      const Array& target = spec.name == "edge" ? scene.edge_map : scene.image;
      Tensor t = Tensor::from({kSide, kSide, 1}, target);
      return ops::l1_loss(output, t);
    }
    case TaskKind::kDenseSeg: {
      Tensor logits = ops::reshape(output, {kSide * kSide, kSegClasses});
      return ops::cross_entropy(logits, scene.seg_labels);
    }
    case TaskKind::kPointClass:
      return ops::cross_entropy(output, {scene.shape_count_class});
  }
  throw ArgumentError("task_loss: unknown task kind");
}

namespace {

double miou_metric(const std::vector<Array>& outputs, const std::vector<Scene>& scenes) {
  // Global confusion over all scenes; IoU averaged over classes present in
  // the ground truth.
  std::array<long long, kSegClasses> inter{}, pred_count{}, gt_count{};
  for (size_t i = 0; i < scenes.size(); ++i) {
    const Array& out = outputs[i];
    for (int p = 0; p < kSide * kSide; ++p) {
      int best = 0;
      for (int c = 1; c < kSegClasses; ++c) {
        if (out[p * kSegClasses + c] > out[p * kSegClasses + best]) best = c;
      }
      int gt = scenes[i].seg_labels[p];
      ++pred_count[best];
      ++gt_count[gt];
      if (best == gt) ++inter[gt];
    }
  }
  double sum = 0;
  int present = 0;
  for (int c = 0; c < kSegClasses; ++c) {
    if (gt_count[c] == 0) continue;
    ++present;
    long long uni = pred_count[c] + gt_count[c] - inter[c];
    sum += uni > 0 ? static_cast<double>(inter[c]) / uni : 1.0;
  }
  return present > 0 ? sum / present : 1.0;
}

}  // namespace

TaskMetrics evaluate(const std::map<TaskId, std::vector<Array>>& outputs,
                     const std::vector<Scene>& scenes,
                     const std::vector<TaskSpec>& specs) {
  if (scenes.empty()) throw ArgumentError("evaluate: no scenes");
  TaskMetrics table;
  for (const TaskSpec& spec : specs) {
    auto it = outputs.find(spec.id);
    if (it == outputs.end() || it->second.size() != scenes.size()) {
      throw ArgumentError("evaluate: outputs missing for task " + spec.name);
    }
    const std::vector<Array>& outs = it->second;
    double value = 0;
    switch (spec.kind) {
      case TaskKind::kDenseRegress: {
        double total = 0;
        for (size_t i = 0; i < scenes.size(); ++i) {
          const Array& target = spec.name == "edge" ? scenes[i].edge_map : scenes[i].image;
          total += (outs[i] - target).abs().mean();
        }
        value = total / scenes.size();
        break;
      }
      case TaskKind::kDenseSeg:
        value = miou_metric(outs, scenes);
        break;
      case TaskKind::kPointClass: {
        int correct = 0;
        for (size_t i = 0; i < scenes.size(); ++i) {
          int best = 0;
          for (int c = 1; c < kCountClasses; ++c) {
            if (outs[i][c] > outs[i][best]) best = c;
          }
          if (best == scenes[i].shape_count_class) ++correct;
        }
        value = static_cast<double>(correct) / scenes.size();
        break;
      }
    }
    table[spec.id] = {value};
  }
  return table;
}

std::map<TaskId, std::vector<MetricSpec>> metric_specs(const std::vector<TaskSpec>& tasks) {
  std::map<TaskId, std::vector<MetricSpec>> out;
  for (const TaskSpec& t : tasks) out[t.id] = {t.metric};
  return out;
}

}  // namespace mtnas
