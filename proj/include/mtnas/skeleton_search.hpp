#pragma once

#include "mtnas/supernet.hpp"
#include "mtnas/tasks.hpp"

namespace mtnas {

// Exponential decay from tau0 down to the tau_min floor.
double anneal_tau(long step, long total_steps, double tau0 = 5.0,
                  double tau_min = 0.1);

// Fresh Gumbel(0,1) noise, one draw per (skeleton, task) entry.
Array sample_gumbel(int rows, int cols, Rng& rng);

// Soft selection matrix U': column s-axis softmax of (log softmax(logits) +
// g) / tau. Differentiable w.r.t. logits; every column sums to 1.
Tensor gumbel_soft_select(const Tensor& logits, const Array& gumbel, double tau);

// l = sum_k lambda_k * sum_s u'_{s,k} * L_{s,k}.
Tensor aggregate_loss(const Tensor& loss_matrix, const Tensor& u_prime,
                      const std::vector<double>& lambdas);

// Entropy of the selection distribution per task column (nats).
std::vector<double> column_entropies(const Tensor& logits);

// Column-wise argmax of the logits; ties go to the lowest skeleton index.
std::map<TaskId, Skeleton> discretize(const Supernet& sn);

struct TrainSettings {
  int epochs = 5;
  int iterations_per_epoch = -1;  // -1: one pass over the train split
  double tau0 = 5.0;
  double tau_min = 0.1;
  AdamW::Settings opt;
  bool uniform_ablation = false;  // skeletons weighted uniformly, logits frozen
  bool min_config_only = false;   // train the smallest subnet instead of sandwich
  std::uint64_t seed = 1;
};

struct TrainHistory {
  struct Row {
    long step = 0;
    double tau = 0;
    double total_loss = 0;
    std::vector<double> task_loss;  // task_order
    std::vector<double> entropy;
  };
  std::vector<TaskId> tasks;
  std::vector<Row> rows;
  std::vector<double> epoch_mean_loss;

  std::string to_csv() const;
};

TrainHistory train_supernet(Supernet& sn, const Dataset& ds,
                            const std::vector<TaskSpec>& tasks,
                            const TrainSettings& settings);

}  // namespace mtnas
