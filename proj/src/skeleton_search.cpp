#include "mtnas/skeleton_search.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mtnas/ops.hpp"

namespace mtnas {

namespace o = ops;

double anneal_tau(long step, long total_steps, double tau0, double tau_min) {
  if (step < 0 || total_steps < 1 || step > total_steps) {
    throw ArgumentError("anneal_tau: step outside [0, total_steps]");
  }
  double t = static_cast<double>(step) / total_steps;
  return std::max(tau_min, tau0 * std::pow(tau_min / tau0, t));
}

Array sample_gumbel(int rows, int cols, Rng& rng) {
  std::uniform_real_distribution<double> unit(std::numeric_limits<double>::min(), 1.0);
  Array g(static_cast<Eigen::Index>(rows) * cols);
  for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = -std::log(-std::log(unit(rng)));
  return g;
}

Tensor gumbel_soft_select(const Tensor& logits, const Array& gumbel, double tau) {
  if (tau <= 0) throw ArgumentError("gumbel_soft_select: tau must be positive");
  if (logits.rank() != 2) throw ShapeError("gumbel_soft_select: logits must be (|S|, |T|)");
  int s = logits.shape()[0], t = logits.shape()[1];
  if (gumbel.size() != logits.size()) {
    throw ShapeError("gumbel_soft_select: noise size mismatch");
  }

  // log softmax over the skeleton axis, shifted by the column max for
  // stability (the shift is a constant, so gradients are unaffected).
  Array shift(logits.size());
  for (int k = 0; k < t; ++k) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < s; ++i) mx = std::max(mx, logits.value()[i * t + k]);
    for (int i = 0; i < s; ++i) shift[i * t + k] = mx;
  }
  Tensor shifted = o::sub(logits, Tensor::from(logits.shape(), std::move(shift)));
  Tensor lse = o::log(o::sum(o::exp(shifted), 0));  // (t)
  Tensor log_pi = o::add(shifted, o::scale(lse, -1.0));
  Tensor noisy = o::add(log_pi, Tensor::from(logits.shape(), gumbel));
  return o::softmax(o::scale(noisy, 1.0 / tau), 0);
}

Tensor aggregate_loss(const Tensor& loss_matrix, const Tensor& u_prime,
                      const std::vector<double>& lambdas) {
  if (loss_matrix.shape() != u_prime.shape() || loss_matrix.rank() != 2) {
    throw ShapeError("aggregate_loss: loss matrix and U' shapes disagree");
  }
  int t = loss_matrix.shape()[1];
  if (static_cast<int>(lambdas.size()) != t) {
    throw ShapeError("aggregate_loss: lambda count mismatch");
  }
  for (double l : lambdas) {
    if (l <= 0) throw ArgumentError("aggregate_loss: task weights must be positive");
  }
  Tensor per_task = o::sum(o::mul(loss_matrix, u_prime), 0);  // (t)
  Array lam = Eigen::Map<const Array>(lambdas.data(), t);
  return o::sum_all(o::mul(per_task, Tensor::from({t}, std::move(lam))));
}

std::vector<double> column_entropies(const Tensor& logits) {
  int s = logits.shape()[0], t = logits.shape()[1];
  std::vector<double> out(t, 0.0);
  for (int k = 0; k < t; ++k) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < s; ++i) mx = std::max(mx, logits.value()[i * t + k]);
    double z = 0;
    for (int i = 0; i < s; ++i) z += std::exp(logits.value()[i * t + k] - mx);
    double h = 0;
    for (int i = 0; i < s; ++i) {
      double p = std::exp(logits.value()[i * t + k] - mx) / z;
      if (p > 0) h -= p * std::log(p);
    }
    out[k] = h;
  }
  return out;
}

std::map<TaskId, Skeleton> discretize(const Supernet& sn) {
  const std::vector<Skeleton> skeletons = enumerate_skeletons(sn.mode);
  int s = sn.skeleton_logits.shape()[0], t = sn.skeleton_logits.shape()[1];
  std::map<TaskId, Skeleton> out;
  for (int k = 0; k < t; ++k) {
    int best = 0;
    for (int i = 1; i < s; ++i) {
      if (sn.skeleton_logits.value()[i * t + k] >
          sn.skeleton_logits.value()[best * t + k]) {
        best = i;
      }
    }
    out[sn.task_order[k]] = skeletons[best];
  }
  return out;
}

std::string TrainHistory::to_csv() const {
  std::ostringstream os;
  os << "step,tau,total_loss";
  for (TaskId t : tasks) os << ",loss_t" << t;
  for (TaskId t : tasks) os << ",entropy_t" << t;
  os << "\n";
  os.precision(17);
  for (const Row& r : rows) {
    os << r.step << "," << r.tau << "," << r.total_loss;
    for (double v : r.task_loss) os << "," << v;
    for (double v : r.entropy) os << "," << v;
    os << "\n";
  }
  return os.str();
}

TrainHistory train_supernet(Supernet& sn, const Dataset& ds,
                            const std::vector<TaskSpec>& tasks,
                            const TrainSettings& settings) {
  if (ds.train.empty()) throw ArgumentError("train_supernet: empty train split");
  if (settings.epochs < 1) throw ArgumentError("train_supernet: epochs must be >= 1");

  std::map<TaskId, const TaskSpec*> by_id;
  for (const TaskSpec& t : tasks) by_id[t.id] = &t;
  std::vector<const TaskSpec*> specs;  // sn.task_order order
  std::vector<double> lambdas;
  for (TaskId id : sn.task_order) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ArgumentError("train_supernet: missing task spec");
    specs.push_back(it->second);
    lambdas.push_back(it->second->lambda);
  }

  const std::vector<Skeleton> skeletons = enumerate_skeletons(sn.mode);
  const int n_skel = static_cast<int>(skeletons.size());
  const int n_task = static_cast<int>(sn.task_order.size());
  const int iters = settings.iterations_per_epoch > 0
                        ? settings.iterations_per_epoch
                        : static_cast<int>(ds.train.size());
  const long total_steps = static_cast<long>(settings.epochs) * iters;

  AdamW::Settings opt = settings.opt;
  if (opt.warmup_steps <= 0) opt.warmup_steps = iters;  // one-epoch warmup
  opt.total_steps = static_cast<int>(total_steps);
  AdamW optimizer(sn.parameters(), sn.skeleton_logits, opt);

  Rng rng(settings.seed);
  TrainHistory history;
  history.tasks = sn.task_order;

  std::vector<int> order(ds.train);
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (int it = 0; it < iters; ++it) {
      const long step = static_cast<long>(epoch) * iters + it;
      const Scene& scene = ds.scenes[order[it % order.size()]];
      const double tau = anneal_tau(step, total_steps, settings.tau0, settings.tau_min);

      sn.zero_grads();
      sn.skeleton_logits.zero_grad();

      Tensor u_prime;
      Array gumbel;
      if (settings.uniform_ablation) {
        u_prime = Tensor::constant({n_skel, n_task}, 1.0 / n_skel);
      } else {
        gumbel = sample_gumbel(n_skel, n_task, rng);
      }

      std::vector<CellConfig> cfgs;
      if (settings.min_config_only) {
        cfgs.push_back(sample_cell_config(sn.space, rng, SampleMode::kMin));
      } else {
        std::array<CellConfig, 4> sandwich = sandwich_sample(sn.space, rng);
        cfgs.assign(sandwich.begin(), sandwich.end());
      }
      const int n_sub = static_cast<int>(cfgs.size());
      double iter_loss = 0;
      std::vector<double> iter_task_loss(n_task, 0.0);
      for (int sub = 0; sub < n_sub; ++sub) {
        SubnetView view = slice(sn, cfgs[sub]);
        Tensor image = scene_image_tensor(scene);
        std::map<LayerId, Tensor> features = forward_grid(view, sn.graph, image);

        std::vector<Tensor> columns;
        for (int k = 0; k < n_task; ++k) {
          std::vector<Tensor> entries;
          for (int s = 0; s < n_skel; ++s) {
            try {
              Tensor out = run_task_head(view, sn.task_order[k], specs[k]->head,
                                         skeletons[s], features);
              entries.push_back(task_loss(*specs[k], out, scene));
            } catch (const NumericsError& e) {
              throw NumericsError("train_supernet: iteration " + std::to_string(step) +
                                  ", subnet " + std::to_string(sub) + ", skeleton " +
                                  std::to_string(s) + ": " + e.what());
            }
          }
          columns.push_back(o::reshape(o::concat(entries, 0), {n_skel, 1}));
        }
        Tensor loss_matrix = n_task > 1 ? o::concat(columns, 1) : columns[0];

        Tensor u = settings.uniform_ablation
                       ? u_prime
                       : gumbel_soft_select(sn.skeleton_logits, gumbel, tau);
        Tensor l = aggregate_loss(loss_matrix, u, lambdas);
        backward(l);

        iter_loss += l.item();
        for (int k = 0; k < n_task; ++k) {
          double v = 0;
          for (int s = 0; s < n_skel; ++s) {
            v += u.value()[s * n_task + k] * loss_matrix.value()[s * n_task + k];
          }
          iter_task_loss[k] += v;
        }
      }

      optimizer.step(static_cast<int>(step));
      ++sn.step;

      TrainHistory::Row row;
      row.step = step;
      row.tau = tau;
      row.total_loss = iter_loss / n_sub;
      for (double v : iter_task_loss) row.task_loss.push_back(v / n_sub);
      row.entropy = column_entropies(sn.skeleton_logits);
      history.rows.push_back(std::move(row));
      epoch_loss += iter_loss / n_sub;
    }
    history.epoch_mean_loss.push_back(epoch_loss / iters);
  }
  return history;
}

}  // namespace mtnas
