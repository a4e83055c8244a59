#include "mtnas/evolution.hpp"

#include <algorithm>
#include <unordered_map>

namespace mtnas {

namespace {

double metric_mean(const std::vector<TaskMetrics>& population, TaskId task, size_t j) {
  double total = 0;
  for (const TaskMetrics& m : population) {
    auto it = m.find(task);
    if (it == m.end() || j >= it->second.size()) {
      throw MetricError("gamma: population entry missing task metric");
    }
    total += it->second[j];
  }
  return total / population.size();
}

template <typename T>
const T& pick(const std::vector<T>& choices, Rng& rng) {
  std::uniform_int_distribution<size_t> d(0, choices.size() - 1);
  return choices[d(rng)];
}

BlockChoice random_block(const CellSpace& space, int level, Rng& rng) {
  BlockChoice b;
  b.heads = pick(space.head_choices[level - 1], rng);
  b.mlp_ratio = pick(space.mlp_ratio_choices, rng);
  b.window = pick(space.window_choices, rng);
  return b;
}

}  // namespace

double gamma_task(const TaskMetrics& candidate,
                  const std::vector<TaskMetrics>& population, TaskId task,
                  const std::map<TaskId, std::vector<MetricSpec>>& specs) {
  if (population.empty()) throw MetricError("gamma_task: empty population");
  auto sit = specs.find(task);
  if (sit == specs.end() || sit->second.empty()) {
    throw MetricError("gamma_task: no metric specs for task");
  }
  auto cit = candidate.find(task);
  if (cit == candidate.end() || cit->second.size() != sit->second.size()) {
    throw MetricError("gamma_task: candidate metrics missing");
  }
  double total = 0;
  for (size_t j = 0; j < sit->second.size(); ++j) {
    double mean = metric_mean(population, task, j);
    // An all-zero column carries no signal; any other zero mean is undefined.
    if (mean == 0 && cit->second[j] == 0) continue;
    if (mean == 0) throw MetricError("gamma_task: zero population mean");
    double dev = (cit->second[j] - mean) / mean;
    total += sit->second[j].lower_is_better ? -dev : dev;
  }
  return total / sit->second.size();
}

double gamma_overall(const TaskMetrics& candidate,
                     const std::vector<TaskMetrics>& population,
                     const std::map<TaskId, std::vector<MetricSpec>>& specs) {
  if (specs.empty()) throw MetricError("gamma_overall: no tasks");
  double total = 0;
  for (const auto& [task, _] : specs) total += gamma_task(candidate, population, task, specs);
  return total / specs.size();
}

double delta_t(const TaskMetrics& model, const TaskMetrics& baseline,
               const std::map<TaskId, std::vector<MetricSpec>>& specs) {
  if (specs.empty()) throw MetricError("delta_t: no tasks");
  double total = 0;
  for (const auto& [task, ms] : specs) {
    auto mit = model.find(task);
    auto bit = baseline.find(task);
    if (mit == model.end() || bit == baseline.end() ||
        mit->second.size() != ms.size() || bit->second.size() != ms.size()) {
      throw MetricError("delta_t: metrics missing for task");
    }
    double task_total = 0;
    for (size_t j = 0; j < ms.size(); ++j) {
      if (bit->second[j] == 0 && mit->second[j] == 0) continue;
      if (bit->second[j] == 0) throw MetricError("delta_t: zero baseline value");
      double dev = (mit->second[j] - bit->second[j]) / bit->second[j];
      task_total += ms[j].lower_is_better ? -dev : dev;
    }
    total += task_total / ms.size();
  }
  return total / specs.size();
}

CellConfig mutate(const CellConfig& parent, const CellSpace& space, Rng& rng,
                  double p_layer, double p_block) {
  std::bernoulli_distribution layer_coin(p_layer), block_coin(p_block);
  CellConfig child = parent;
  for (auto& [id, lc] : child.layers) {
    int level = id.level;
    if (layer_coin(rng)) lc.embed = pick(space.embed_choices[level - 1], rng);
    if (layer_coin(rng)) {
      int d = pick(space.depth_choices, rng);
      while (static_cast<int>(lc.blocks.size()) > d) lc.blocks.pop_back();
      while (static_cast<int>(lc.blocks.size()) < d) {
        lc.blocks.push_back(random_block(space, level, rng));
      }
      lc.depth = d;
    }
    for (BlockChoice& b : lc.blocks) {
      if (block_coin(rng)) b.heads = pick(space.head_choices[level - 1], rng);
      if (block_coin(rng)) b.mlp_ratio = pick(space.mlp_ratio_choices, rng);
      if (block_coin(rng)) b.window = pick(space.window_choices, rng);
    }
  }
  child.validate(space);
  return child;
}

CellConfig crossover(const CellConfig& a, const CellConfig& b, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  CellConfig child;
  for (const auto& [id, la] : a.layers) {
    auto bit = b.layers.find(id);
    if (bit == b.layers.end()) throw ConfigError("crossover: layer sets differ");
    const LayerChoice& lb = bit->second;
    LayerChoice lc;
    lc.embed = coin(rng) ? la.embed : lb.embed;
    // Depth donor also supplies the blocks so block count stays consistent.
    const LayerChoice& depth_donor = coin(rng) ? la : lb;
    lc.depth = depth_donor.depth;
    lc.blocks = depth_donor.blocks;
    child.layers[id] = std::move(lc);
  }
  if (b.layers.size() != a.layers.size()) throw ConfigError("crossover: layer sets differ");
  return child;
}

namespace {

struct EvalPool {
  const MultiTaskGraph& graph;
  const CellSpace& space;
  const EvalFn& eval;
  std::vector<Candidate> pool;
  std::unordered_map<std::uint64_t, size_t> index;
  int evaluations = 0;

  size_t evaluate(const CellConfig& cfg) {
    auto it = index.find(cfg.hash());
    if (it != index.end()) return it->second;
    Candidate c;
    c.cfg = cfg;
    c.metrics = eval(cfg);
    c.params = count_params(graph, cfg, space);
    size_t pos = pool.size();
    pool.push_back(std::move(c));
    index[cfg.hash()] = pos;
    ++evaluations;
    return pos;
  }

  std::vector<TaskMetrics> all_metrics() const {
    std::vector<TaskMetrics> out;
    out.reserve(pool.size());
    for (const Candidate& c : pool) out.push_back(c.metrics);
    return out;
  }
};

CellConfig sample_constrained(const MultiTaskGraph& graph, const CellSpace& space,
                              Rng& rng, long long constraint) {
  for (int tries = 0; tries < 10000; ++tries) {
    CellConfig cfg = sample_cell_config(space, rng, SampleMode::kUniform);
    if (count_params(graph, cfg, space) <= constraint) return cfg;
  }
  throw ConstraintError("sample_constrained: could not satisfy parameter budget");
}

void require_feasible(const MultiTaskGraph& graph, const CellSpace& space,
                      long long constraint) {
  Rng dummy(0);
  CellConfig lo = sample_cell_config(space, dummy, SampleMode::kMin);
  if (count_params(graph, lo, space) > constraint) {
    throw ConstraintError("parameter budget below the smallest config (" +
                          std::to_string(count_params(graph, lo, space)) + " params)");
  }
}

}  // namespace

EvoResult evolve(const MultiTaskGraph& graph, const CellSpace& space,
                 const EvalFn& eval,
                 const std::map<TaskId, std::vector<MetricSpec>>& specs,
                 const EvoSettings& settings) {
  if (settings.parents < 1 || settings.parents > settings.population) {
    throw ArgumentError("evolve: parents must be in [1, population]");
  }
  require_feasible(graph, space, settings.constraint);

  Rng rng(settings.seed);
  EvalPool pool{graph, space, eval};
  std::vector<size_t> population;
  for (int i = 0; i < settings.population; ++i) {
    population.push_back(pool.evaluate(sample_constrained(graph, space, rng, settings.constraint)));
  }

  EvoResult result;
  double best_so_far = -std::numeric_limits<double>::infinity();
  long long best_params = 0;
  for (int gen = 0; gen < settings.generations; ++gen) {
    std::vector<TaskMetrics> metrics = pool.all_metrics();
    std::vector<double> gammas(pool.pool.size());
    for (size_t i = 0; i < pool.pool.size(); ++i) {
      gammas[i] = gamma_overall(pool.pool[i].metrics, metrics, specs);
    }
    std::vector<size_t> ranked = population;
    std::stable_sort(ranked.begin(), ranked.end(), [&gammas](size_t a, size_t b) {
      return gammas[a] > gammas[b];
    });
    std::vector<size_t> deduped;
    for (size_t i : ranked) {
      if (std::find(deduped.begin(), deduped.end(), i) == deduped.end()) deduped.push_back(i);
    }
    ranked = std::move(deduped);

    double mean = 0;
    for (size_t i : population) mean += gammas[i];
    mean /= population.size();
    if (gammas[ranked.front()] > best_so_far) {
      best_so_far = gammas[ranked.front()];
      best_params = pool.pool[ranked.front()].params;
    }
    result.history.push_back({gen, best_so_far, mean, best_params});

    if (gen + 1 == settings.generations) break;

    std::vector<size_t> parents(ranked.begin(),
                                ranked.begin() + std::min<size_t>(settings.parents, ranked.size()));
    std::vector<size_t> next = parents;
    std::uniform_int_distribution<size_t> parent_pick(0, parents.size() - 1);
    int slots = settings.population - static_cast<int>(parents.size());
    for (int slot = 0; slot < slots; ++slot) {
      bool use_mutation = slot < (slots + 1) / 2;  // half mutation, half crossover
      CellConfig child;
      bool found = false;
      for (int tries = 0; tries < 100; ++tries) {
        if (use_mutation) {
          child = mutate(pool.pool[parents[parent_pick(rng)]].cfg, space, rng,
                         settings.p_mut_layer, settings.p_mut_block);
        } else {
          child = crossover(pool.pool[parents[parent_pick(rng)]].cfg,
                            pool.pool[parents[parent_pick(rng)]].cfg, rng);
        }
        if (count_params(graph, child, space) <= settings.constraint) {
          found = true;
          break;
        }
      }
      if (!found) child = sample_constrained(graph, space, rng, settings.constraint);
      next.push_back(pool.evaluate(child));
    }
    population = std::move(next);
  }

  std::vector<TaskMetrics> metrics = pool.all_metrics();
  size_t best = 0;
  for (size_t i = 0; i < pool.pool.size(); ++i) {
    pool.pool[i].gamma = gamma_overall(pool.pool[i].metrics, metrics, specs);
    if (pool.pool[i].gamma > pool.pool[best].gamma) best = i;
  }
  result.pool = pool.pool;
  result.best = pool.pool[best];
  result.evaluations = pool.evaluations;
  return result;
}

EvoResult random_search(const MultiTaskGraph& graph, const CellSpace& space,
                        const EvalFn& eval,
                        const std::map<TaskId, std::vector<MetricSpec>>& specs,
                        int budget, long long constraint, Rng& rng) {
  if (budget < 1) throw ArgumentError("random_search: budget must be >= 1");
  require_feasible(graph, space, constraint);

  EvalPool pool{graph, space, eval};
  long attempts = 0;
  while (pool.evaluations < budget) {
    if (++attempts > 1000L * budget) {
      throw ConstraintError("random_search: space too small for requested budget");
    }
    pool.evaluate(sample_constrained(graph, space, rng, constraint));
  }

  EvoResult result;
  std::vector<TaskMetrics> metrics = pool.all_metrics();
  size_t best = 0;
  double best_so_far = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < pool.pool.size(); ++i) {
    pool.pool[i].gamma = gamma_overall(pool.pool[i].metrics, metrics, specs);
    if (pool.pool[i].gamma > pool.pool[best].gamma) best = i;
    best_so_far = std::max(best_so_far, pool.pool[i].gamma);
    result.history.push_back({static_cast<int>(i), best_so_far, pool.pool[i].gamma,
                              pool.pool[i].params});
  }
  result.pool = pool.pool;
  result.best = pool.pool[best];
  result.evaluations = pool.evaluations;
  return result;
}

}  // namespace mtnas
