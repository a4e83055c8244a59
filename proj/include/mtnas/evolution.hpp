#pragma once

#include <functional>

#include "mtnas/search_space.hpp"
#include "mtnas/tasks.hpp"

namespace mtnas {

struct Candidate {
  CellConfig cfg;
  TaskMetrics metrics;
  long long params = 0;
  double gamma = 0;
};

struct EvoSettings {
  int population = 50;
  int generations = 20;
  int parents = 10;
  double p_mut_layer = 0.4;
  double p_mut_block = 0.2;
  long long constraint = 0;
  std::uint64_t seed = 0;
};

// Relative performance of one candidate against the population mean of each
// metric, sign-corrected so that positive is always better.
double gamma_task(const TaskMetrics& candidate,
                  const std::vector<TaskMetrics>& population, TaskId task,
                  const std::map<TaskId, std::vector<MetricSpec>>& specs);

double gamma_overall(const TaskMetrics& candidate,
                     const std::vector<TaskMetrics>& population,
                     const std::map<TaskId, std::vector<MetricSpec>>& specs);

// Same form with a fixed single-task baseline in place of the population
// mean. Returned as a fraction; multiply by 100 for percent.
double delta_t(const TaskMetrics& model, const TaskMetrics& baseline,
               const std::map<TaskId, std::vector<MetricSpec>>& specs);

CellConfig mutate(const CellConfig& parent, const CellSpace& space, Rng& rng,
                  double p_layer, double p_block);

CellConfig crossover(const CellConfig& a, const CellConfig& b, Rng& rng);

using EvalFn = std::function<TaskMetrics(const CellConfig&)>;

struct EvoResult {
  std::vector<Candidate> pool;  // every unique evaluation, gamma vs final pool
  struct GenRow {
    int generation = 0;
    double best_gamma = 0;  // best-so-far (elitist)
    double mean_gamma = 0;  // population mean under the running pool
    long long best_params = 0;
  };
  std::vector<GenRow> history;
  Candidate best;
  int evaluations = 0;
};

EvoResult evolve(const MultiTaskGraph& graph, const CellSpace& space,
                 const EvalFn& eval,
                 const std::map<TaskId, std::vector<MetricSpec>>& specs,
                 const EvoSettings& settings);

// Uniform constraint-filtered sampling with the same evaluation budget
// accounting (unique configs) as evolve.
EvoResult random_search(const MultiTaskGraph& graph, const CellSpace& space,
                        const EvalFn& eval,
                        const std::map<TaskId, std::vector<MetricSpec>>& specs,
                        int budget, long long constraint, Rng& rng);

}  // namespace mtnas
