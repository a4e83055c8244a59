#pragma once

#include <string>
#include <vector>

#include "mtnas/evolution.hpp"
#include "mtnas/skeleton_search.hpp"

namespace mtnas {

// Versioned run configuration; unknown keys are rejected.
struct RunConfig {
  int version = 1;
  SkeletonMode mode = SkeletonMode::kSingle;
  std::string preset = "desk";
  int dataset_size = 24;
  int epochs = 5;
  int iterations_per_epoch = -1;
  std::uint64_t seed = 1;
  double tau0 = 5.0;
  double tau_min = 0.1;
  double logit_lr = 0.05;
  EvoSettings evo;  // constraint/seed filled per budget at search time
  std::vector<long long> budgets;
  bool random_baseline = false;
  std::string output_dir = "run";

  void validate() const;
  std::string canonical_json() const;
  std::uint64_t hash() const;  // stamped into every artifact
};

RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Resolved output directory: $MTNAS_OUTPUT_ROOT/<output_dir> when the env
// var is set, else <output_dir>.
std::string resolve_output_dir(const RunConfig& cfg);

// Pipeline stages. Throw ConfigError / PersistenceError on bad inputs
// (CLI exit 2) and StateError on an incomplete run (CLI exit 3).
void cmd_train(const RunConfig& cfg, bool single_task = false);
void cmd_search(const RunConfig& cfg);
void cmd_report(const RunConfig& cfg);

}  // namespace mtnas
