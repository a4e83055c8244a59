#include <CLI11.hpp>
#include <iostream>

#include "mtnas/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"multi-task one-shot architecture search pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool single_task = false;
  std::vector<long long> budgets;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config file (JSON)")->required();
    cmd->add_option("--seed", seed, "override the config seed")
        ->each([&](const std::string&) { seed_set = true; });
    cmd->add_option("--budget", budgets, "override parameter budgets (repeatable)");
  };

  CLI::App* train = app.add_subcommand("train", "train the supernet");
  add_common(train);
  train->add_flag("--single-task", single_task,
                  "train per-task baselines at the smallest config");
  CLI::App* search = app.add_subcommand("search", "skeleton + cell search");
  add_common(search);
  CLI::App* report = app.add_subcommand("report", "summarize a finished run");
  add_common(report);

  CLI11_PARSE(app, argc, argv);

  try {
    mtnas::RunConfig cfg = mtnas::load_run_config(config_path);
    if (seed_set) {
      cfg.seed = seed;
      cfg.validate();
    }
    if (!budgets.empty()) {
      cfg.budgets = budgets;
      cfg.validate();
    }
    if (train->parsed()) {
      mtnas::cmd_train(cfg, single_task);
    } else if (search->parsed()) {
      mtnas::cmd_search(cfg);
    } else {
      mtnas::cmd_report(cfg);
    }
  } catch (const mtnas::StateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
