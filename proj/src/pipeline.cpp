#include "mtnas/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace mtnas {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw PersistenceError("cannot open for writing: " + path);
  out << content;
  if (!out) throw PersistenceError("write failed: " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("missing artifact: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void reject_unknown(const json& j, const std::vector<std::string>& known,
                    const std::string& scope) {
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key '" + key + "' in " + scope);
    }
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

TaskMetrics eval_subnet(const Supernet& sn, const MultiTaskGraph& graph,
                        const std::vector<TaskSpec>& tasks, const Dataset& ds,
                        const std::vector<int>& idxs, const CellConfig& cfg) {
  autograd::NoGradGuard guard;
  SubnetView view = slice(sn, cfg);
  std::map<TaskId, std::vector<Array>> outputs;
  std::vector<Scene> scenes;
  for (int i : idxs) {
    const Scene& scene = ds.scenes[i];
    scenes.push_back(scene);
    std::map<LayerId, Tensor> features = forward_grid(view, graph, scene_image_tensor(scene));
    for (const TaskSpec& t : tasks) {
      Tensor out = run_task_head(view, t.id, t.head, graph.assignment.at(t.id), features);
      outputs[t.id].push_back(out.value());
    }
  }
  return evaluate(outputs, scenes, tasks);
}

json metrics_json(const TaskMetrics& m) {
  json out = json::object();
  for (const auto& [task, values] : m) out[std::to_string(task)] = values;
  return out;
}

TaskMetrics metrics_from_json(const json& j) {
  TaskMetrics out;
  for (const auto& [key, values] : j.items()) {
    out[std::stoi(key)] = values.get<std::vector<double>>();
  }
  return out;
}

}  // namespace

void RunConfig::validate() const {
  if (version != 1) throw ConfigError("unsupported config version");
  CellSpace space = CellSpace::from_preset(preset);
  space.validate();
  if (dataset_size < 4) throw ConfigError("dataset_size must be >= 4");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (tau0 <= 0 || tau_min <= 0 || tau_min > tau0) {
    throw ConfigError("temperature schedule requires 0 < tau_min <= tau0");
  }
  if (logit_lr <= 0) throw ConfigError("logit_lr must be positive");
  if (evo.parents < 1 || evo.parents > evo.population) {
    throw ConfigError("evo.parents must be in [1, evo.population]");
  }
  if (evo.p_mut_layer < 0 || evo.p_mut_layer > 1 || evo.p_mut_block < 0 ||
      evo.p_mut_block > 1) {
    throw ConfigError("mutation probabilities must be in [0, 1]");
  }
  for (long long b : budgets) {
    if (b <= 0) throw ConfigError("budgets must be positive");
  }
}

std::string RunConfig::canonical_json() const {
  json j;
  j["version"] = version;
  j["mode"] = to_string(mode);
  j["preset"] = preset;
  j["dataset_size"] = dataset_size;
  j["epochs"] = epochs;
  j["iterations_per_epoch"] = iterations_per_epoch;
  j["seed"] = seed;
  j["tau0"] = tau0;
  j["tau_min"] = tau_min;
  j["logit_lr"] = logit_lr;
  j["evo"] = {{"population", evo.population},
              {"generations", evo.generations},
              {"parents", evo.parents},
              {"p_mut_layer", evo.p_mut_layer},
              {"p_mut_block", evo.p_mut_block}};
  j["budgets"] = budgets;
  j["random_baseline"] = random_baseline;
  j["output_dir"] = output_dir;
  return j.dump();
}

std::uint64_t RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : canonical_json()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, {"version", "mode", "preset", "dataset_size", "epochs",
                     "iterations_per_epoch", "seed", "tau0", "tau_min", "logit_lr",
                     "evo", "budgets", "random_baseline", "output_dir"},
                 "config root");
  RunConfig cfg;
  try {
    cfg.version = j.at("version").get<int>();
    if (j.contains("mode")) cfg.mode = skeleton_mode_from_string(j["mode"].get<std::string>());
    if (j.contains("preset")) cfg.preset = j["preset"].get<std::string>();
    if (j.contains("dataset_size")) cfg.dataset_size = j["dataset_size"].get<int>();
    if (j.contains("epochs")) cfg.epochs = j["epochs"].get<int>();
    if (j.contains("iterations_per_epoch")) {
      cfg.iterations_per_epoch = j["iterations_per_epoch"].get<int>();
    }
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("tau0")) cfg.tau0 = j["tau0"].get<double>();
    if (j.contains("tau_min")) cfg.tau_min = j["tau_min"].get<double>();
    if (j.contains("logit_lr")) cfg.logit_lr = j["logit_lr"].get<double>();
    if (j.contains("evo")) {
      const json& e = j["evo"];
      reject_unknown(e, {"population", "generations", "parents", "p_mut_layer",
                         "p_mut_block"}, "evo");
      if (e.contains("population")) cfg.evo.population = e["population"].get<int>();
      if (e.contains("generations")) cfg.evo.generations = e["generations"].get<int>();
      if (e.contains("parents")) cfg.evo.parents = e["parents"].get<int>();
      if (e.contains("p_mut_layer")) cfg.evo.p_mut_layer = e["p_mut_layer"].get<double>();
      if (e.contains("p_mut_block")) cfg.evo.p_mut_block = e["p_mut_block"].get<double>();
    }
    if (j.contains("budgets")) cfg.budgets = j["budgets"].get<std::vector<long long>>();
    if (j.contains("random_baseline")) cfg.random_baseline = j["random_baseline"].get<bool>();
    if (j.contains("output_dir")) cfg.output_dir = j["output_dir"].get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config value: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return run_config_from_json(os.str());
}

std::string resolve_output_dir(const RunConfig& cfg) {
  const char* root = std::getenv("MTNAS_OUTPUT_ROOT");
  if (root && *root) return std::string(root) + "/" + cfg.output_dir;
  return cfg.output_dir;
}

void cmd_train(const RunConfig& cfg, bool single_task) {
  cfg.validate();
  const std::string out = resolve_output_dir(cfg);
  fs::create_directories(out);
  const std::string stamp = "# config " + hash_hex(cfg.hash()) + "\n";

  Dataset ds = generate_dataset(cfg.dataset_size, cfg.seed);
  std::vector<TaskSpec> tasks = default_tasks();
  CellSpace space = CellSpace::from_preset(cfg.preset);

  TrainSettings settings;
  settings.epochs = cfg.epochs;
  settings.iterations_per_epoch = cfg.iterations_per_epoch;
  settings.tau0 = cfg.tau0;
  settings.tau_min = cfg.tau_min;
  settings.opt.logit_lr = cfg.logit_lr;
  settings.seed = cfg.seed;

  if (!single_task) {
    Supernet sn = init_supernet(space, cfg.mode, head_shapes(tasks), cfg.seed);
    TrainHistory history = train_supernet(sn, ds, tasks, settings);
    save_checkpoint(sn, out + "/checkpoint.bin");
    write_text(out + "/history.csv", stamp + history.to_csv());
    return;
  }

  // Per-task baselines: same epoch budget, smallest subnet only.
  settings.min_config_only = true;
  json baselines;
  baselines["version"] = 1;
  baselines["config_hash"] = hash_hex(cfg.hash());
  json table = json::object();
  for (const TaskSpec& t : tasks) {
    std::vector<TaskSpec> solo{t};
    Supernet sn = init_supernet(space, cfg.mode, head_shapes(solo),
                                cfg.seed + static_cast<std::uint64_t>(t.id));
    train_supernet(sn, ds, solo, settings);
    std::map<TaskId, Skeleton> assignment = discretize(sn);
    MultiTaskGraph graph = union_skeletons(assignment, head_shapes(solo));
    Rng rng(cfg.seed);
    CellConfig min_cfg = sample_cell_config(space, rng, SampleMode::kMin);
    TaskMetrics metrics = eval_subnet(sn, graph, solo, ds, ds.val, min_cfg);
    table[std::to_string(t.id)] = metrics.at(t.id);
  }
  baselines["metrics"] = table;
  write_text(out + "/baseline_metrics.json", baselines.dump(2) + "\n");
}

void cmd_search(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.budgets.empty()) throw ConfigError("search requires at least one budget");
  const std::string out = resolve_output_dir(cfg);
  fs::create_directories(out);
  const std::string hex = hash_hex(cfg.hash());
  const std::string stamp = "# config " + hex + "\n";

  const std::string ckpt = out + "/checkpoint.bin";
  if (!fs::exists(ckpt)) throw ConfigError("missing checkpoint: " + ckpt);
  Supernet sn = load_checkpoint(ckpt);
  if (sn.space.preset != cfg.preset || sn.mode != cfg.mode) {
    throw ConfigError("checkpoint preset/mode does not match config");
  }

  Dataset ds = generate_dataset(cfg.dataset_size, cfg.seed);
  std::vector<TaskSpec> tasks = default_tasks();
  std::map<TaskId, std::vector<MetricSpec>> specs = metric_specs(tasks);

  // Stage 1: discretize + union.
  std::map<TaskId, Skeleton> assignment = discretize(sn);
  json assignment_json;
  assignment_json["version"] = 1;
  assignment_json["config_hash"] = hex;
  json amap = json::object();
  for (const auto& [task, skel] : assignment) {
    amap[std::to_string(task)] = json::parse(skeleton_to_json(skel));
  }
  assignment_json["assignment"] = amap;
  write_text(out + "/assignment.json", assignment_json.dump(2) + "\n");

  MultiTaskGraph graph = union_skeletons(assignment, head_shapes(tasks));
  json graph_json = json::parse(graph_to_json(graph));
  graph_json["config_hash"] = hex;
  write_text(out + "/union_graph.json", graph_json.dump(2) + "\n");

  // Stage 2: evolve per budget.
  EvalFn fn = [&](const CellConfig& c) {
    return eval_subnet(sn, graph, tasks, ds, ds.val, c);
  };
  for (size_t i = 0; i < cfg.budgets.size(); ++i) {
    long long budget = cfg.budgets[i];
    EvoSettings es = cfg.evo;
    es.constraint = budget;
    es.seed = cfg.seed + 1000 * (i + 1);
    EvoResult result = evolve(graph, sn.space, fn, specs, es);

    json best;
    best["version"] = 1;
    best["config_hash"] = hex;
    best["budget"] = budget;
    best["params"] = result.best.params;
    best["gamma"] = result.best.gamma;
    best["metrics"] = metrics_json(result.best.metrics);
    best["cell_config"] = json::parse(cell_config_to_json(result.best.cfg));
    write_text(out + "/subnet_" + std::to_string(budget) + ".json", best.dump(2) + "\n");

    std::ostringstream hist;
    hist << stamp << "generation,best_gamma,mean_gamma,best_params\n";
    hist.precision(17);
    for (const auto& row : result.history) {
      hist << row.generation << "," << row.best_gamma << "," << row.mean_gamma
           << "," << row.best_params << "\n";
    }
    write_text(out + "/search_history_" + std::to_string(budget) + ".csv", hist.str());

    std::ostringstream poolcsv;
    poolcsv << stamp << "index,params,gamma\n";
    poolcsv.precision(17);
    for (size_t k = 0; k < result.pool.size(); ++k) {
      poolcsv << k << "," << result.pool[k].params << "," << result.pool[k].gamma << "\n";
    }
    write_text(out + "/pool_" + std::to_string(budget) + ".csv", poolcsv.str());

    if (cfg.random_baseline) {
      Rng rng(es.seed + 7);
      EvoResult rnd = random_search(graph, sn.space, fn, specs, result.evaluations,
                                    budget, rng);
      json rj;
      rj["version"] = 1;
      rj["config_hash"] = hex;
      rj["budget"] = budget;
      rj["evaluations"] = rnd.evaluations;
      rj["params"] = rnd.best.params;
      rj["gamma"] = rnd.best.gamma;
      rj["metrics"] = metrics_json(rnd.best.metrics);
      rj["cell_config"] = json::parse(cell_config_to_json(rnd.best.cfg));
      write_text(out + "/random_" + std::to_string(budget) + ".json", rj.dump(2) + "\n");
    }
  }
}

void cmd_report(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.budgets.empty()) throw ConfigError("report requires at least one budget");
  const std::string out = resolve_output_dir(cfg);
  const std::string hex = hash_hex(cfg.hash());

  std::vector<TaskSpec> tasks = default_tasks();
  std::map<TaskId, std::vector<MetricSpec>> specs = metric_specs(tasks);

  read_text(out + "/union_graph.json");  // presence check

  TaskMetrics baseline;
  bool have_baseline = fs::exists(out + "/baseline_metrics.json");
  if (have_baseline) {
    json b = json::parse(read_text(out + "/baseline_metrics.json"));
    baseline = metrics_from_json(b.at("metrics"));
  }

  std::ostringstream report;
  report << "# config " << hex << "\n";
  report << "run: " << cfg.output_dir << " (preset " << cfg.preset << ", "
         << to_string(cfg.mode) << "-scale)\n\n";
  report << "best subnet per budget:\n";

  std::ostringstream scatter;
  scatter << "# config " << hex << "\n";
  scatter << "budget,index,params,gamma\n";
  scatter.precision(17);

  for (long long budget : cfg.budgets) {
    json best;
    try {
      best = json::parse(read_text(out + "/subnet_" + std::to_string(budget) + ".json"));
    } catch (const json::exception& e) {
      throw StateError(std::string("corrupt subnet artifact: ") + e.what());
    }
    report << "  budget " << budget << ": params " << best.at("params").get<long long>()
           << ", gamma " << fmt(best.at("gamma").get<double>());
    std::string rpath = out + "/random_" + std::to_string(budget) + ".json";
    if (fs::exists(rpath)) {
      json rnd = json::parse(read_text(rpath));
      report << " (random baseline gamma " << fmt(rnd.at("gamma").get<double>()) << ")";
    }
    report << "\n";

    std::istringstream pool(read_text(out + "/pool_" + std::to_string(budget) + ".csv"));
    std::string line;
    std::getline(pool, line);  // stamp
    std::getline(pool, line);  // header
    while (std::getline(pool, line)) {
      if (!line.empty()) scatter << budget << "," << line << "\n";
    }
  }

  report << "\ndelta_T vs single-task baselines (percent):\n";
  if (have_baseline) {
    report << "  baseline: " << fmt(100 * delta_t(baseline, baseline, specs)) << "\n";
    for (long long budget : cfg.budgets) {
      json best = json::parse(read_text(out + "/subnet_" + std::to_string(budget) + ".json"));
      TaskMetrics m = metrics_from_json(best.at("metrics"));
      report << "  budget " << budget << ": " << fmt(100 * delta_t(m, baseline, specs))
             << "\n";
    }
  } else {
    report << "  unavailable: run `mtnas train --single-task` first\n";
  }

  write_text(out + "/report.txt", report.str());
  write_text(out + "/scatter.csv", scatter.str());
}

}  // namespace mtnas
