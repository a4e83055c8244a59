#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "mtnas/pipeline.hpp"

using namespace mtnas;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string hex_of(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string first_line(const std::string& text) {
  return text.substr(0, text.find('\n'));
}

// Scoped output root + temp dir so runs never touch the working directory.
struct TempRun {
  fs::path dir;
  explicit TempRun(const std::string& tag) {
    dir = fs::temp_directory_path() / ("mtnas_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    setenv("MTNAS_OUTPUT_ROOT", dir.string().c_str(), 1);
  }
  ~TempRun() {
    unsetenv("MTNAS_OUTPUT_ROOT");
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
};

// Small enough to run in seconds, large enough to exercise every stage.
RunConfig tiny_config() {
  RunConfig cfg;
  cfg.dataset_size = 20;
  cfg.epochs = 1;
  cfg.iterations_per_epoch = 1;
  cfg.seed = 7;
  cfg.evo.population = 6;
  cfg.evo.generations = 3;
  cfg.evo.parents = 2;
  cfg.budgets = {1000000000LL};
  cfg.random_baseline = true;
  cfg.output_dir = "tiny";
  cfg.validate();
  return cfg;
}

std::string tiny_config_json() {
  return R"({
    "version": 1,
    "dataset_size": 20,
    "epochs": 1,
    "iterations_per_epoch": 1,
    "seed": 7,
    "evo": {"population": 6, "generations": 3, "parents": 2},
    "budgets": [1000000000],
    "random_baseline": true,
    "output_dir": "tiny"
  })";
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(MTNAS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config parsing applies defaults and rejects junk") {
  RunConfig minimal = run_config_from_json(R"({"version": 1})");
  CHECK(minimal.preset == "desk");
  CHECK(minimal.mode == SkeletonMode::kSingle);
  CHECK(minimal.epochs == 5);
  CHECK(minimal.evo.population == 50);
  CHECK(minimal.evo.generations == 20);
  CHECK(minimal.evo.parents == 10);
  CHECK(minimal.evo.p_mut_layer == 0.4);
  CHECK(minimal.evo.p_mut_block == 0.2);
  CHECK(minimal.budgets.empty());

  RunConfig full = run_config_from_json(tiny_config_json());
  CHECK(full.dataset_size == 20);
  CHECK(full.seed == 7);
  CHECK(full.evo.population == 6);
  CHECK(full.budgets == std::vector<long long>{1000000000LL});
  CHECK(full.random_baseline);
  CHECK(full.output_dir == "tiny");

  CHECK_THROWS_AS(run_config_from_json("not json"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"version": 2})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"version": 1, "bogus": 3})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"version": 1, "evo": {"mu": 1}})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"version": 1, "epochs": "five"})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"version": 1, "preset": "huge"})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"version": 1, "dataset_size": 2})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"version": 1, "tau0": 0.05})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"version": 1, "budgets": [0]})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"version": 1, "evo": {"parents": 99}})"),
                  ConfigError);
}

TEST_CASE("config hash is canonical") {
  RunConfig a = tiny_config();
  RunConfig b = tiny_config();
  CHECK(a.hash() == b.hash());
  CHECK(a.canonical_json() == b.canonical_json());

  // Key order in the source text does not matter.
  RunConfig c = run_config_from_json(R"({"seed": 7, "version": 1})");
  RunConfig d = run_config_from_json(R"({"version": 1, "seed": 7})");
  CHECK(c.hash() == d.hash());

  b.seed = 8;
  CHECK(a.hash() != b.hash());
  RunConfig e = a;
  e.output_dir = "elsewhere";
  CHECK(a.hash() != e.hash());
}

TEST_CASE("output dir resolution honors the env root") {
  RunConfig cfg = tiny_config();
  unsetenv("MTNAS_OUTPUT_ROOT");
  CHECK(resolve_output_dir(cfg) == "tiny");
  setenv("MTNAS_OUTPUT_ROOT", "/some/root", 1);
  CHECK(resolve_output_dir(cfg) == "/some/root/tiny");
  unsetenv("MTNAS_OUTPUT_ROOT");
}

TEST_CASE("train, search and report produce stamped artifacts") {
  TempRun tmp("flow");
  RunConfig cfg = tiny_config();
  const std::string out = resolve_output_dir(cfg);
  const std::string stamp = "# config " + hex_of(cfg.hash());
  const long long budget = cfg.budgets[0];

  // Search before train: no checkpoint.
  CHECK_THROWS_AS(cmd_search(cfg), ConfigError);
  // Report before search: missing artifacts.
  CHECK_THROWS_AS(cmd_report(cfg), StateError);

  cmd_train(cfg);
  CHECK(fs::exists(out + "/checkpoint.bin"));
  CHECK(first_line(slurp(out + "/history.csv")) == stamp);

  cmd_search(cfg);
  json assignment = json::parse(slurp(out + "/assignment.json"));
  CHECK(assignment.at("config_hash") == hex_of(cfg.hash()));
  CHECK(assignment.at("assignment").size() == 4);
  json graph = json::parse(slurp(out + "/union_graph.json"));
  CHECK(graph.at("config_hash") == hex_of(cfg.hash()));
  CHECK(graph.contains("components"));

  json best = json::parse(slurp(out + "/subnet_" + std::to_string(budget) + ".json"));
  CHECK(best.at("config_hash") == hex_of(cfg.hash()));
  CHECK(best.at("params").get<long long>() <= budget);
  CHECK(best.at("metrics").size() == 4);
  CellConfig best_cfg = cell_config_from_json(best.at("cell_config").dump());
  best_cfg.validate(CellSpace::from_preset(cfg.preset));

  std::istringstream hist(slurp(out + "/search_history_" + std::to_string(budget) + ".csv"));
  std::string line;
  std::getline(hist, line);
  CHECK(line == stamp);
  std::getline(hist, line);
  CHECK(line == "generation,best_gamma,mean_gamma,best_params");
  int rows = 0;
  while (std::getline(hist, line)) rows += !line.empty();
  CHECK(rows == cfg.evo.generations);

  CHECK(first_line(slurp(out + "/pool_" + std::to_string(budget) + ".csv")) == stamp);
  json rnd = json::parse(slurp(out + "/random_" + std::to_string(budget) + ".json"));
  CHECK(rnd.at("params").get<long long>() <= budget);

  // Report before baselines exist: the delta table is marked unavailable.
  cmd_report(cfg);
  std::string report = slurp(out + "/report.txt");
  CHECK(first_line(report) == stamp);
  CHECK(report.find("best subnet per budget") != std::string::npos);
  CHECK(report.find("random baseline gamma") != std::string::npos);
  CHECK(report.find("unavailable") != std::string::npos);
  std::string scatter = slurp(out + "/scatter.csv");
  CHECK(first_line(scatter) == stamp);
  CHECK(scatter.find("budget,index,params,gamma") != std::string::npos);

  // With baselines the report carries the delta table instead.
  cmd_train(cfg, true);
  json baselines = json::parse(slurp(out + "/baseline_metrics.json"));
  CHECK(baselines.at("metrics").size() == 4);
  cmd_report(cfg);
  report = slurp(out + "/report.txt");
  CHECK(report.find("unavailable") == std::string::npos);
  CHECK(report.find("baseline: 0.000000") != std::string::npos);
  CHECK(report.find("budget " + std::to_string(budget) + ":") != std::string::npos);

  // A checkpoint trained under another preset is rejected.
  RunConfig other = cfg;
  other.preset = "paper-small";
  other.evo.population = 2;
  other.evo.parents = 1;
  CHECK_THROWS_AS(cmd_search(other), ConfigError);
}

TEST_CASE("training reruns are byte-identical") {
  TempRun tmp("repro");
  RunConfig cfg = tiny_config();
  const std::string out = resolve_output_dir(cfg);

  cmd_train(cfg);
  std::string ckpt1 = slurp(out + "/checkpoint.bin");
  std::string hist1 = slurp(out + "/history.csv");
  cmd_train(cfg);
  CHECK(slurp(out + "/checkpoint.bin") == ckpt1);
  CHECK(slurp(out + "/history.csv") == hist1);

  RunConfig other = cfg;
  other.seed = 8;
  cmd_train(other);
  CHECK(slurp(out + "/checkpoint.bin") != ckpt1);
}

TEST_CASE("cli exit codes") {
  TempRun tmp("cli");
  fs::path good = tmp.dir / "good.json";
  std::ofstream(good) << tiny_config_json();
  fs::path bad = tmp.dir / "bad.json";
  std::ofstream(bad) << R"({"version": 1, "bogus": true})";

  CHECK(run_cli("train --config " + bad.string()) == 2);
  CHECK(run_cli("train --config " + (tmp.dir / "absent.json").string()) == 2);
  CHECK(run_cli("report --config " + good.string()) == 3);
  CHECK(run_cli("train --config " + good.string()) == 0);
  CHECK(run_cli("search --config " + good.string() + " --seed 7") == 0);
  CHECK(run_cli("report --config " + good.string()) == 0);
  // Budget override below the smallest subnet: constraint failure.
  CHECK(run_cli("search --config " + good.string() + " --budget 10") == 2);
}
