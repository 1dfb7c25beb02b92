// Command-line front end: run / illuminate / analyze / report / suite.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>

#include "telapa/maintenance.hpp"
#include "telapa/runner.hpp"

namespace fs = std::filesystem;
using namespace telapa;

namespace {

// Standalone single-task illumination: train a base policy, bootstrap the
// embedding normalizer from its evaluation sets, illuminate, save the archive.
int do_illuminate(const std::string& tag, const RunConfig& cfg) {
  RunConfig c = cfg;
  c.curriculum = CurriculumSpec{"custom", {tag}};
  validate_curriculum(c.curriculum);
  c.method = Method::telapa_static;  // one task: no boundary maintenance
  RunArtifacts art = run_sequence(c);
  std::printf("archive written under %s/archives/%s\n", art.run_dir.c_str(),
              base_tag(tag).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual-RL laboratory: per-task policy archives with "
               "latent-space transfer"};
  app.require_subcommand(1);

  std::string config_path, method, out_dir, task_tag, run_dir, suite_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::uint64_t budget = 0;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;

  auto load = [&]() {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (!method.empty()) cfg.method = method_from_name(method);
    if (seed_set) cfg.seed = seed;
    if (budget > 0) cfg.budget = budget;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    return cfg;
  };

  CLI::App* run = app.add_subcommand("run", "execute one curriculum run");
  run->add_option("--config", config_path, "JSON config file");
  run->add_option("--method", method, "method name override");
  run->add_option("--seed", seed, "seed override")
      ->each([&](const std::string&) { seed_set = true; });
  run->add_option("--budget", budget, "per-task env-step budget override");
  run->add_option("--out", out_dir, "output directory override");

  CLI::App* illum =
      app.add_subcommand("illuminate", "train + illuminate a single task");
  illum->add_option("--task", task_tag, "task tag, e.g. A or C'")->required();
  illum->add_option("--config", config_path, "JSON config file");
  illum->add_option("--seed", seed, "seed override")
      ->each([&](const std::string&) { seed_set = true; });
  illum->add_option("--budget", budget, "training env-step budget override");
  illum->add_option("--out", out_dir, "output directory override");

  CLI::App* analyze =
      app.add_subcommand("analyze", "emit metric CSVs for a finished run");
  analyze->add_option("--run-dir", run_dir, "run directory with log.jsonl")
      ->required();

  CLI::App* report =
      app.add_subcommand("report", "aggregate a suite directory");
  report->add_option("--suite-dir", suite_dir, "directory of run directories")
      ->required();

  CLI::App* suite = app.add_subcommand("suite", "run a method x seed grid");
  suite->add_option("--config", config_path, "JSON base config file");
  suite->add_option("--methods", methods, "method names (default: all)")
      ->delimiter(',');
  suite->add_option("--seeds", seeds, "seed list")->delimiter(',')->required();
  suite->add_option("--out", suite_dir, "suite output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      RunArtifacts art = run_sequence(load());
      analyze_run(art.run_dir);
      std::printf("run complete: %s\n", art.run_dir.c_str());
    } else if (illum->parsed()) {
      return do_illuminate(task_tag, load());
    } else if (analyze->parsed()) {
      analyze_run(run_dir);
      std::printf("analysis written under %s\n", run_dir.c_str());
    } else if (report->parsed()) {
      report_suite(suite_dir);
      std::printf("report written under %s\n", suite_dir.c_str());
    } else if (suite->parsed()) {
      std::vector<Method> ms;
      if (methods.empty())
        ms = all_methods();
      else
        for (const std::string& m : methods) ms.push_back(method_from_name(m));
      RunConfig base = config_path.empty() ? RunConfig{} : load_config(config_path);
      if (budget > 0) base.budget = budget;
      run_suite(base, ms, seeds, suite_dir);
      std::printf("suite complete: %s\n", suite_dir.c_str());
    }
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}
