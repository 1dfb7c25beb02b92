#pragma once

#include "telapa/maintenance.hpp"
#include "telapa/metrics.hpp"
#include "telapa/transfer.hpp"

namespace telapa {

// ---------------------------------------------------------------------------
// Curricula

struct CurriculumSpec {
  std::string name = "main";        // main | anti | scrambled | custom
  std::vector<std::string> visits;  // tags, optional prime marks (A'..E')
};

// main:      A B C D E A' B' C' D' E'
// anti:      E D C B A E' D' C' B' A'
// scrambled: C A E B D C' A' E' B' D'
CurriculumSpec make_curriculum(const std::string& name);

// strips the prime mark; throws config_error outside [A-E]'?
std::string base_tag(const std::string& tag);

// every primed visit's base must appear earlier in the list
void validate_curriculum(const CurriculumSpec& c);

// distinct base tags in first-visit order
std::vector<std::string> base_order(const CurriculumSpec& c);

// ---------------------------------------------------------------------------
// Methods and configuration

enum class Method {
  telapa,
  telapa_static,
  scratch,
  scratch_reuse,
  finetune,
  finetune_reset,
  l2init,
  shrink_perturb,
};

Method method_from_name(const std::string& name);
const char* method_name(Method m);
const std::vector<Method>& all_methods();

struct RunConfig {
  Method method = Method::telapa;
  CurriculumSpec curriculum = make_curriculum("main");
  std::uint64_t seed = 1;
  std::uint64_t task_seed = 9001;  // layout stream, shared across methods
  bool small_tasks = false;
  std::uint64_t budget = 300000;  // training env steps per task visit
  int end_eval_episodes = 20;

  PpoConfig ppo;
  ArchiveConfig archive;
  EmbedderConfig embedder;
  SelectionConfig selection;
  MaintenanceConfig maintenance;

  double l2init_lambda = 0.1;  // method l2init
  double sp_alpha = 0.9;       // method shrink_perturb
  double sp_noise = 1e-3;

  std::string out_dir = "runs/out";
};

// Partial JSON merged over the defaults; unknown keys are rejected.
RunConfig config_from_json_text(const std::string& text);
RunConfig load_config(const std::string& path);
// Full round-trip serialization (sorted keys); hash this for the manifest.
std::string config_to_json_text(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Execution

struct RunArtifacts {
  std::string run_dir;
  std::string log_path;
  std::string manifest_path;
};

// One full curriculum pass for one method and seed; writes log.jsonl,
// manifest.json, and (archive methods) snapshots + embedding state.
RunArtifacts run_sequence(const RunConfig& cfg);

// Per-run CSVs from the JSONL log and snapshots. Thresholds default to the
// fallback floor when no calibration map is supplied.
void analyze_run(const std::string& run_dir,
                 const std::map<std::string, double>* taus = nullptr);

// methods x seeds (TELAPA_THREADS-way parallel), then report_suite
void run_suite(const RunConfig& base, const std::vector<Method>& methods,
               const std::vector<std::uint64_t>& seeds,
               const std::string& suite_dir);

// Scratch-calibrated thresholds, per-run re-analysis, aggregate CSV + summary.
void report_suite(const std::string& suite_dir);

}  // namespace telapa
