#pragma once

#include "telapa/archive.hpp"

namespace telapa {

// ---------------------------------------------------------------------------
// Candidate pooling and few-shot origin selection

struct SelectionConfig {
  int k_pool = 8;
  int zero_shot_episodes = 20;
  std::uint64_t probe_budget = 20000;
  std::uint64_t probe_checkpoint = 4000;  // eval cadence inside the probe
  int probe_eval_episodes = 20;
  double near_best_margin = 0.05;  // keep finals within this of the best
};

struct PoolEntry {
  const Elite* elite = nullptr;
  std::string source_tag;  // base tag of the archive it came from
};

// Greedy farthest-point down-selection over the union of all archives,
// seeded by the globally fittest elite; ties by fitness, then tag, then id.
std::vector<PoolEntry> pool_candidates(
    const std::vector<const UnstructuredArchive*>& archives,
    const SelectionConfig& cfg);

struct ProbeResult {
  int candidate_id = -1;
  std::string source_tag;
  LineageRecord lineage;
  double f_src = 0.0;          // candidate fitness on its source task
  Eigen::VectorXd descriptor;  // candidate descriptor at probe time
  double zero_shot_sr = 0.0;
  std::vector<TrainCheckpoint> trace;
  double final_sr = 0.0;
  double recoverability = 0.0;  // midpoint-checkpoint SR minus zero-shot SR
  bool chosen = false;
};

// Two-stage rule: keep candidates with final SR >= max_final - margin, pick
// the highest recoverability; ties by higher final SR, then pool order.
int select_from_probes(const std::vector<ProbeResult>& probes, double margin);

struct SelectionResult {
  int pool_index = -1;
  std::vector<ProbeResult> probes;
};

// Probes every pool candidate on the target with a fresh optimizer and a
// private parameter copy, then applies select_from_probes.
SelectionResult few_shot_select(const std::vector<PoolEntry>& pool,
                                const TaskSpec& target,
                                const SelectionConfig& scfg,
                                const PpoConfig& pcfg, Rng& rng,
                                StepMeter* meter = nullptr);

}  // namespace telapa
