#pragma once

#include "telapa/archive.hpp"

namespace telapa {

// ---------------------------------------------------------------------------
// Episode-set banks

struct StoredSet {
  std::uint64_t id = 0;  // shared across banks so the union can de-duplicate
  EpisodeSet set;
};

struct AnchorBank {
  std::size_t capacity = 512;      // FIFO eviction
  double sr_threshold = 0.50;      // admission: mean SR >= threshold
  std::vector<StoredSet> sets;
};

struct ReplayBank {
  std::size_t capacity = 2048;     // reservoir sampling once full
  std::uint64_t seen = 0;          // total sets ever offered
  std::vector<StoredSet> sets;
};

struct Banks {
  AnchorBank anchors;
  ReplayBank replay;
  std::uint64_t next_set_id = 0;
  Rng rng{0x9e3779b97f4a7c15ULL};  // reservoir randomness; reseed via fork
};

// Every set enters replay (reservoir once full); sets with mean SR >= 0.50
// also enter the anchor bank.
void store_episode_set(Banks& banks, const EpisodeSet& set);

// anchors plus the replay sets not already stored as anchors
std::size_t bank_union_size(const Banks& banks);

// ---------------------------------------------------------------------------
// Drift and the boundary procedure

// mean pairwise L2 distance and cosine similarity; both-zero vectors count
// as cosine 1, a single zero vector as 0
std::pair<double, double> drift_metrics(
    const std::vector<Eigen::VectorXd>& old_z,
    const std::vector<Eigen::VectorXd>& new_z);

struct MaintenanceConfig {
  std::size_t min_bank_sets = 32;  // below this the boundary is a no-op
  int refit_bank_size = 256;
  double anchor_fraction = 0.33;   // of the refit bank drawn from anchors
};

// Samples the normalizer refit bank: anchor_fraction of min(refit_bank_size,
// available) drawn from the anchors, the rest from de-duplicated replay.
// Pointers stay valid until the banks are next modified.
std::vector<const EpisodeSet*> refit_bank(const Banks& banks,
                                          const MaintenanceConfig& mcfg,
                                          Rng& rng);

struct MaintenanceReport {
  bool performed = false;
  int new_version = 0;
  double mean_l2_drift = 0.0;   // meaningful only when performed
  double mean_cosine = 0.0;
  int reembedded_archives = 0;
  int reevaluated_elites = 0;
};

// Re-evaluates an elite on its native task (identified by the archive's base
// tag) to rebuild a lost trajectory sketch.
using NativeReeval =
    std::function<EpisodeSet(const std::string& base_tag, const Elite&)>;

// The between-task boundary: train the encoder on the banks, bump the
// version, refit the normalizer with the anchor fraction, re-embed and
// repack every archive (stale snapshots first), report anchor drift.
// Below min_bank_sets nothing is touched.
MaintenanceReport boundary_maintenance(
    EmbeddingState& state, Banks& banks,
    const std::vector<UnstructuredArchive*>& archives,
    const ArchiveConfig& acfg, const MaintenanceConfig& mcfg, Rng& rng,
    const NativeReeval& reeval = nullptr,
    const std::string& snapshot_root = "");  // "" disables stale snapshots

}  // namespace telapa
