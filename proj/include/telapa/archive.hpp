#pragma once

#include "telapa/agent.hpp"
#include "telapa/embedder.hpp"

namespace telapa {

// ---------------------------------------------------------------------------
// Elites and lineage

struct LineageRecord {
  std::vector<std::string> visited;  // base tags, oldest first
};

// Appends the (prime-stripped) base tag to the visited list.
void record_lineage(LineageRecord& lineage, const std::string& base_tag);

struct Elite {
  int id = -1;
  PolicyParams theta;
  double fitness = 0.0;  // mean evaluation return
  double sr = 0.0;
  Eigen::VectorXd descriptor;  // normalized behavior descriptor
  Eigen::VectorXd raw_z;       // unnormalized set descriptor
  LatentSummary summary;       // latent summary at evaluation time
  double sigma = 0.05;         // per-elite mutation scale
  EpisodeSet sketch;           // up to 10 stored evaluation episodes
  bool sketch_subsampled = false;  // sketch kept fewer than the m eval episodes
  LineageRecord lineage;
  int embed_version = 0;
};

// ---------------------------------------------------------------------------
// Configuration

struct ArchiveConfig {
  int target = 256;
  int capacity = 384;
  double d_min_init = 0.10;
  double d_min_up = 1.05;    // applied when size exceeds target
  double d_min_down = 0.99;  // applied when size is below 0.9 * target
  double d_min_lo = 1e-4;
  double d_min_hi = 10.0;

  double sigma0 = 0.05;
  double sigma_lo = 1e-3;
  double sigma_hi = 1.0;
  double sigma_meta = 0.2;  // sigma' = sigma * exp(sigma_meta * N(0,1))

  double gate_floor = 0.05;  // competence gate g = max(floor, frac * SR_base)
  double gate_frac = 0.5;

  int iterations = 300;     // mutation/evaluation rounds per illumination
  int eval_episodes = 10;   // m episodes per candidate
  int sketch_episodes = 10; // sketch keeps min(m, this)

  double missing_frac_reeval = 0.25;  // above this, re-evaluate lost sketches

  double p_inject = 0.0;     // chance to draw the parent from the pool
  double inject_lambda = 0.5;
  int inject_subset = 16;
};

// ---------------------------------------------------------------------------
// Archive

struct UnstructuredArchive {
  std::string base_tag;
  double d_min = 0.10;
  int target = 256;
  int capacity = 384;
  Eigen::VectorXd z_ref;  // descriptor of the base policy
  int embed_version = 0;
  int base_elite_id = -1;
  int next_id = 0;
  std::vector<Elite> elites;
};

enum class InsertOutcome { inserted, replaced, rejected };

// Nearest-neighbor rule: beyond d_min insert (at capacity, displace the
// weakest only if strictly fitter); within d_min replace the nearest only
// if strictly fitter and no second incumbent also sits within d_min, so an
// accepted elite is always at least d_min from everything retained.
InsertOutcome try_insert(UnstructuredArchive& a, Elite e);

// Over target: d_min grows 5%; under 0.9*target: d_min shrinks 1%. Clamped.
void adapt_dmin(UnstructuredArchive& a, const ArchiveConfig& cfg);

// Uniform parent from the archive, or with probability p_inject the best
// novelty/fitness-scored candidate of a sampled pool subset.
const Elite* select_parent(const UnstructuredArchive& a,
                           const std::vector<const Elite*>& pool,
                           const ArchiveConfig& cfg, Rng& rng);

// Log-normal self-adapted sigma, then Gaussian perturbation of every weight.
std::pair<PolicyParams, double> mutate(const Elite& parent,
                                       const ArchiveConfig& cfg, Rng& rng);

// Greedy fitness-descending repack: keeps an elite only if it is at least
// d_min from everything kept so far and capacity is not exhausted.
void repack(UnstructuredArchive& a);

// Recomputes descriptors from stored sketches under the given embedding
// state. Elites without sketches are re-evaluated through `reeval` when more
// than missing_frac_reeval of the archive lost its sketch, otherwise dropped.
using ReevalFn = std::function<EpisodeSet(const Elite&)>;
void reembed(UnstructuredArchive& a, const EmbeddingState& state,
             const ArchiveConfig& cfg, const ReevalFn& reeval = nullptr);

// ---------------------------------------------------------------------------
// Illumination

struct IlluminateStats {
  int evaluated = 0;
  int accepted = 0;
};

// MAP-Elites around the trained base policy. With `initial` the existing
// archive is refreshed in place (revisits); otherwise a new one is built.
// The base policy is evaluated, inserted, and becomes z_ref; descendants
// must clear the competence gate before insertion.
UnstructuredArchive illuminate(const TaskSpec& spec, const std::string& base_tag,
                               const PolicyParams& base_theta,
                               const LineageRecord& base_lineage,
                               const EmbeddingState& estate,
                               const ArchiveConfig& cfg,
                               const std::vector<const Elite*>& inject_pool,
                               Rng& rng, StepMeter* meter = nullptr,
                               UnstructuredArchive* initial = nullptr,
                               IlluminateStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Snapshots: JSON manifest <dir>/<name>.json + one blob per elite under
// <dir>/<name>.blobs/ (policy tensors and sketch features share the blob).

void save_archive(const std::string& dir, const std::string& name,
                  const UnstructuredArchive& a);
UnstructuredArchive load_archive(const std::string& dir,
                                 const std::string& name);

}  // namespace telapa
