#pragma once

#include <map>
#include <optional>

#include "telapa/archive.hpp"

namespace telapa {

// ---------------------------------------------------------------------------
// Competence thresholds and retention

struct TaskThreshold {
  std::string tag;
  double tau = 0.10;
  bool fallback = false;  // true when the floor bound (or no scratch data)
};

// tau = max(0.9 * mean(scratch best SRs), tau_min)
TaskThreshold compute_threshold(const std::string& tag,
                                const std::vector<double>& scratch_best_srs,
                                double tau_min = 0.10);

struct EvalPoint {
  std::uint64_t steps = 0;
  double sr = 0.0;
};

struct VisitRecord {
  std::string task_tag;  // visit tag, primes kept
  std::string base_tag;
  double sr_post = 0.0;  // right after training this visit
  double sr_end = 0.0;   // at sequence end
  std::vector<EvalPoint> curve;
  std::uint64_t budget = 0;
};

// first recorded step count with SR >= tau; the full budget when unreached
double ttt(const std::vector<EvalPoint>& curve, double tau,
           std::uint64_t budget);

struct RetentionMetrics {
  double bwt = 0.0;
  double coverage = 0.0;
  std::optional<double> nbwt;  // absent when no record reached threshold
  double tr = 0.0;
};

// All four means run over exactly the records given (the caller chooses,
// e.g., prior-task records for BWT); thresholds are looked up by base tag.
RetentionMetrics retention_metrics(const std::vector<VisitRecord>& records,
                                   const std::map<std::string, double>& taus,
                                   double eps = 1e-8);

// ---------------------------------------------------------------------------
// Local-basin transfer analysis

struct TransferSample {
  std::string source_tag, target_tag;
  int candidate_id = -1;
  double f_src = 0.0;  // fitness on the source task
  double y_tgt = 0.0;  // transfer outcome on the target
  Eigen::VectorXd z;
};

struct BasinStats {
  int source_best = -1;  // index into the sample list
  double delta_good = 0.0;
  double span_075 = 0.0;
  double delta_local = 0.0;
  std::vector<std::pair<double, double>> rank_deltas;  // (rho, delta) over G
  int n_good = 0, n_basin = 0;
};

BasinStats basin_analysis(const std::vector<TransferSample>& samples,
                          double gamma = 0.9, double tau_rank = 0.25);

// ---------------------------------------------------------------------------
// Archive diagnostics

// nearest-neighbor distances, normalized by their median
std::vector<double> novelty_norm(const UnstructuredArchive& a,
                                 double eps = 1e-8);

struct GeometryReport {
  std::vector<std::string> tags;
  std::vector<Eigen::VectorXd> centroids;
  std::vector<double> radii;      // RMS radius
  Eigen::MatrixXd separation;     // S_kl; zero diagonal
  std::vector<bool> degenerate;   // radius exactly 0
};

GeometryReport geometry(const std::vector<const UnstructuredArchive*>& archives,
                        double eps = 1e-8);

// ---------------------------------------------------------------------------
// Lineage matrices and groupings

struct LineageSample {
  std::string target_tag;        // base tag of the probed target
  std::string immediate_source;  // base tag of the candidate's archive
  std::vector<std::string> lineage;
  double final_sr = 0.0;  // final transfer SR of the candidate's probe
};

struct LineageReport {
  std::vector<std::string> sources;  // base tags plus trailing "untagged"
  std::vector<std::string> targets;  // base tags
  Eigen::MatrixXi immediate;  // candidates per (immediate source, target)
  Eigen::MatrixXi visits;     // candidates whose lineage contains the row tag
  std::vector<double> breadth_rich, breadth_poor;  // final-SR lists
  std::vector<double> member, non_member;
  std::vector<double> adjacent, non_adjacent;
};

LineageReport lineage_matrices(const std::vector<LineageSample>& samples,
                               const std::vector<std::string>& base_order);

}  // namespace telapa
