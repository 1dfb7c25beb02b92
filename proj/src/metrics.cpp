#include "telapa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace telapa {

TaskThreshold compute_threshold(const std::string& tag,
                                const std::vector<double>& scratch_best_srs,
                                double tau_min) {
  if (tau_min <= 0.0 || tau_min >= 1.0)
    throw config_error("compute_threshold: tau_min must lie in (0,1)");
  TaskThreshold t;
  t.tag = tag;
  if (scratch_best_srs.empty()) {
    t.tau = tau_min;
    t.fallback = true;
    return t;
  }
  double mean = 0.0;
  for (double v : scratch_best_srs) mean += v;
  mean /= (double)scratch_best_srs.size();
  double calibrated = 0.9 * mean;
  t.tau = std::max(calibrated, tau_min);
  t.fallback = calibrated < tau_min;
  return t;
}

double ttt(const std::vector<EvalPoint>& curve, double tau,
           std::uint64_t budget) {
  if (curve.empty()) throw usage_error("ttt: empty curve");
  for (const EvalPoint& p : curve)
    if (p.sr >= tau) return (double)p.steps;
  return (double)budget;
}

RetentionMetrics retention_metrics(const std::vector<VisitRecord>& records,
                                   const std::map<std::string, double>& taus,
                                   double eps) {
  if (records.empty()) throw usage_error("retention_metrics: no records");
  double bwt = 0.0, cov = 0.0, tr = 0.0, nb = 0.0;
  int eligible = 0;
  for (const VisitRecord& r : records) {
    auto it = taus.find(r.base_tag);
    if (it == taus.end())
      throw config_error("retention_metrics: no threshold for task " +
                         r.base_tag);
    double tau = it->second;
    bwt += r.sr_end - r.sr_post;
    if (r.sr_post >= tau) {
      cov += 1.0;
      ++eligible;
      nb += (r.sr_end - r.sr_post) / std::max(r.sr_post, eps);
    }
    if (r.sr_end >= tau) tr += 1.0;
  }
  double n = (double)records.size();
  RetentionMetrics m;
  m.bwt = bwt / n;
  m.coverage = cov / n;
  m.tr = tr / n;
  if (eligible > 0) m.nbwt = nb / (double)eligible;
  return m;
}

// ---------------------------------------------------------------------------

BasinStats basin_analysis(const std::vector<TransferSample>& samples,
                          double gamma, double tau_rank) {
  if (samples.empty()) throw usage_error("basin_analysis: no samples");
  int n = (int)samples.size();
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (samples[i].f_src > samples[best].f_src ||
        (samples[i].f_src == samples[best].f_src &&
         samples[i].candidate_id < samples[best].candidate_id))
      best = i;
  double thr = gamma * samples[best].f_src;
  std::vector<int> good;
  for (int i = 0; i < n; ++i)
    if (samples[i].f_src >= thr || i == best) good.push_back(i);

  double y_best = samples[best].y_tgt;
  const Eigen::VectorXd& zb = samples[best].z;
  BasinStats s;
  s.source_best = best;
  s.n_good = (int)good.size();

  for (int i : good) s.delta_good = std::max(s.delta_good, samples[i].y_tgt - y_best);

  struct Entry {
    int i;
    double d;
  };
  std::vector<Entry> order;
  order.reserve(good.size());
  for (int i : good) order.push_back({i, (samples[i].z - zb).norm()});
  std::sort(order.begin(), order.end(), [&](const Entry& x, const Entry& y) {
    if (x.d != y.d) return x.d < y.d;
    if ((x.i == best) != (y.i == best)) return x.i == best;  // best ranks first
    return samples[x.i].candidate_id < samples[y.i].candidate_id;
  });
  int gn = (int)order.size();
  for (int r = 0; r < gn; ++r) {
    double rho = gn > 1 ? (double)r / (double)(gn - 1) : 0.0;
    double delta = samples[order[r].i].y_tgt - y_best;
    s.rank_deltas.push_back({rho, delta});
    if (rho <= tau_rank) {
      ++s.n_basin;
      s.delta_local = std::max(s.delta_local, delta);
    }
  }

  std::vector<double> gdist;
  for (const Entry& e : order) gdist.push_back(e.d);
  double q75 = quantile(gdist, 0.75);
  double dmax = 0.0;
  for (const TransferSample& t : samples)
    dmax = std::max(dmax, (t.z - zb).norm());
  s.span_075 = dmax > 0.0 ? q75 / dmax : 0.0;
  return s;
}

// ---------------------------------------------------------------------------

std::vector<double> novelty_norm(const UnstructuredArchive& a, double eps) {
  std::size_t n = a.elites.size();
  if (n < 2) throw usage_error("novelty_norm: need at least two elites");
  std::vector<double> nu(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j != i)
        nu[i] = std::min(
            nu[i], (a.elites[i].descriptor - a.elites[j].descriptor).norm());
  double med = quantile(nu, 0.5);
  for (double& v : nu) v /= (med + eps);
  return nu;
}

GeometryReport geometry(const std::vector<const UnstructuredArchive*>& archives,
                        double eps) {
  if (archives.empty()) throw usage_error("geometry: no archives");
  int version = archives[0]->embed_version;
  GeometryReport g;
  for (const UnstructuredArchive* a : archives) {
    if (a->elites.empty())
      throw usage_error("geometry: empty archive " + a->base_tag);
    if (a->embed_version != version)
      throw usage_error("geometry: mixed embedding versions");
    Eigen::VectorXd c = Eigen::VectorXd::Zero(a->elites[0].descriptor.size());
    for (const Elite& e : a->elites) c += e.descriptor;
    c /= (double)a->elites.size();
    double r2 = 0.0;
    for (const Elite& e : a->elites) r2 += (e.descriptor - c).squaredNorm();
    r2 /= (double)a->elites.size();
    g.tags.push_back(a->base_tag);
    g.centroids.push_back(std::move(c));
    g.radii.push_back(std::sqrt(r2));
    g.degenerate.push_back(r2 == 0.0);
  }
  int k = (int)archives.size();
  g.separation = Eigen::MatrixXd::Zero(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      if (i == j) continue;
      double denom =
          std::sqrt(g.radii[i] * g.radii[i] + g.radii[j] * g.radii[j]) + eps;
      g.separation(i, j) = (g.centroids[i] - g.centroids[j]).norm() / denom;
    }
  return g;
}

// ---------------------------------------------------------------------------

LineageReport lineage_matrices(const std::vector<LineageSample>& samples,
                               const std::vector<std::string>& base_order) {
  LineageReport r;
  r.targets = base_order;
  r.sources = base_order;
  r.sources.push_back("untagged");
  int ns = (int)r.sources.size(), nt = (int)r.targets.size();
  r.immediate = Eigen::MatrixXi::Zero(ns, nt);
  r.visits = Eigen::MatrixXi::Zero(ns, nt);
  auto index_of = [&](const std::string& tag) -> int {
    for (int i = 0; i < (int)base_order.size(); ++i)
      if (base_order[i] == tag) return i;
    return -1;
  };

  std::map<std::string, std::vector<double>> breadths_by_target;
  for (const LineageSample& s : samples) {
    int tc = index_of(s.target_tag);
    if (tc < 0) continue;  // outside this curriculum
    int si = s.immediate_source.empty() ? ns - 1 : index_of(s.immediate_source);
    if (si < 0) si = ns - 1;
    r.immediate(si, tc) += 1;
    if (s.lineage.empty()) {
      r.visits(ns - 1, tc) += 1;
      continue;
    }
    std::set<std::string> distinct(s.lineage.begin(), s.lineage.end());
    for (const std::string& tag : distinct) {
      int ri = index_of(tag);
      if (ri >= 0) r.visits(ri, tc) += 1;
    }
    breadths_by_target[s.target_tag].push_back((double)distinct.size());
  }

  std::map<std::string, double> median_breadth;
  for (auto& [tag, v] : breadths_by_target) median_breadth[tag] = quantile(v, 0.5);

  for (const LineageSample& s : samples) {
    if (s.lineage.empty() || index_of(s.target_tag) < 0) continue;
    std::set<std::string> distinct(s.lineage.begin(), s.lineage.end());
    double b = (double)distinct.size();
    (b > median_breadth.at(s.target_tag) ? r.breadth_rich : r.breadth_poor)
        .push_back(s.final_sr);
    (distinct.count(s.target_tag) ? r.member : r.non_member)
        .push_back(s.final_sr);
    bool known = true, nonadj = false;
    for (std::size_t k = 0; k + 1 < s.lineage.size(); ++k) {
      int a = index_of(s.lineage[k]), bidx = index_of(s.lineage[k + 1]);
      if (a < 0 || bidx < 0) {
        known = false;
        break;
      }
      if (std::abs(a - bidx) >= 2) nonadj = true;
    }
    if (known) (nonadj ? r.non_adjacent : r.adjacent).push_back(s.final_sr);
  }
  return r;
}

}  // namespace telapa
