#include "telapa/transfer.hpp"

#include <algorithm>
#include <limits>

namespace telapa {

std::vector<PoolEntry> pool_candidates(
    const std::vector<const UnstructuredArchive*>& archives,
    const SelectionConfig& cfg) {
  std::vector<PoolEntry> pool;
  int version = -1;
  for (const UnstructuredArchive* a : archives) {
    if (a->elites.empty()) continue;
    if (version < 0) version = a->embed_version;
    if (a->embed_version != version)
      throw usage_error("pool_candidates: archives at mixed embedding versions");
    for (const Elite& e : a->elites) pool.push_back({&e, a->base_tag});
  }
  if (pool.empty()) throw usage_error("pool_candidates: empty archive union");

  // (fitness desc, tag asc, id asc) preference among equally distant picks
  auto prefer = [](const PoolEntry& x, const PoolEntry& y) {
    if (x.elite->fitness != y.elite->fitness)
      return x.elite->fitness > y.elite->fitness;
    if (x.source_tag != y.source_tag) return x.source_tag < y.source_tag;
    return x.elite->id < y.elite->id;
  };

  int want = std::min<int>(cfg.k_pool, (int)pool.size());
  std::vector<PoolEntry> chosen;
  std::vector<bool> used(pool.size(), false);
  std::size_t seed = 0;
  for (std::size_t i = 1; i < pool.size(); ++i)
    if (prefer(pool[i], pool[seed])) seed = i;
  chosen.push_back(pool[seed]);
  used[seed] = true;
  while ((int)chosen.size() < want) {
    std::size_t best = pool.size();
    double best_d = -1.0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (used[i]) continue;
      double d = std::numeric_limits<double>::infinity();
      for (const PoolEntry& c : chosen)
        d = std::min(d,
                     (pool[i].elite->descriptor - c.elite->descriptor).norm());
      if (best == pool.size() || d > best_d ||
          (d == best_d && prefer(pool[i], pool[best]))) {
        best = i;
        best_d = d;
      }
    }
    chosen.push_back(pool[best]);
    used[best] = true;
  }
  return chosen;
}

int select_from_probes(const std::vector<ProbeResult>& probes, double margin) {
  if (probes.empty()) throw usage_error("select_from_probes: no probes");
  double max_final = -std::numeric_limits<double>::infinity();
  for (const ProbeResult& p : probes) max_final = std::max(max_final, p.final_sr);
  int best = -1;
  for (int i = 0; i < (int)probes.size(); ++i) {
    if (probes[i].final_sr < max_final - margin) continue;
    if (best < 0 || probes[i].recoverability > probes[best].recoverability ||
        (probes[i].recoverability == probes[best].recoverability &&
         probes[i].final_sr > probes[best].final_sr))
      best = i;
  }
  return best;
}

SelectionResult few_shot_select(const std::vector<PoolEntry>& pool,
                                const TaskSpec& target,
                                const SelectionConfig& scfg,
                                const PpoConfig& pcfg, Rng& rng,
                                StepMeter* meter) {
  if (pool.empty()) throw usage_error("few_shot_select: empty pool");
  std::uint64_t* pm = meter ? &meter->probe : nullptr;
  SelectionResult res;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Elite& cand = *pool[i].elite;
    Rng prng = rng.fork("probe-" + std::to_string(i));
    ProbeResult pr;
    pr.candidate_id = cand.id;
    pr.source_tag = pool[i].source_tag;
    pr.lineage = cand.lineage;
    pr.f_src = cand.fitness;
    pr.descriptor = cand.descriptor;
    pr.zero_shot_sr =
        evaluate_policy(target, cand.theta, scfg.zero_shot_episodes, prng, pm)
            .mean_sr;

    PolicyParams copy = cand.theta;  // probes never touch the archive
    PpoConfig probe_cfg = pcfg;
    probe_cfg.eval_interval = (int)scfg.probe_checkpoint;
    probe_cfg.eval_episodes = scfg.probe_eval_episodes;
    probe_cfg.intrinsic = false;
    TrainOptions opt;
    opt.budget = scfg.probe_budget;
    opt.train_meter = pm;
    opt.eval_meter = pm;
    TrainTrace trace = train_task(target, copy, probe_cfg, opt, prng);
    pr.trace = trace.checkpoints;
    pr.final_sr = pr.trace.empty() ? 0.0 : pr.trace.back().sr;
    double mid_sr = pr.zero_shot_sr;
    for (const TrainCheckpoint& c : pr.trace)
      if (c.env_steps * 2 >= scfg.probe_budget) {
        mid_sr = c.sr;
        break;
      }
    pr.recoverability = mid_sr - pr.zero_shot_sr;
    res.probes.push_back(std::move(pr));
  }
  res.pool_index = select_from_probes(res.probes, scfg.near_best_margin);
  res.probes[res.pool_index].chosen = true;
  return res;
}

}  // namespace telapa
