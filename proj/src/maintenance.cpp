#include "telapa/maintenance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace telapa {

void store_episode_set(Banks& banks, const EpisodeSet& set) {
  if (set.episodes.empty()) throw usage_error("store_episode_set: empty set");
  StoredSet s{banks.next_set_id++, set};
  banks.replay.seen++;
  if (banks.replay.sets.size() < banks.replay.capacity) {
    banks.replay.sets.push_back(s);
  } else {
    std::uint64_t j = banks.rng.randint(banks.replay.seen);
    if (j < banks.replay.capacity) banks.replay.sets[(std::size_t)j] = s;
  }
  if (set.mean_sr >= banks.anchors.sr_threshold) {
    banks.anchors.sets.push_back(std::move(s));
    if (banks.anchors.sets.size() > banks.anchors.capacity)
      banks.anchors.sets.erase(banks.anchors.sets.begin());
  }
}

std::size_t bank_union_size(const Banks& banks) {
  std::unordered_set<std::uint64_t> aid;
  for (const StoredSet& s : banks.anchors.sets) aid.insert(s.id);
  std::size_t n = banks.anchors.sets.size();
  for (const StoredSet& s : banks.replay.sets)
    if (!aid.count(s.id)) ++n;
  return n;
}

std::pair<double, double> drift_metrics(
    const std::vector<Eigen::VectorXd>& old_z,
    const std::vector<Eigen::VectorXd>& new_z) {
  if (old_z.size() != new_z.size())
    throw usage_error("drift_metrics: length mismatch");
  if (old_z.empty()) throw usage_error("drift_metrics: empty input");
  double l2 = 0.0, cos = 0.0;
  for (std::size_t i = 0; i < old_z.size(); ++i) {
    l2 += (new_z[i] - old_z[i]).norm();
    double na = old_z[i].norm(), nb = new_z[i].norm();
    if (na == 0.0 && nb == 0.0)
      cos += 1.0;
    else if (na > 0.0 && nb > 0.0)
      cos += old_z[i].dot(new_z[i]) / (na * nb);
  }
  double n = (double)old_z.size();
  return {l2 / n, cos / n};
}

namespace {

void bank_views(const Banks& banks, std::vector<const EpisodeSet*>& anchors,
                std::vector<const EpisodeSet*>& replay) {
  std::unordered_set<std::uint64_t> aid;
  for (const StoredSet& s : banks.anchors.sets) {
    anchors.push_back(&s.set);
    aid.insert(s.id);
  }
  for (const StoredSet& s : banks.replay.sets)
    if (!aid.count(s.id)) replay.push_back(&s.set);
}

std::vector<const EpisodeSet*> sample_sets(
    const std::vector<const EpisodeSet*>& v, int k, Rng& rng) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<const EpisodeSet*> out;
  for (int j = 0; j < k; ++j) {
    std::size_t r = j + (std::size_t)rng.randint(idx.size() - (std::size_t)j);
    std::swap(idx[j], idx[r]);
    out.push_back(v[idx[j]]);
  }
  return out;
}

}  // namespace

std::vector<const EpisodeSet*> refit_bank(const Banks& banks,
                                          const MaintenanceConfig& mcfg,
                                          Rng& rng) {
  std::vector<const EpisodeSet*> anchor_view, replay_view;
  bank_views(banks, anchor_view, replay_view);
  int avail_a = (int)anchor_view.size(), avail_r = (int)replay_view.size();
  int bank_size = std::min<int>(mcfg.refit_bank_size, avail_a + avail_r);
  int want_a = std::min<int>(
      avail_a, (int)std::lround(mcfg.anchor_fraction * bank_size));
  int want_r = std::min<int>(avail_r, bank_size - want_a);
  want_a = std::min<int>(avail_a, bank_size - want_r);
  std::vector<const EpisodeSet*> bank = sample_sets(anchor_view, want_a, rng);
  for (const EpisodeSet* p : sample_sets(replay_view, want_r, rng))
    bank.push_back(p);
  return bank;
}

MaintenanceReport boundary_maintenance(
    EmbeddingState& state, Banks& banks,
    const std::vector<UnstructuredArchive*>& archives,
    const ArchiveConfig& acfg, const MaintenanceConfig& mcfg, Rng& rng,
    const NativeReeval& reeval, const std::string& snapshot_root) {
  MaintenanceReport rep;
  rep.new_version = state.version;
  if (bank_union_size(banks) < mcfg.min_bank_sets) return rep;

  std::vector<const EpisodeSet*> anchor_view, replay_view;
  bank_views(banks, anchor_view, replay_view);

  // anchor descriptors under the outgoing state, for the drift report
  std::vector<Eigen::VectorXd> old_z;
  if (state.norm)
    for (const EpisodeSet* s : anchor_view)
      old_z.push_back(
          normalize(state, raw_set_descriptor(state.enc, state.cfg, *s)));

  boundary_train(state, anchor_view, replay_view, rng);

  int old_version = state.version;
  state.version += 1;
  {
    std::vector<const EpisodeSet*> bank = refit_bank(banks, mcfg, rng);
    Normalizer n = fit_normalizer(state.enc, state.cfg, bank);
    n.version = state.version;
    state.norm = std::move(n);
  }

  for (UnstructuredArchive* a : archives) {
    if (!snapshot_root.empty())
      save_archive(snapshot_root + "/archives/" + a->base_tag,
                   "stale-v" + std::to_string(old_version), *a);
    int reevals = 0;
    ReevalFn fn;
    if (reeval) {
      const std::string tag = a->base_tag;
      fn = [&reeval, &reevals, tag](const Elite& e) {
        ++reevals;
        return reeval(tag, e);
      };
    }
    reembed(*a, state, acfg, fn);
    repack(*a);
    rep.reevaluated_elites += reevals;
    rep.reembedded_archives++;
  }

  if (!old_z.empty()) {
    std::vector<Eigen::VectorXd> new_z;
    for (const EpisodeSet* s : anchor_view)
      new_z.push_back(
          normalize(state, raw_set_descriptor(state.enc, state.cfg, *s)));
    std::tie(rep.mean_l2_drift, rep.mean_cosine) = drift_metrics(old_z, new_z);
  }
  rep.performed = true;
  rep.new_version = state.version;
  return rep;
}

}  // namespace telapa
