#include "telapa/archive.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace telapa {

namespace fs = std::filesystem;
using nlohmann::json;

void record_lineage(LineageRecord& lineage, const std::string& base_tag) {
  lineage.visited.push_back(base_tag);
}

static double ddist(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm();
}

// ---------------------------------------------------------------------------
// Insertion

InsertOutcome try_insert(UnstructuredArchive& a, Elite e) {
  if (e.embed_version != a.embed_version)
    throw usage_error("try_insert: stale descriptor (elite version " +
                      std::to_string(e.embed_version) + ", archive version " +
                      std::to_string(a.embed_version) + ")");
  if (a.elites.empty()) {
    e.id = a.next_id++;
    a.elites.push_back(std::move(e));
    return InsertOutcome::inserted;
  }
  std::size_t ni = 0;
  double nd = ddist(e.descriptor, a.elites[0].descriptor);
  for (std::size_t i = 1; i < a.elites.size(); ++i) {
    double d = ddist(e.descriptor, a.elites[i].descriptor);
    if (d < nd) {
      nd = d;
      ni = i;
    }
  }
  auto displace = [&](std::size_t at) {
    if (a.elites[at].id == a.base_elite_id) a.base_elite_id = -1;
    e.id = a.next_id++;
    a.elites[at] = std::move(e);
  };
  if (nd >= a.d_min) {
    if ((int)a.elites.size() < a.capacity) {
      e.id = a.next_id++;
      a.elites.push_back(std::move(e));
      return InsertOutcome::inserted;
    }
    std::size_t wi = 0;  // weakest elite; first of any fitness tie
    for (std::size_t i = 1; i < a.elites.size(); ++i)
      if (a.elites[i].fitness < a.elites[wi].fitness) wi = i;
    if (e.fitness > a.elites[wi].fitness) {
      displace(wi);
      return InsertOutcome::replaced;
    }
    return InsertOutcome::rejected;
  }
  if (e.fitness > a.elites[ni].fitness) {
    // replacing the nearest must not leave the candidate crowding a second
    // incumbent, so spacing stays clean without evicting anything else
    for (std::size_t i = 0; i < a.elites.size(); ++i)
      if (i != ni && ddist(e.descriptor, a.elites[i].descriptor) < a.d_min)
        return InsertOutcome::rejected;
    displace(ni);
    return InsertOutcome::replaced;
  }
  return InsertOutcome::rejected;
}

void adapt_dmin(UnstructuredArchive& a, const ArchiveConfig& cfg) {
  int n = (int)a.elites.size();
  if (n > a.target)
    a.d_min *= cfg.d_min_up;
  else if (n < 0.9 * a.target)
    a.d_min *= cfg.d_min_down;
  a.d_min = std::clamp(a.d_min, cfg.d_min_lo, cfg.d_min_hi);
}

// ---------------------------------------------------------------------------
// Variation

const Elite* select_parent(const UnstructuredArchive& a,
                           const std::vector<const Elite*>& pool,
                           const ArchiveConfig& cfg, Rng& rng) {
  if (a.elites.empty()) throw usage_error("select_parent: empty archive");
  bool inject = cfg.p_inject > 0.0 && !pool.empty() &&
                rng.uniform() < cfg.p_inject;
  if (!inject) return &a.elites[rng.randint(a.elites.size())];

  int k = std::min<int>((int)pool.size(), cfg.inject_subset);
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (int j = 0; j < k; ++j) {  // partial Fisher-Yates sample w/o replacement
    std::size_t r = j + rng.randint(idx.size() - j);
    std::swap(idx[j], idx[r]);
  }
  double fmin = std::numeric_limits<double>::infinity(), fmax = -fmin;
  for (int j = 0; j < k; ++j) {
    fmin = std::min(fmin, pool[idx[j]]->fitness);
    fmax = std::max(fmax, pool[idx[j]]->fitness);
  }
  double span = fmax - fmin;
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < k; ++j) {
    const Elite* c = pool[idx[j]];
    double d = std::numeric_limits<double>::infinity();
    for (const Elite& e : a.elites) d = std::min(d, ddist(c->descriptor, e.descriptor));
    double fn = span > 1e-12 ? (c->fitness - fmin) / span : 0.0;
    double score = d + cfg.inject_lambda * fn;
    if (score > best_score) {
      best_score = score;
      best = j;
    }
  }
  return pool[idx[best]];
}

std::pair<PolicyParams, double> mutate(const Elite& parent,
                                       const ArchiveConfig& cfg, Rng& rng) {
  double s = std::clamp(parent.sigma * std::exp(cfg.sigma_meta * rng.normal()),
                        cfg.sigma_lo, cfg.sigma_hi);
  PolicyParams child = parent.theta;
  nn::ParamRefs refs = child.refs();
  for (nn::Mat* t : refs.tensors)
    for (Eigen::Index r = 0; r < t->rows(); ++r)
      for (Eigen::Index c = 0; c < t->cols(); ++c) (*t)(r, c) += s * rng.normal();
  return {std::move(child), s};
}

// ---------------------------------------------------------------------------
// Repack / re-embed

void repack(UnstructuredArchive& a) {
  std::vector<std::size_t> order(a.elites.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (a.elites[x].fitness != a.elites[y].fitness)
      return a.elites[x].fitness > a.elites[y].fitness;
    return a.elites[x].id < a.elites[y].id;
  });
  std::vector<Elite> kept;
  kept.reserve(a.elites.size());
  for (std::size_t i : order) {
    if ((int)kept.size() >= a.capacity) break;
    bool ok = true;
    for (const Elite& k : kept)
      if (ddist(a.elites[i].descriptor, k.descriptor) < a.d_min) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(std::move(a.elites[i]));
  }
  a.elites = std::move(kept);
  if (a.base_elite_id >= 0) {
    bool found = false;
    for (const Elite& e : a.elites) found = found || e.id == a.base_elite_id;
    if (!found) a.base_elite_id = -1;
  }
}

void reembed(UnstructuredArchive& a, const EmbeddingState& state,
             const ArchiveConfig& cfg, const ReevalFn& reeval) {
  if (!a.elites.empty()) {
    std::size_t missing = 0;
    for (const Elite& e : a.elites)
      if (e.sketch.episodes.empty()) ++missing;
    if (missing > 0) {
      double frac = double(missing) / double(a.elites.size());
      if (frac > cfg.missing_frac_reeval && reeval) {
        for (Elite& e : a.elites)
          if (e.sketch.episodes.empty()) e.sketch = reeval(e);
      }
      // anything still sketchless cannot live in the new space
      a.elites.erase(std::remove_if(a.elites.begin(), a.elites.end(),
                                    [&](const Elite& e) {
                                      return e.sketch.episodes.empty();
                                    }),
                     a.elites.end());
    }
    for (Elite& e : a.elites) {
      e.summary = summarize_policy(state.enc, state.cfg, e.sketch);
      e.raw_z = e.summary.z_mean;
      e.descriptor = normalize(state, e.raw_z);
      e.embed_version = state.version;
    }
  }
  // reference descriptor follows the base elite; falls back to the fittest
  const Elite* ref = nullptr;
  for (const Elite& e : a.elites)
    if (e.id == a.base_elite_id) ref = &e;
  if (!ref)
    for (const Elite& e : a.elites)
      if (!ref || e.fitness > ref->fitness ||
          (e.fitness == ref->fitness && e.id < ref->id))
        ref = &e;
  if (ref) a.z_ref = ref->descriptor;
  a.embed_version = state.version;
}

// ---------------------------------------------------------------------------
// Illumination

UnstructuredArchive illuminate(const TaskSpec& spec, const std::string& base_tag,
                               const PolicyParams& base_theta,
                               const LineageRecord& base_lineage,
                               const EmbeddingState& estate,
                               const ArchiveConfig& cfg,
                               const std::vector<const Elite*>& inject_pool,
                               Rng& rng, StepMeter* meter,
                               UnstructuredArchive* initial,
                               IlluminateStats* stats) {
  UnstructuredArchive a;
  if (initial) {
    a = std::move(*initial);
  } else {
    a.base_tag = base_tag;
    a.d_min = cfg.d_min_init;
    a.target = cfg.target;
    a.capacity = cfg.capacity;
    a.embed_version = estate.version;
  }
  std::uint64_t* illum = meter ? &meter->illum : nullptr;

  auto finish = [&](PolicyParams th, double sigma, EpisodeSet set,
                    LineageRecord lin) {
    Elite e;
    e.sigma = sigma;
    e.sr = set.mean_sr;
    double f = 0.0;
    for (const Episode& ep : set.episodes) f += ep.ret;
    e.fitness = set.episodes.empty() ? 0.0 : f / double(set.episodes.size());
    e.summary = summarize_policy(estate.enc, estate.cfg, set);
    e.raw_z = e.summary.z_mean;
    e.descriptor = normalize(estate, e.raw_z);
    e.embed_version = estate.version;
    int keep = std::min<int>((int)set.episodes.size(), cfg.sketch_episodes);
    e.sketch_subsampled = keep < (int)set.episodes.size();
    std::vector<Episode> sk(set.episodes.begin(), set.episodes.begin() + keep);
    e.sketch = make_episode_set(std::move(sk), set.source_tag);
    e.lineage = std::move(lin);
    e.theta = std::move(th);
    return e;
  };

  EpisodeSet base_set =
      evaluate_policy(spec, base_theta, cfg.eval_episodes, rng, illum);
  double gate = std::max(cfg.gate_floor, cfg.gate_frac * base_set.mean_sr);
  LineageRecord blin = base_lineage;
  record_lineage(blin, base_tag);
  Elite base =
      finish(base_theta, cfg.sigma0, std::move(base_set), std::move(blin));
  a.z_ref = base.descriptor;
  if (try_insert(a, std::move(base)) != InsertOutcome::rejected) {
    a.base_elite_id = a.next_id - 1;
    adapt_dmin(a, cfg);
  }

  for (int it = 0; it < cfg.iterations; ++it) {
    const Elite* parent = select_parent(a, inject_pool, cfg, rng);
    LineageRecord lin = parent->lineage;
    auto [theta, sigma] = mutate(*parent, cfg, rng);
    EpisodeSet set = evaluate_policy(spec, theta, cfg.eval_episodes, rng, illum);
    if (stats) stats->evaluated++;
    if (set.mean_sr < gate) continue;
    if (lin.visited.empty() || lin.visited.back() != base_tag)
      record_lineage(lin, base_tag);
    Elite child =
        finish(std::move(theta), sigma, std::move(set), std::move(lin));
    if (try_insert(a, std::move(child)) != InsertOutcome::rejected) {
      if (stats) stats->accepted++;
      adapt_dmin(a, cfg);
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Snapshots

static json vec_json(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

static Eigen::VectorXd json_vec(const json& arr) {
  Eigen::VectorXd v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) v((Eigen::Index)i) = arr[i].get<double>();
  return v;
}

void save_archive(const std::string& dir, const std::string& name,
                  const UnstructuredArchive& a) {
  fs::path blobs = fs::path(dir) / (name + ".blobs");
  fs::create_directories(blobs);
  json m;
  m["base_tag"] = a.base_tag;
  m["d_min"] = a.d_min;
  m["target"] = a.target;
  m["capacity"] = a.capacity;
  m["embedding_version"] = a.embed_version;
  m["base_elite_id"] = a.base_elite_id;
  m["next_id"] = a.next_id;
  m["z_ref"] = vec_json(a.z_ref);
  json index = json::array();
  for (const Elite& e : a.elites) {
    std::string blob_name = "elite-" + std::to_string(e.id) + ".bin";
    json je;
    je["id"] = e.id;
    je["fitness"] = e.fitness;
    je["sr"] = e.sr;
    je["sigma"] = e.sigma;
    je["descriptor"] = vec_json(e.descriptor);
    je["raw_z"] = vec_json(e.raw_z);
    je["z_std_ep"] = vec_json(e.summary.z_std_ep);
    je["z_std_time"] = vec_json(e.summary.z_std_time);
    je["lineage"] = e.lineage.visited;
    je["embedding_version"] = e.embed_version;
    je["sketch_subsampled"] = e.sketch_subsampled;
    je["blob"] = blob_name;
    json sk;
    sk["source_tag"] = e.sketch.source_tag;
    sk["mean_sr"] = e.sketch.mean_sr;
    json eps = json::array();
    for (const Episode& ep : e.sketch.episodes) {
      json jep;
      jep["task_tag"] = ep.task_tag;
      jep["seed"] = ep.seed;
      jep["return"] = ep.ret;
      jep["success"] = ep.success;
      eps.push_back(std::move(jep));
    }
    sk["episodes"] = std::move(eps);
    je["sketch"] = std::move(sk);
    index.push_back(std::move(je));

    PolicyParams th = e.theta;  // refs() needs mutable storage
    nn::ParamRefs refs = th.refs();
    std::vector<nn::Mat> feats;
    feats.reserve(e.sketch.episodes.size());
    for (const Episode& ep : e.sketch.episodes) feats.push_back(ep.features);
    for (std::size_t k = 0; k < feats.size(); ++k) {
      char tag[32];
      std::snprintf(tag, sizeof(tag), "sketch/%04zu", k);
      refs.add(tag, feats[k]);
    }
    nn::save_blob((blobs / blob_name).string(), refs);
  }
  m["elites"] = std::move(index);
  std::ofstream out(fs::path(dir) / (name + ".json"));
  out << m.dump(2) << "\n";
}

UnstructuredArchive load_archive(const std::string& dir,
                                 const std::string& name) {
  fs::path mpath = fs::path(dir) / (name + ".json");
  std::ifstream in(mpath);
  if (!in) throw config_error("load_archive: cannot open " + mpath.string());
  json m = json::parse(in);
  UnstructuredArchive a;
  a.base_tag = m.at("base_tag").get<std::string>();
  a.d_min = m.at("d_min").get<double>();
  a.target = m.at("target").get<int>();
  a.capacity = m.at("capacity").get<int>();
  a.embed_version = m.at("embedding_version").get<int>();
  a.base_elite_id = m.at("base_elite_id").get<int>();
  a.next_id = m.at("next_id").get<int>();
  a.z_ref = json_vec(m.at("z_ref"));
  fs::path blobs = fs::path(dir) / (name + ".blobs");
  for (const json& je : m.at("elites")) {
    Elite e;
    e.id = je.at("id").get<int>();
    e.fitness = je.at("fitness").get<double>();
    e.sr = je.at("sr").get<double>();
    e.sigma = je.at("sigma").get<double>();
    e.descriptor = json_vec(je.at("descriptor"));
    e.raw_z = json_vec(je.at("raw_z"));
    e.summary.z_mean = e.raw_z;
    e.summary.z_std_ep = json_vec(je.at("z_std_ep"));
    e.summary.z_std_time = json_vec(je.at("z_std_time"));
    e.lineage.visited = je.at("lineage").get<std::vector<std::string>>();
    e.embed_version = je.at("embedding_version").get<int>();
    e.sketch_subsampled = je.at("sketch_subsampled").get<bool>();

    auto pairs =
        nn::load_blob_raw((blobs / je.at("blob").get<std::string>()).string());
    nn::ParamRefs refs = e.theta.refs();
    std::vector<nn::Mat> feats;
    for (auto& [pname, mat] : pairs) {
      if (pname.rfind("sketch/", 0) == 0) {
        feats.push_back(std::move(mat));  // blob order preserves episode order
        continue;
      }
      bool matched = false;
      for (std::size_t i = 0; i < refs.names.size(); ++i)
        if (refs.names[i] == pname) {
          *refs.tensors[i] = std::move(mat);
          matched = true;
          break;
        }
      if (!matched)
        throw config_error("load_archive: unknown tensor " + pname + " in " +
                           je.at("blob").get<std::string>());
    }
    const json& sk = je.at("sketch");
    const json& eps = sk.at("episodes");
    if (eps.size() != feats.size())
      throw config_error("load_archive: sketch episode count mismatch for elite " +
                         std::to_string(e.id));
    std::vector<Episode> episodes;
    episodes.reserve(eps.size());
    for (std::size_t k = 0; k < eps.size(); ++k) {
      Episode ep;
      ep.task_tag = eps[k].at("task_tag").get<std::string>();
      ep.seed = eps[k].at("seed").get<std::uint64_t>();
      ep.features = std::move(feats[k]);
      ep.ret = eps[k].at("return").get<double>();
      ep.success = eps[k].at("success").get<bool>();
      episodes.push_back(std::move(ep));
    }
    e.sketch.episodes = std::move(episodes);
    e.sketch.source_tag = sk.at("source_tag").get<std::string>();
    e.sketch.mean_sr = sk.at("mean_sr").get<double>();
    a.elites.push_back(std::move(e));
  }
  return a;
}

}  // namespace telapa
