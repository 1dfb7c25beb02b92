#include "telapa/runner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace telapa {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Curricula

CurriculumSpec make_curriculum(const std::string& name) {
  CurriculumSpec c;
  c.name = name;
  if (name == "main")
    c.visits = {"A", "B", "C", "D", "E", "A'", "B'", "C'", "D'", "E'"};
  else if (name == "anti")
    c.visits = {"E", "D", "C", "B", "A", "E'", "D'", "C'", "B'", "A'"};
  else if (name == "scrambled")
    c.visits = {"C", "A", "E", "B", "D", "C'", "A'", "E'", "B'", "D'"};
  else
    throw config_error("unknown curriculum \"" + name +
                       "\" (custom lists use name \"custom\")");
  return c;
}

std::string base_tag(const std::string& tag) {
  bool ok = (tag.size() == 1 || (tag.size() == 2 && tag[1] == '\'')) &&
            tag[0] >= 'A' && tag[0] <= 'E';
  if (!ok) throw config_error("malformed task tag: \"" + tag + "\"");
  return tag.substr(0, 1);
}

void validate_curriculum(const CurriculumSpec& c) {
  if (c.visits.empty()) throw config_error("curriculum has no visits");
  std::set<std::string> seen;
  for (const std::string& tag : c.visits) {
    std::string b = base_tag(tag);
    if (tag.size() == 2 && !seen.count(b))
      throw config_error("primed visit " + tag + " precedes its base visit");
    seen.insert(b);
  }
}

std::vector<std::string> base_order(const CurriculumSpec& c) {
  std::vector<std::string> order;
  for (const std::string& tag : c.visits) {
    std::string b = base_tag(tag);
    if (std::find(order.begin(), order.end(), b) == order.end())
      order.push_back(b);
  }
  return order;
}

// ---------------------------------------------------------------------------
// Methods

namespace {
constexpr std::pair<Method, const char*> kMethods[] = {
    {Method::telapa, "telapa"},
    {Method::telapa_static, "telapa_static"},
    {Method::scratch, "scratch"},
    {Method::scratch_reuse, "scratch_reuse"},
    {Method::finetune, "finetune"},
    {Method::finetune_reset, "finetune_reset"},
    {Method::l2init, "l2init"},
    {Method::shrink_perturb, "shrink_perturb"},
};
}  // namespace

Method method_from_name(const std::string& name) {
  for (auto& [m, n] : kMethods)
    if (name == n) return m;
  throw config_error("unknown method: \"" + name + "\"");
}

const char* method_name(Method m) {
  for (auto& [mm, n] : kMethods)
    if (mm == m) return n;
  throw usage_error("method_name: bad enum value");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> all = [] {
    std::vector<Method> v;
    for (auto& [m, n] : kMethods) v.push_back(m);
    return v;
  }();
  return all;
}

// ---------------------------------------------------------------------------
// Configuration JSON

namespace {

struct JReader {
  const json& j;
  std::set<std::string> known;

  explicit JReader(const json& jj) : j(jj) {
    if (!j.is_object()) throw config_error("config section must be an object");
  }
  template <class T>
  void get(const char* k, T& v) {
    known.insert(k);
    if (j.contains(k)) v = j.at(k).get<T>();
  }
  const json* sub(const char* k) {
    known.insert(k);
    return j.contains(k) ? &j.at(k) : nullptr;
  }
  void finish(const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.count(it.key()))
        throw config_error("unknown config key " + where + "." + it.key());
  }
};

void read_ppo(const json& j, PpoConfig& c) {
  JReader r(j);
  r.get("horizon", c.horizon);
  r.get("minibatch", c.minibatch);
  r.get("epochs", c.epochs);
  r.get("clip", c.clip);
  r.get("gamma", c.gamma);
  r.get("gae_lambda", c.gae_lambda);
  r.get("lr", c.lr);
  r.get("value_coef", c.value_coef);
  r.get("entropy_coef", c.entropy_coef);
  r.get("grad_clip", c.grad_clip);
  r.get("hidden", c.hidden);
  r.get("eval_interval", c.eval_interval);
  r.get("eval_episodes", c.eval_episodes);
  r.get("intrinsic", c.intrinsic);
  r.get("intrinsic_beta", c.intrinsic_beta);
  r.finish("ppo");
}

json write_ppo(const PpoConfig& c) {
  return json{{"horizon", c.horizon},
              {"minibatch", c.minibatch},
              {"epochs", c.epochs},
              {"clip", c.clip},
              {"gamma", c.gamma},
              {"gae_lambda", c.gae_lambda},
              {"lr", c.lr},
              {"value_coef", c.value_coef},
              {"entropy_coef", c.entropy_coef},
              {"grad_clip", c.grad_clip},
              {"hidden", c.hidden},
              {"eval_interval", c.eval_interval},
              {"eval_episodes", c.eval_episodes},
              {"intrinsic", c.intrinsic},
              {"intrinsic_beta", c.intrinsic_beta}};
}

void read_archive(const json& j, ArchiveConfig& c) {
  JReader r(j);
  r.get("target", c.target);
  r.get("capacity", c.capacity);
  r.get("d_min_init", c.d_min_init);
  r.get("d_min_up", c.d_min_up);
  r.get("d_min_down", c.d_min_down);
  r.get("d_min_lo", c.d_min_lo);
  r.get("d_min_hi", c.d_min_hi);
  r.get("sigma0", c.sigma0);
  r.get("sigma_lo", c.sigma_lo);
  r.get("sigma_hi", c.sigma_hi);
  r.get("sigma_meta", c.sigma_meta);
  r.get("gate_floor", c.gate_floor);
  r.get("gate_frac", c.gate_frac);
  r.get("iterations", c.iterations);
  r.get("eval_episodes", c.eval_episodes);
  r.get("sketch_episodes", c.sketch_episodes);
  r.get("missing_frac_reeval", c.missing_frac_reeval);
  r.get("p_inject", c.p_inject);
  r.get("inject_lambda", c.inject_lambda);
  r.get("inject_subset", c.inject_subset);
  r.finish("archive");
}

json write_archive(const ArchiveConfig& c) {
  return json{{"target", c.target},
              {"capacity", c.capacity},
              {"d_min_init", c.d_min_init},
              {"d_min_up", c.d_min_up},
              {"d_min_down", c.d_min_down},
              {"d_min_lo", c.d_min_lo},
              {"d_min_hi", c.d_min_hi},
              {"sigma0", c.sigma0},
              {"sigma_lo", c.sigma_lo},
              {"sigma_hi", c.sigma_hi},
              {"sigma_meta", c.sigma_meta},
              {"gate_floor", c.gate_floor},
              {"gate_frac", c.gate_frac},
              {"iterations", c.iterations},
              {"eval_episodes", c.eval_episodes},
              {"sketch_episodes", c.sketch_episodes},
              {"missing_frac_reeval", c.missing_frac_reeval},
              {"p_inject", c.p_inject},
              {"inject_lambda", c.inject_lambda},
              {"inject_subset", c.inject_subset}};
}

void read_embedder(const json& j, EmbedderConfig& c) {
  JReader r(j);
  r.get("mlp_hidden", c.mlp_hidden);
  r.get("gru_hidden", c.gru_hidden);
  r.get("proj_hidden", c.proj_hidden);
  r.get("latent_dim", c.latent_dim);
  r.get("t_max", c.t_max);
  r.get("tau", c.tau);
  r.get("lambda_norm", c.lambda_norm);
  r.get("w_contrast", c.w_contrast);
  r.get("w_distill", c.w_distill);
  r.get("crop_rho", c.crop_rho);
  r.get("channel_dropout", c.channel_dropout);
  r.get("noise_sigma", c.noise_sigma);
  r.get("steps", c.steps);
  r.get("lr", c.lr);
  r.get("batch", c.batch);
  r.get("anchor_fraction", c.anchor_fraction);
  r.get("min_anchor_rows", c.min_anchor_rows);
  r.get("grad_clip", c.grad_clip);
  r.get("sigma_min", c.sigma_min);
  r.finish("embedder");
}

json write_embedder(const EmbedderConfig& c) {
  return json{{"mlp_hidden", c.mlp_hidden},
              {"gru_hidden", c.gru_hidden},
              {"proj_hidden", c.proj_hidden},
              {"latent_dim", c.latent_dim},
              {"t_max", c.t_max},
              {"tau", c.tau},
              {"lambda_norm", c.lambda_norm},
              {"w_contrast", c.w_contrast},
              {"w_distill", c.w_distill},
              {"crop_rho", c.crop_rho},
              {"channel_dropout", c.channel_dropout},
              {"noise_sigma", c.noise_sigma},
              {"steps", c.steps},
              {"lr", c.lr},
              {"batch", c.batch},
              {"anchor_fraction", c.anchor_fraction},
              {"min_anchor_rows", c.min_anchor_rows},
              {"grad_clip", c.grad_clip},
              {"sigma_min", c.sigma_min}};
}

void read_selection(const json& j, SelectionConfig& c) {
  JReader r(j);
  r.get("k_pool", c.k_pool);
  r.get("zero_shot_episodes", c.zero_shot_episodes);
  r.get("probe_budget", c.probe_budget);
  r.get("probe_checkpoint", c.probe_checkpoint);
  r.get("probe_eval_episodes", c.probe_eval_episodes);
  r.get("near_best_margin", c.near_best_margin);
  r.finish("selection");
}

json write_selection(const SelectionConfig& c) {
  return json{{"k_pool", c.k_pool},
              {"zero_shot_episodes", c.zero_shot_episodes},
              {"probe_budget", c.probe_budget},
              {"probe_checkpoint", c.probe_checkpoint},
              {"probe_eval_episodes", c.probe_eval_episodes},
              {"near_best_margin", c.near_best_margin}};
}

void read_maintenance(const json& j, MaintenanceConfig& c) {
  JReader r(j);
  r.get("min_bank_sets", c.min_bank_sets);
  r.get("refit_bank_size", c.refit_bank_size);
  r.get("anchor_fraction", c.anchor_fraction);
  r.finish("maintenance");
}

json write_maintenance(const MaintenanceConfig& c) {
  return json{{"min_bank_sets", c.min_bank_sets},
              {"refit_bank_size", c.refit_bank_size},
              {"anchor_fraction", c.anchor_fraction}};
}

}  // namespace

RunConfig config_from_json_text(const std::string& text) {
  json j = json::parse(text);
  RunConfig cfg;
  JReader r(j);
  std::string method = method_name(cfg.method);
  r.get("method", method);
  cfg.method = method_from_name(method);
  if (const json* c = r.sub("curriculum")) {
    if (c->is_string()) {
      cfg.curriculum = make_curriculum(c->get<std::string>());
    } else {
      JReader cr(*c);
      std::string name = "custom";
      cr.get("name", name);
      std::vector<std::string> visits;
      cr.get("visits", visits);
      cr.finish("curriculum");
      cfg.curriculum = name == "custom" ? CurriculumSpec{name, visits}
                                        : make_curriculum(name);
      if (name == "custom" && visits.empty())
        throw config_error("custom curriculum needs a visits list");
    }
  }
  r.get("seed", cfg.seed);
  r.get("task_seed", cfg.task_seed);
  r.get("small_tasks", cfg.small_tasks);
  r.get("budget", cfg.budget);
  r.get("end_eval_episodes", cfg.end_eval_episodes);
  r.get("l2init_lambda", cfg.l2init_lambda);
  r.get("sp_alpha", cfg.sp_alpha);
  r.get("sp_noise", cfg.sp_noise);
  r.get("out_dir", cfg.out_dir);
  if (const json* s = r.sub("ppo")) read_ppo(*s, cfg.ppo);
  if (const json* s = r.sub("archive")) read_archive(*s, cfg.archive);
  if (const json* s = r.sub("embedder")) read_embedder(*s, cfg.embedder);
  if (const json* s = r.sub("selection")) read_selection(*s, cfg.selection);
  if (const json* s = r.sub("maintenance")) read_maintenance(*s, cfg.maintenance);
  r.finish("config");
  validate_curriculum(cfg.curriculum);
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_json_text(ss.str());
}

std::string config_to_json_text(const RunConfig& cfg) {
  json j;
  j["method"] = method_name(cfg.method);
  j["curriculum"] = {{"name", cfg.curriculum.name},
                     {"visits", cfg.curriculum.visits}};
  j["seed"] = cfg.seed;
  j["task_seed"] = cfg.task_seed;
  j["small_tasks"] = cfg.small_tasks;
  j["budget"] = cfg.budget;
  j["end_eval_episodes"] = cfg.end_eval_episodes;
  j["l2init_lambda"] = cfg.l2init_lambda;
  j["sp_alpha"] = cfg.sp_alpha;
  j["sp_noise"] = cfg.sp_noise;
  j["out_dir"] = cfg.out_dir;
  j["ppo"] = write_ppo(cfg.ppo);
  j["archive"] = write_archive(cfg.archive);
  j["embedder"] = write_embedder(cfg.embedder);
  j["selection"] = write_selection(cfg.selection);
  j["maintenance"] = write_maintenance(cfg.maintenance);
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// run_sequence

namespace {

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return buf;
}

json vec_json(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

TaskSpec task_of(const RunConfig& cfg, const std::string& visit_tag) {
  TaskSpec s;
  s.family = base_tag(visit_tag)[0];
  s.small = cfg.small_tasks;
  s.seed = splitmix64(cfg.task_seed ^ fnv1a64(base_tag(visit_tag)));
  s.tag = visit_tag;
  return resolve(s);
}

}  // namespace

RunArtifacts run_sequence(const RunConfig& cfg) {
  validate_curriculum(cfg.curriculum);
  const std::vector<std::string>& visits = cfg.curriculum.visits;
  fs::create_directories(cfg.out_dir);

  RunArtifacts art;
  art.run_dir = cfg.out_dir;
  art.log_path = (fs::path(cfg.out_dir) / "log.jsonl").string();
  art.manifest_path = (fs::path(cfg.out_dir) / "manifest.json").string();

  std::ofstream log(art.log_path);
  if (!log) throw config_error("cannot write " + art.log_path);
  auto log_event = [&](const json& j) { log << j.dump() << "\n"; };

  const std::string config_text = config_to_json_text(cfg);
  const std::string config_hash = hash_hex(fnv1a64(config_text));
  log_event({{"kind", "run_start"},
             {"method", method_name(cfg.method)},
             {"seed", cfg.seed},
             {"curriculum", cfg.curriculum.name},
             {"visits", visits},
             {"config_hash", config_hash}});

  Rng root(cfg.seed);
  const int obs_dim = GridEnv::observation_dim();
  const bool archive_method =
      cfg.method == Method::telapa || cfg.method == Method::telapa_static;

  PolicyParams theta;
  bool theta_ready = false;
  PolicyParams theta0;  // l2init anchor
  nn::AdamState adam;   // carried for finetune / l2init
  bool adam_ready = false;
  std::map<std::string, PolicyParams> reuse_store;

  Rng erng = root.fork("embedder");
  EmbeddingState estate = make_embedding_state(cfg.embedder, erng);
  Banks banks;
  banks.rng = root.fork("banks");
  std::map<std::string, UnstructuredArchive> archives;
  std::vector<std::string> archive_order;
  StepMeter meter;
  std::vector<VisitRecord> records;

  auto fresh_policy = [&](Rng& r) {
    return init_policy(obs_dim, kNumActions, cfg.ppo.hidden, r);
  };

  for (std::size_t vi = 0; vi < visits.size(); ++vi) {
    const std::string tag = visits[vi];
    const std::string base = base_tag(tag);
    const TaskSpec spec = task_of(cfg, tag);
    Rng vrng = root.fork("visit-" + std::to_string(vi) + "-" + tag);
    log_event({{"kind", "visit_start"}, {"visit", vi}, {"tag", tag}, {"base", base}});

    TrainOptions topt;
    topt.budget = cfg.budget;
    topt.train_meter = &meter.train;
    topt.eval_meter = &meter.eval;
    LineageRecord seed_lineage;
    json seeded = {{"kind", "seeded"}, {"visit", vi},    {"tag", tag},
                   {"source", "scratch"}, {"candidate", -1}};

    switch (cfg.method) {
      case Method::scratch: {
        Rng irng = vrng.fork("init");
        theta = fresh_policy(irng);
        break;
      }
      case Method::scratch_reuse: {
        auto it = reuse_store.find(base);
        if (it != reuse_store.end()) {
          theta = it->second;
          seeded["source"] = base;
        } else {
          Rng irng = vrng.fork("init");
          theta = fresh_policy(irng);
        }
        break;
      }
      case Method::finetune:
      case Method::finetune_reset:
      case Method::l2init:
      case Method::shrink_perturb: {
        if (!theta_ready) {
          Rng irng = vrng.fork("init");
          theta = fresh_policy(irng);
          theta0 = theta;
          theta_ready = true;
        } else if (cfg.method == Method::shrink_perturb) {
          Rng srng = vrng.fork("sp");
          shrink_and_perturb(theta, cfg.sp_alpha, cfg.sp_noise, srng);
        }
        if (cfg.method == Method::finetune || cfg.method == Method::l2init) {
          if (!adam_ready) {
            nn::ParamRefs refs = theta.refs();
            adam = nn::make_adam_state(refs);
            adam_ready = true;
          }
          topt.optimizer = &adam;
        }
        if (cfg.method == Method::l2init) {
          topt.l2init_lambda = cfg.l2init_lambda;
          topt.l2init_anchor = &theta0;
        }
        break;
      }
      case Method::telapa:
      case Method::telapa_static: {
        bool any = false;
        for (const std::string& t : archive_order)
          any = any || !archives.at(t).elites.empty();
        if (any) {
          std::vector<const UnstructuredArchive*> as;
          for (const std::string& t : archive_order) as.push_back(&archives.at(t));
          std::vector<PoolEntry> pool = pool_candidates(as, cfg.selection);
          Rng srng = vrng.fork("select");
          SelectionResult sel =
              few_shot_select(pool, spec, cfg.selection, cfg.ppo, srng, &meter);
          for (const ProbeResult& pr : sel.probes)
            log_event({{"kind", "probe"},
                       {"visit", vi},
                       {"tag", tag},
                       {"base", base},
                       {"candidate_id", pr.candidate_id},
                       {"source_tag", pr.source_tag},
                       {"lineage", pr.lineage.visited},
                       {"f_src", pr.f_src},
                       {"descriptor", vec_json(pr.descriptor)},
                       {"zero_shot_sr", pr.zero_shot_sr},
                       {"final_sr", pr.final_sr},
                       {"recoverability", pr.recoverability},
                       {"chosen", pr.chosen}});
          const PoolEntry& chosen = pool[(std::size_t)sel.pool_index];
          theta = chosen.elite->theta;  // original elite parameters
          seed_lineage = chosen.elite->lineage;
          seeded["source"] = chosen.source_tag;
          seeded["candidate"] = chosen.elite->id;
        } else {
          Rng irng = vrng.fork("init");
          theta = fresh_policy(irng);
        }
        topt.banks = [&banks](const EpisodeSet& s) { store_episode_set(banks, s); };
        break;
      }
    }
    log_event(seeded);

    Rng trng = vrng.fork("train");
    TrainTrace trace = train_task(spec, theta, cfg.ppo, topt, trng);
    for (const TrainCheckpoint& c : trace.checkpoints)
      log_event({{"kind", "train_checkpoint"},
                 {"visit", vi},
                 {"tag", tag},
                 {"steps", c.env_steps},
                 {"sr", c.sr},
                 {"mean_reward", c.mean_reward}});
    double sr_post = trace.checkpoints.back().sr;
    log_event({{"kind", "visit_end"},
               {"visit", vi},
               {"tag", tag},
               {"base", base},
               {"sr_post", sr_post},
               {"budget", cfg.budget}});

    VisitRecord rec;
    rec.task_tag = tag;
    rec.base_tag = base;
    rec.sr_post = sr_post;
    rec.budget = cfg.budget;
    for (const TrainCheckpoint& c : trace.checkpoints)
      rec.curve.push_back({c.env_steps, c.sr});
    records.push_back(std::move(rec));

    if (cfg.method == Method::scratch_reuse) reuse_store[base] = theta;

    if (archive_method) {
      if (!estate.norm) {
        Rng nrng = vrng.fork("norm0");
        std::vector<const EpisodeSet*> bank =
            refit_bank(banks, cfg.maintenance, nrng);
        if (bank.size() < 2)
          throw config_error(
              "cannot bootstrap the normalizer: fewer than two stored "
              "evaluation sets (raise the budget or lower eval_interval)");
        Normalizer n = fit_normalizer(estate.enc, estate.cfg, bank);
        estate.version = 1;
        n.version = 1;
        estate.norm = std::move(n);
        log_event({{"kind", "normalizer_bootstrap"},
                   {"bank", bank.size()},
                   {"version", estate.version}});
      }

      std::vector<const Elite*> ipool;
      if (cfg.archive.p_inject > 0.0)
        for (const auto& [t, a] : archives)
          if (t != base)
            for (const Elite& e : a.elites) ipool.push_back(&e);
      UnstructuredArchive* existing = nullptr;
      auto ait = archives.find(base);
      if (ait != archives.end()) existing = &ait->second;
      Rng ilrng = vrng.fork("illuminate");
      IlluminateStats istats;
      UnstructuredArchive na =
          illuminate(spec, base, theta, seed_lineage, estate, cfg.archive,
                     ipool, ilrng, &meter, existing, &istats);
      log_event({{"kind", "illuminate"},
                 {"visit", vi},
                 {"tag", tag},
                 {"base", base},
                 {"size", na.elites.size()},
                 {"d_min", na.d_min},
                 {"evaluated", istats.evaluated},
                 {"accepted", istats.accepted},
                 {"version", na.embed_version}});
      if (existing) {
        ait->second = std::move(na);
      } else {
        archives.emplace(base, std::move(na));
        archive_order.push_back(base);
      }

      if (cfg.method == Method::telapa) {
        std::vector<UnstructuredArchive*> as;
        for (const std::string& t : archive_order) as.push_back(&archives.at(t));
        Rng mrng = vrng.fork("maintain");
        Rng rrng = vrng.fork("reeval");
        NativeReeval reeval = [&](const std::string& btag, const Elite& e) {
          TaskSpec ts = task_of(cfg, btag);
          Rng er = rrng.fork("elite-" + std::to_string(e.id));
          return evaluate_policy(ts, e.theta, cfg.archive.eval_episodes, er,
                                 &meter.illum);
        };
        std::size_t bank_n = bank_union_size(banks);
        MaintenanceReport mr =
            boundary_maintenance(estate, banks, as, cfg.archive,
                                 cfg.maintenance, mrng, reeval, cfg.out_dir);
        json me = {{"kind", "maintenance"}, {"visit", vi},
                   {"performed", mr.performed}, {"version", mr.new_version},
                   {"bank", bank_n},            {"archives", mr.reembedded_archives},
                   {"reevaluated", mr.reevaluated_elites}};
        if (mr.performed) {
          me["drift_l2"] = mr.mean_l2_drift;
          me["drift_cos"] = mr.mean_cosine;
        }
        log_event(me);
      }
    }
  }

  // End-of-sequence evaluation of every visit's task with whatever the
  // method retains: archive methods answer with their fittest stored elite,
  // scratch_reuse with its per-tag policy, everything else with the current
  // parameters.
  Rng endrng = root.fork("final-eval");
  for (std::size_t vi = 0; vi < visits.size(); ++vi) {
    const TaskSpec spec = task_of(cfg, visits[vi]);
    const PolicyParams* p = &theta;
    if (cfg.method == Method::scratch_reuse) {
      p = &reuse_store.at(base_tag(visits[vi]));
    } else if (archive_method) {
      const UnstructuredArchive& a = archives.at(base_tag(visits[vi]));
      const Elite* best = nullptr;
      for (const Elite& e : a.elites)
        if (!best || e.fitness > best->fitness ||
            (e.fitness == best->fitness && e.id < best->id))
          best = &e;
      p = &best->theta;
    }
    Rng er = endrng.fork("v" + std::to_string(vi));
    EpisodeSet s =
        evaluate_policy(spec, *p, cfg.end_eval_episodes, er, &meter.eval);
    records[vi].sr_end = s.mean_sr;
    log_event({{"kind", "final_eval"},
               {"visit", vi},
               {"tag", visits[vi]},
               {"base", base_tag(visits[vi])},
               {"sr_end", s.mean_sr}});
  }

  if (archive_method) {
    for (const std::string& t : archive_order)
      save_archive((fs::path(cfg.out_dir) / "archives" / t).string(), "final",
                   archives.at(t));
    fs::create_directories(fs::path(cfg.out_dir) / "embedding");
    save_embedding_state((fs::path(cfg.out_dir) / "embedding" / "final").string(),
                         estate);
  }

  log_event({{"kind", "run_end"},
             {"steps_train", meter.train},
             {"steps_eval", meter.eval},
             {"steps_probe", meter.probe},
             {"steps_illum", meter.illum}});
  log.close();

  json man;
  man["config"] = json::parse(config_text);
  man["config_hash"] = config_hash;
  man["method"] = method_name(cfg.method);
  man["seed"] = cfg.seed;
  man["budgets"] = {{"per_task", cfg.budget},
                    {"visits", visits.size()},
                    {"train", meter.train},
                    {"eval", meter.eval},
                    {"probe", meter.probe},
                    {"illum", meter.illum}};
  {
    std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    man["written_at"] = buf;  // the only timestamp; never in the JSONL log
  }
  std::ofstream mf(art.manifest_path);
  mf << man.dump(2) << "\n";
  return art;
}

// ---------------------------------------------------------------------------
// Analysis

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct ParsedRun {
  std::string dir;
  std::string method;
  std::uint64_t seed = 0;
  std::uint64_t budget = 0;
  bool complete = false;  // saw run_end
  std::vector<std::string> visits;
  std::vector<VisitRecord> records;
  std::vector<TransferSample> basin_samples;
  std::vector<LineageSample> lineage_samples;
};

ParsedRun parse_run(const std::string& run_dir) {
  ParsedRun run;
  run.dir = run_dir;
  std::ifstream log(fs::path(run_dir) / "log.jsonl");
  if (!log)
    throw config_error("no log.jsonl under " + run_dir);
  {
    std::ifstream mf(fs::path(run_dir) / "manifest.json");
    if (mf) {
      json man = json::parse(mf);
      run.method = man.at("method").get<std::string>();
      run.seed = man.at("seed").get<std::uint64_t>();
      run.budget = man.at("budgets").at("per_task").get<std::uint64_t>();
    }
  }
  std::string line;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    json e = json::parse(line);
    const std::string kind = e.at("kind").get<std::string>();
    if (kind == "run_start") {
      run.visits = e.at("visits").get<std::vector<std::string>>();
      if (run.method.empty()) run.method = e.at("method").get<std::string>();
      run.records.assign(run.visits.size(), {});
      for (std::size_t i = 0; i < run.visits.size(); ++i) {
        run.records[i].task_tag = run.visits[i];
        run.records[i].base_tag = base_tag(run.visits[i]);
      }
    } else if (kind == "train_checkpoint") {
      std::size_t vi = e.at("visit").get<std::size_t>();
      run.records.at(vi).curve.push_back(
          {e.at("steps").get<std::uint64_t>(), e.at("sr").get<double>()});
    } else if (kind == "visit_end") {
      std::size_t vi = e.at("visit").get<std::size_t>();
      run.records.at(vi).sr_post = e.at("sr_post").get<double>();
      run.records.at(vi).budget = e.at("budget").get<std::uint64_t>();
    } else if (kind == "final_eval") {
      std::size_t vi = e.at("visit").get<std::size_t>();
      run.records.at(vi).sr_end = e.at("sr_end").get<double>();
    } else if (kind == "probe") {
      TransferSample ts;
      ts.source_tag = e.at("source_tag").get<std::string>();
      ts.target_tag = e.at("base").get<std::string>();
      ts.candidate_id = e.at("candidate_id").get<int>();
      ts.f_src = e.at("f_src").get<double>();
      ts.y_tgt = e.at("final_sr").get<double>();
      const json& zv = e.at("descriptor");
      ts.z.resize((Eigen::Index)zv.size());
      for (std::size_t i = 0; i < zv.size(); ++i)
        ts.z((Eigen::Index)i) = zv[i].get<double>();
      run.basin_samples.push_back(std::move(ts));
      LineageSample ls;
      ls.target_tag = e.at("base").get<std::string>();
      ls.immediate_source = e.at("source_tag").get<std::string>();
      ls.lineage = e.at("lineage").get<std::vector<std::string>>();
      ls.final_sr = e.at("final_sr").get<double>();
      run.lineage_samples.push_back(std::move(ls));
    } else if (kind == "run_end") {
      run.complete = true;
    }
  }
  if (run.visits.empty())
    throw config_error("log under " + run_dir + " has no run_start event");
  return run;
}

std::map<std::string, double> fallback_taus(const std::vector<std::string>& visits) {
  std::map<std::string, double> taus;
  for (const std::string& v : visits)
    taus[base_tag(v)] = compute_threshold(base_tag(v), {}).tau;
  return taus;
}

struct MetricsRow {
  std::string method;
  std::uint64_t seed = 0;
  double mean_sr = 0.0, ttt_steps = 0.0, bwt = 0.0, coverage = 0.0, tr = 0.0;
  std::optional<double> nbwt;
};

MetricsRow metrics_row(const ParsedRun& run,
                       const std::map<std::string, double>& taus) {
  MetricsRow row;
  row.method = run.method;
  row.seed = run.seed;
  double sr = 0.0, tt = 0.0;
  for (const VisitRecord& r : run.records) {
    sr += r.sr_post;
    tt += ttt(r.curve, taus.at(r.base_tag), r.budget);
  }
  row.mean_sr = sr / (double)run.records.size();
  row.ttt_steps = tt / (double)run.records.size();
  RetentionMetrics all = retention_metrics(run.records, taus);
  row.coverage = all.coverage;
  row.tr = all.tr;
  row.nbwt = all.nbwt;
  if (run.records.size() >= 2) {
    std::vector<VisitRecord> prior(run.records.begin(), run.records.end() - 1);
    row.bwt = retention_metrics(prior, taus).bwt;
  }
  return row;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  out << "method,seed,mean_sr,ttt,bwt,coverage,nbwt,tr\n";
  for (const MetricsRow& r : rows) {
    out << r.method << "," << r.seed << "," << fmt(r.mean_sr) << ","
        << fmt(r.ttt_steps) << "," << fmt(r.bwt) << "," << fmt(r.coverage)
        << "," << (r.nbwt ? fmt(*r.nbwt) : std::string()) << "," << fmt(r.tr)
        << "\n";
  }
}

std::vector<UnstructuredArchive> load_final_archives(const ParsedRun& run) {
  std::vector<UnstructuredArchive> out;
  CurriculumSpec c{"custom", run.visits};
  for (const std::string& b : base_order(c)) {
    fs::path dir = fs::path(run.dir) / "archives" / b;
    if (fs::exists(dir / "final.json"))
      out.push_back(load_archive(dir.string(), "final"));
  }
  return out;
}

void write_run_csvs(const ParsedRun& run,
                    const std::map<std::string, double>& taus) {
  fs::path dir(run.dir);
  write_metrics_csv((dir / "metrics.csv").string(), {metrics_row(run, taus)});

  {
    std::ofstream out(dir / "tasks.csv");
    out << "visit,tag,base,revisit,sr_post,sr_end,tau,ttt,budget\n";
    for (std::size_t i = 0; i < run.records.size(); ++i) {
      const VisitRecord& r = run.records[i];
      double tau = taus.at(r.base_tag);
      out << i << "," << r.task_tag << "," << r.base_tag << ","
          << (r.task_tag.size() > 1 ? 1 : 0) << "," << fmt(r.sr_post) << ","
          << fmt(r.sr_end) << "," << fmt(tau) << ","
          << fmt(ttt(r.curve, tau, r.budget)) << "," << r.budget << "\n";
    }
  }

  {
    std::ofstream out(dir / "basin.csv");
    out << "source,target,n,n_good,n_basin,delta_good,span_075,delta_local\n";
    std::map<std::pair<std::string, std::string>, std::vector<TransferSample>>
        groups;
    for (const TransferSample& s : run.basin_samples)
      groups[{s.source_tag, s.target_tag}].push_back(s);
    for (const auto& [key, samples] : groups) {
      BasinStats b = basin_analysis(samples);
      out << key.first << "," << key.second << "," << samples.size() << ","
          << b.n_good << "," << b.n_basin << "," << fmt(b.delta_good) << ","
          << fmt(b.span_075) << "," << fmt(b.delta_local) << "\n";
    }
  }

  std::vector<UnstructuredArchive> finals = load_final_archives(run);
  {
    std::ofstream out(dir / "geometry.csv");
    out << "tag_a,tag_b,separation,radius_a,radius_b,degenerate_a,degenerate_b\n";
    if (finals.size() >= 2) {
      std::vector<const UnstructuredArchive*> ptrs;
      for (const UnstructuredArchive& a : finals) ptrs.push_back(&a);
      GeometryReport g = geometry(ptrs);
      for (std::size_t i = 0; i < ptrs.size(); ++i)
        for (std::size_t j = i + 1; j < ptrs.size(); ++j)
          out << g.tags[i] << "," << g.tags[j] << ","
              << fmt(g.separation((int)i, (int)j)) << "," << fmt(g.radii[i])
              << "," << fmt(g.radii[j]) << "," << (g.degenerate[i] ? 1 : 0)
              << "," << (g.degenerate[j] ? 1 : 0) << "\n";
    }
  }
  {
    std::ofstream out(dir / "latents.csv");
    out << "tag,elite_id,fitness,sr,sigma,novelty_norm";
    int zdim = finals.empty() ? 8 : (int)finals[0].elites[0].descriptor.size();
    for (int d = 0; d < zdim; ++d) out << ",z" << d;
    out << "\n";
    for (const UnstructuredArchive& a : finals) {
      std::vector<double> nov;
      if (a.elites.size() >= 2) nov = novelty_norm(a);
      for (std::size_t i = 0; i < a.elites.size(); ++i) {
        const Elite& e = a.elites[i];
        out << a.base_tag << "," << e.id << "," << fmt(e.fitness) << ","
            << fmt(e.sr) << "," << fmt(e.sigma) << ","
            << (nov.empty() ? std::string() : fmt(nov[i]));
        for (int d = 0; d < (int)e.descriptor.size(); ++d)
          out << "," << fmt(e.descriptor(d));
        out << "\n";
      }
    }
  }
  {
    CurriculumSpec c{"custom", run.visits};
    LineageReport lr = lineage_matrices(run.lineage_samples, base_order(c));
    auto write_matrix = [&](const std::string& name, const Eigen::MatrixXi& m) {
      std::ofstream out(dir / name);
      out << "source";
      for (const std::string& t : lr.targets) out << "," << t;
      out << "\n";
      for (int i = 0; i < m.rows(); ++i) {
        out << lr.sources[(std::size_t)i];
        for (int j = 0; j < m.cols(); ++j) out << "," << m(i, j);
        out << "\n";
      }
    };
    write_matrix("lineage_immediate.csv", lr.immediate);
    write_matrix("lineage_visits.csv", lr.visits);
    std::ofstream out(dir / "lineage_groups.csv");
    out << "grouping,group,n,mean_final_sr\n";
    auto emit = [&](const char* grouping, const char* side,
                    const std::vector<double>& v) {
      double m = 0.0;
      for (double x : v) m += x;
      out << grouping << "," << side << "," << v.size() << ","
          << (v.empty() ? std::string() : fmt(m / (double)v.size())) << "\n";
    };
    emit("breadth", "rich", lr.breadth_rich);
    emit("breadth", "poor", lr.breadth_poor);
    emit("membership", "member", lr.member);
    emit("membership", "non_member", lr.non_member);
    emit("adjacency", "adjacent", lr.adjacent);
    emit("adjacency", "non_adjacent", lr.non_adjacent);
  }
}

}  // namespace

void analyze_run(const std::string& run_dir,
                 const std::map<std::string, double>* taus) {
  ParsedRun run = parse_run(run_dir);
  std::map<std::string, double> t =
      taus ? *taus : fallback_taus(run.visits);
  write_run_csvs(run, t);
}

// ---------------------------------------------------------------------------
// Suites

void run_suite(const RunConfig& base, const std::vector<Method>& methods,
               const std::vector<std::uint64_t>& seeds,
               const std::string& suite_dir) {
  fs::create_directories(suite_dir);
  struct Job {
    Method m;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (Method m : methods)
    for (std::uint64_t s : seeds) jobs.push_back({m, s});

  int threads = 1;
  if (const char* env = std::getenv("TELAPA_THREADS"))
    threads = std::max(1, std::atoi(env));
  threads = std::min<int>(threads, (int)jobs.size());

  std::atomic<std::size_t> next{0};
  std::vector<std::string> failures(jobs.size());
  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      RunConfig cfg = base;
      cfg.method = jobs[i].m;
      cfg.seed = jobs[i].seed;
      cfg.out_dir = (fs::path(suite_dir) /
                     (std::string(method_name(jobs[i].m)) + "-s" +
                      std::to_string(jobs[i].seed)))
                        .string();
      try {
        run_sequence(cfg);
      } catch (const std::exception& ex) {
        failures[i] = ex.what();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  {
    std::ofstream out(fs::path(suite_dir) / "failures.txt");
    for (std::size_t i = 0; i < jobs.size(); ++i)
      if (!failures[i].empty())
        out << method_name(jobs[i].m) << "-s" << jobs[i].seed << ": "
            << failures[i] << "\n";
  }
  report_suite(suite_dir);
}

void report_suite(const std::string& suite_dir) {
  std::vector<std::string> dirs;
  for (const fs::directory_entry& e : fs::directory_iterator(suite_dir))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json"))
      dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty())
    throw config_error("no runs with a manifest.json under " + suite_dir);

  std::vector<ParsedRun> runs;
  std::vector<std::string> incomplete;
  for (const std::string& d : dirs) {
    ParsedRun r = parse_run(d);
    if (r.complete)
      runs.push_back(std::move(r));
    else
      incomplete.push_back(d);
  }
  if (runs.empty())
    throw config_error("no completed runs under " + suite_dir);

  // scratch-calibrated thresholds: best curve SR per (seed, base), averaged
  std::map<std::string, std::vector<double>> best_by_base;
  std::vector<std::string> bases;
  for (const ParsedRun& r : runs)
    for (const std::string& v : r.visits)
      if (std::find(bases.begin(), bases.end(), base_tag(v)) == bases.end())
        bases.push_back(base_tag(v));
  std::sort(bases.begin(), bases.end());
  for (const ParsedRun& r : runs) {
    if (r.method != "scratch") continue;
    std::map<std::string, double> best;
    for (const VisitRecord& rec : r.records) {
      double b = 0.0;
      for (const EvalPoint& p : rec.curve) b = std::max(b, p.sr);
      auto it = best.find(rec.base_tag);
      if (it == best.end())
        best[rec.base_tag] = b;
      else
        it->second = std::max(it->second, b);
    }
    for (const auto& [tag, b] : best) best_by_base[tag].push_back(b);
  }
  std::map<std::string, double> taus;
  std::vector<TaskThreshold> thresholds;
  for (const std::string& b : bases) {
    TaskThreshold t = compute_threshold(b, best_by_base[b]);
    taus[b] = t.tau;
    thresholds.push_back(t);
  }

  std::vector<MetricsRow> rows;
  for (const ParsedRun& r : runs) {
    write_run_csvs(r, taus);
    rows.push_back(metrics_row(r, taus));
  }
  std::sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) {
    if (a.method != b.method) return a.method < b.method;
    return a.seed < b.seed;
  });
  write_metrics_csv((fs::path(suite_dir) / "metrics.csv").string(), rows);

  {
    std::ofstream out(fs::path(suite_dir) / "thresholds.csv");
    out << "tag,tau,source\n";
    for (const TaskThreshold& t : thresholds)
      out << t.tag << "," << fmt(t.tau) << ","
          << (t.fallback ? "fallback" : "scratch-calibrated") << "\n";
  }

  std::ofstream out(fs::path(suite_dir) / "summary.txt");
  out << "suite summary: " << runs.size() << " completed run(s)\n\n";
  out << "thresholds (tau per task):\n";
  for (const TaskThreshold& t : thresholds)
    out << "  " << t.tag << "  tau=" << fmt(t.tau)
        << (t.fallback ? "  [fallback floor]" : "  [scratch-calibrated]")
        << "\n";
  out << "\nper-method aggregates (mean +/- 1.96*sd/sqrt(n) over seeds):\n";

  std::vector<std::string> methods;
  for (const MetricsRow& r : rows)
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
      methods.push_back(r.method);
  auto agg = [&](const std::vector<double>& v) -> std::pair<double, double> {
    double m = 0.0;
    for (double x : v) m += x;
    m /= (double)v.size();
    if (v.size() < 2) return {m, 0.0};
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    double sd = std::sqrt(s2 / (double)(v.size() - 1));
    return {m, 1.96 * sd / std::sqrt((double)v.size())};
  };
  for (const std::string& m : methods) {
    std::vector<double> sr, tt, bw, cv, tr, nb;
    for (const MetricsRow& r : rows) {
      if (r.method != m) continue;
      sr.push_back(r.mean_sr);
      tt.push_back(r.ttt_steps);
      bw.push_back(r.bwt);
      cv.push_back(r.coverage);
      tr.push_back(r.tr);
      if (r.nbwt) nb.push_back(*r.nbwt);
    }
    auto [srm, srh] = agg(sr);
    auto [ttm, tth] = agg(tt);
    auto [bwm, bwh] = agg(bw);
    auto [cvm, cvh] = agg(cv);
    auto [trm, trh] = agg(tr);
    out << "  " << m << " (n=" << sr.size() << ")\n";
    out << "    mean_sr  " << fmt(srm) << " +/- " << fmt(srh) << "\n";
    out << "    ttt      " << fmt(ttm) << " +/- " << fmt(tth) << " steps ("
        << fmt(ttm / 1e6) << "M)\n";
    out << "    bwt      " << fmt(bwm) << " +/- " << fmt(bwh) << "\n";
    out << "    coverage " << fmt(cvm) << " +/- " << fmt(cvh) << "\n";
    if (nb.empty()) {
      out << "    nbwt     n/a (no run reached threshold)\n";
    } else {
      auto [nbm, nbh] = agg(nb);
      out << "    nbwt     " << fmt(nbm) << " +/- " << fmt(nbh) << " (n="
          << nb.size() << ")\n";
    }
    out << "    tr       " << fmt(trm) << " +/- " << fmt(trh) << "\n";
  }

  // revisit-only SR table (primed visits)
  out << "\nrevisit mean SR (sr_post on primed visits):\n";
  for (const std::string& m : methods) {
    std::map<std::string, std::vector<double>> by_tag;
    for (const ParsedRun& r : runs) {
      if (r.method != m) continue;
      for (const VisitRecord& rec : r.records)
        if (rec.task_tag.size() > 1) by_tag[rec.task_tag].push_back(rec.sr_post);
    }
    if (by_tag.empty()) continue;
    out << "  " << m << ":";
    for (const auto& [tag, v] : by_tag) {
      double mm = 0.0;
      for (double x : v) mm += x;
      out << "  " << tag << "=" << fmt(mm / (double)v.size());
    }
    out << "\n";
  }
  if (!incomplete.empty()) {
    out << "\nincomplete runs (excluded):\n";
    for (const std::string& d : incomplete) out << "  " << d << "\n";
  }
}

}  // namespace telapa
