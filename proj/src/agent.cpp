#include "telapa/agent.hpp"

#include <algorithm>
#include <numeric>

namespace telapa {

using nn::Graph;
using nn::Mat;
using nn::V;

nn::ParamRefs PolicyParams::refs() {
  nn::ParamRefs r;
  r.add_dense("actor/l1", a1);
  r.add_dense("actor/l2", a2);
  r.add_dense("actor/head", a_head);
  r.add_dense("critic/l1", c1);
  r.add_dense("critic/l2", c2);
  r.add_dense("critic/head", c_head);
  return r;
}

PolicyParams init_policy(int obs_dim, int n_actions, int hidden, Rng& rng) {
  PolicyParams p;
  nn::init_dense(p.a1, hidden, obs_dim, rng);
  nn::init_dense(p.a2, hidden, hidden, rng);
  nn::init_dense(p.a_head, n_actions, hidden, rng);
  nn::init_dense(p.c1, hidden, obs_dim, rng);
  nn::init_dense(p.c2, hidden, hidden, rng);
  nn::init_dense(p.c_head, 1, hidden, rng);
  return p;
}

namespace {

Eigen::VectorXd mlp_head(const nn::Dense& l1, const nn::Dense& l2,
                         const nn::Dense& head, const Eigen::VectorXd& obs) {
  Eigen::VectorXd h1 =
      ((l1.w * obs + l1.b.row(0).transpose()).array().max(0.0)).matrix();
  Eigen::VectorXd h2 =
      ((l2.w * h1 + l2.b.row(0).transpose()).array().max(0.0)).matrix();
  return head.w * h2 + head.b.row(0).transpose();
}

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

}  // namespace

Eigen::VectorXd policy_logits(const PolicyParams& p,
                              const Eigen::VectorXd& obs) {
  return mlp_head(p.a1, p.a2, p.a_head, obs);
}

double policy_value(const PolicyParams& p, const Eigen::VectorXd& obs) {
  return mlp_head(p.c1, p.c2, p.c_head, obs)(0);
}

std::pair<int, double> sample_action(const PolicyParams& p,
                                     const Eigen::VectorXd& obs, Rng& rng) {
  const Eigen::VectorXd logp = log_softmax(policy_logits(p, obs));
  const Eigen::VectorXd probs = logp.array().exp();
  double u = rng.uniform();
  int a = int(probs.size()) - 1;
  double acc = 0.0;
  for (int i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    if (u < acc) {
      a = i;
      break;
    }
  }
  return {a, logp(a)};
}

Actor make_actor(const PolicyParams& p) {
  return [&p](const GridEnv& env, Rng& rng) {
    return sample_action(p, env.observe(), rng).first;
  };
}

EpisodeSet evaluate_policy(const TaskSpec& spec, const PolicyParams& params,
                           int n, Rng& rng, std::uint64_t* meter) {
  GridEnv env(spec);
  EpisodeSet set = run_episodes(env, make_actor(params), n, rng);
  if (meter)
    for (const Episode& e : set.episodes) *meter += std::uint64_t(e.features.rows());
  return set;
}

void shrink_and_perturb(PolicyParams& params, double alpha, double noise_std,
                        Rng& rng) {
  nn::ParamRefs r = params.refs();
  for (Mat* t : r.tensors)
    for (Eigen::Index i = 0; i < t->size(); ++i)
      t->data()[i] = alpha * t->data()[i] + noise_std * rng.normal();
}

// ---------------------------------------------------------------------------
// Episodic counter

std::uint64_t state_identity_key(const GridState& s) {
  std::uint64_t h = fnv1a64("state");
  h = hash_combine(h, std::uint64_t(s.x));
  h = hash_combine(h, std::uint64_t(s.y));
  h = hash_combine(h, std::uint64_t(s.dir));
  h = hash_combine(h, std::uint64_t(int(s.carried)));
  std::uint64_t flag_bits = 0;
  for (int i = 0; i < kNumFlags; ++i)
    if (s.flags[i]) flag_bits |= (1ULL << i);
  h = hash_combine(h, flag_bits);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const Cell c = s.at(x, y);
      if (c == Cell::door_locked || c == Cell::door_closed ||
          c == Cell::door_open)
        h = hash_combine(h, std::uint64_t(y) * std::uint64_t(s.w) +
                                std::uint64_t(x) + (std::uint64_t(c) << 32));
    }
  return h;
}

int EpisodicCounter::visit(const GridState& s) {
  return ++counts_[state_identity_key(s)];
}

// ---------------------------------------------------------------------------
// PPO

namespace {

struct Rollout {
  Mat obs;  // H x obs_dim
  std::vector<int> actions;
  Eigen::VectorXd logp, value, reward, adv, ret;
  std::vector<bool> terminal;
  int n = 0;
};

struct BoundPolicy {
  nn::BoundDense a1, a2, ah, c1, c2, ch;
  std::vector<V> handles;
};

BoundPolicy bind_policy(Graph& g, PolicyParams& p) {
  BoundPolicy b;
  b.a1 = nn::bind(g, p.a1);
  b.a2 = nn::bind(g, p.a2);
  b.ah = nn::bind(g, p.a_head);
  b.c1 = nn::bind(g, p.c1);
  b.c2 = nn::bind(g, p.c2);
  b.ch = nn::bind(g, p.c_head);
  b.handles = {b.a1.w, b.a1.b, b.a2.w, b.a2.b, b.ah.w, b.ah.b,
               b.c1.w, b.c1.b, b.c2.w, b.c2.b, b.ch.w, b.ch.b};
  return b;
}

}  // namespace

TrainTrace train_task(const TaskSpec& spec_in, PolicyParams& params,
                      const PpoConfig& cfg, const TrainOptions& opt, Rng& rng) {
  const TaskSpec spec = resolve(spec_in);
  TrainTrace trace;

  Rng eval_rng = rng.fork("eval");
  auto run_eval = [&](std::uint64_t at_steps) {
    EpisodeSet set =
        evaluate_policy(spec, params, cfg.eval_episodes, eval_rng, opt.eval_meter);
    double mean_ret = 0.0;
    for (const Episode& e : set.episodes) mean_ret += e.ret;
    if (!set.episodes.empty()) mean_ret /= double(set.episodes.size());
    trace.checkpoints.push_back(TrainCheckpoint{at_steps, set.mean_sr, mean_ret});
    if (opt.banks) opt.banks(set);
  };

  run_eval(0);  // pre-eval
  if (opt.budget == 0) return trace;

  GridEnv env(spec);
  Rng env_rng = rng.fork("episodes");
  env.reset(env_rng.next());
  EpisodicCounter counter;
  counter.reset();

  nn::ParamRefs refs = params.refs();
  nn::AdamState local_opt = nn::make_adam_state(refs);
  nn::AdamState* opt_state = opt.optimizer ? opt.optimizer : &local_opt;
  nn::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;

  const int obs_dim = GridEnv::observation_dim();
  Rollout ro;
  ro.obs.resize(cfg.horizon, obs_dim);
  ro.actions.resize(std::size_t(cfg.horizon));
  ro.logp.resize(cfg.horizon);
  ro.value.resize(cfg.horizon);
  ro.reward.resize(cfg.horizon);
  ro.terminal.assign(std::size_t(cfg.horizon), false);

  std::uint64_t steps_done = 0;
  std::uint64_t next_eval = std::uint64_t(cfg.eval_interval);

  while (steps_done < opt.budget) {
    // last rollout is truncated so training steps hit the budget exactly
    const int h = (int)std::min<std::uint64_t>(std::uint64_t(cfg.horizon),
                                               opt.budget - steps_done);
    // ---- collect one rollout -------------------------------------------
    for (int t = 0; t < h; ++t) {
      const Eigen::VectorXd obs = env.observe();
      const auto [a, lp] = sample_action(params, obs, rng);
      ro.obs.row(t) = obs.transpose();
      ro.actions[std::size_t(t)] = a;
      ro.logp(t) = lp;
      ro.value(t) = policy_value(params, obs);
      const auto res = env.step(a);
      double r = res.reward;
      if (cfg.intrinsic) {
        const int n_visit = counter.visit(env.state());
        r += cfg.intrinsic_beta / std::sqrt(double(n_visit));
      }
      ro.reward(t) = r;
      ro.terminal[std::size_t(t)] = res.done;
      if (res.done) {
        env.reset(env_rng.next());
        counter.reset();
      }
    }
    ro.n = h;
    steps_done += std::uint64_t(h);
    if (opt.train_meter) *opt.train_meter += std::uint64_t(h);

    // ---- GAE ------------------------------------------------------------
    ro.adv.resize(ro.n);
    ro.ret.resize(ro.n);
    const double v_last = policy_value(params, env.observe());
    double gae = 0.0;
    for (int t = ro.n - 1; t >= 0; --t) {
      const double nonterm = ro.terminal[std::size_t(t)] ? 0.0 : 1.0;
      const double v_next = (t == ro.n - 1) ? v_last : ro.value(t + 1);
      const double delta =
          ro.reward(t) + cfg.gamma * v_next * nonterm - ro.value(t);
      gae = delta + cfg.gamma * cfg.gae_lambda * nonterm * gae;
      ro.adv(t) = gae;
      ro.ret(t) = gae + ro.value(t);
    }
    if (ro.n > 1) {
      const double mean = ro.adv.mean();
      const double sd =
          std::sqrt((ro.adv.array() - mean).square().mean()) + 1e-8;
      ro.adv = (ro.adv.array() - mean) / sd;
    }

    // ---- PPO epochs ------------------------------------------------------
    std::vector<int> order(std::size_t(ro.n));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      // Fisher-Yates shuffle under our own rng
      for (int i = ro.n - 1; i > 0; --i)
        std::swap(order[std::size_t(i)],
                  order[std::size_t(rng.randint(std::uint64_t(i + 1)))]);
      for (int start = 0; start < ro.n; start += cfg.minibatch) {
        const int nb = std::min(cfg.minibatch, ro.n - start);
        Mat xb(nb, obs_dim);
        std::vector<int> ab((std::size_t)nb);
        Eigen::VectorXd lp_old(nb), adv(nb), ret(nb);
        for (int i = 0; i < nb; ++i) {
          const int src = order[std::size_t(start + i)];
          xb.row(i) = ro.obs.row(src);
          ab[std::size_t(i)] = ro.actions[std::size_t(src)];
          lp_old(i) = ro.logp(src);
          adv(i) = ro.adv(src);
          ret(i) = ro.ret(src);
        }

        Graph g;
        BoundPolicy bp = bind_policy(g, params);
        V x = g.input(xb);
        V ha = g.relu(dense_fwd(g, bp.a2, g.relu(dense_fwd(g, bp.a1, x))));
        V logits = dense_fwd(g, bp.ah, ha);
        V ls = g.sub_colvec(logits, g.logsumexp_rows(logits));
        V lp_a = g.pick_per_row(ls, ab);
        V ratio = g.exp_(g.sub(lp_a, g.input(Mat(lp_old))));
        V advv = g.input(Mat(adv));
        V surr = g.emin(g.mul(ratio, advv),
                        g.mul(g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip),
                              advv));
        V policy_loss = g.neg(g.mean(surr));

        V hc = g.relu(dense_fwd(g, bp.c2, g.relu(dense_fwd(g, bp.c1, x))));
        V v = dense_fwd(g, bp.ch, hc);
        V v_loss = g.mean(g.square(g.sub(v, g.input(Mat(ret)))));

        V probs = g.exp_(ls);
        V entropy = g.neg(g.mean(g.rowsum(g.mul(probs, ls))));

        V loss = g.add(policy_loss, g.scale(v_loss, cfg.value_coef));
        loss = g.sub(loss, g.scale(entropy, cfg.entropy_coef));

        if (opt.l2init_lambda > 0.0 && opt.l2init_anchor) {
          PolicyParams anchor_copy = *opt.l2init_anchor;
          nn::ParamRefs ar = anchor_copy.refs();
          V reg;
          for (std::size_t k = 0; k < bp.handles.size(); ++k) {
            V diff = g.sub(bp.handles[k], g.input(*ar.tensors[k]));
            V term = g.sum(g.square(diff));
            reg = k == 0 ? term : g.add(reg, term);
          }
          loss = g.add(loss, g.scale(reg, opt.l2init_lambda));
        }

        g.backward(loss);
        auto grads = nn::grads_of(g, bp.handles);
        nn::clip_global_norm(grads, cfg.grad_clip);
        nn::adam_step(refs, grads, *opt_state, adam_cfg);
      }
    }

    // ---- cadence evaluation ---------------------------------------------
    // evaluate once per rollout even when it crosses several cadence marks,
    // so checkpoint step coordinates stay strictly increasing
    bool due = false;
    while (steps_done >= next_eval && next_eval <= opt.budget) {
      due = true;
      next_eval += std::uint64_t(cfg.eval_interval);
    }
    if (due) run_eval(steps_done);
  }

  // final evaluation unless a cadence checkpoint already landed here
  if (trace.checkpoints.empty() ||
      trace.checkpoints.back().env_steps != steps_done)
    run_eval(steps_done);
  return trace;
}

}  // namespace telapa
