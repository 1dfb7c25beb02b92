#include <doctest.h>

#include <cmath>
#include <telapa/agent.hpp>

using namespace telapa;
using Vec = Eigen::VectorXd;

namespace {

TaskSpec make_spec(char family, bool small, std::uint64_t seed) {
  TaskSpec s;
  s.family = family;
  s.small = small;
  s.seed = seed;
  s.tag = std::string(1, family);
  return resolve(s);
}

PpoConfig tiny_cfg() {
  PpoConfig cfg;
  cfg.horizon = 256;
  cfg.minibatch = 64;
  cfg.epochs = 2;
  cfg.hidden = 16;
  cfg.eval_interval = 1000;
  cfg.eval_episodes = 4;
  return cfg;
}

PolicyParams tiny_policy(const PpoConfig& cfg, Rng& rng) {
  return init_policy(GridEnv::observation_dim(), kNumActions, cfg.hidden, rng);
}

// plain-Eigen two-layer relu MLP, the independent route for the policy heads
Vec mlp_ref(const nn::Dense& l1, const nn::Dense& l2, const nn::Dense& head,
            const Vec& x) {
  const Vec h1 = ((l1.w * x) + l1.b.transpose()).cwiseMax(0.0);
  const Vec h2 = ((l2.w * h1) + l2.b.transpose()).cwiseMax(0.0);
  return (head.w * h2) + head.b.transpose();
}

}  // namespace

TEST_SUITE("agent") {
  // -------------------------------------------------------------------------
  // policy heads

  TEST_CASE("policy heads match an independent forward pass") {
    Rng rng(11);
    const PpoConfig cfg = tiny_cfg();
    const PolicyParams p = tiny_policy(cfg, rng);
    GridEnv env(make_spec('B', true, 1));
    env.reset(3);
    const Vec obs = env.observe();

    const Vec logits = policy_logits(p, obs);
    REQUIRE(logits.size() == kNumActions);
    CHECK((logits - mlp_ref(p.a1, p.a2, p.a_head, obs)).norm() <= 1e-12);

    const Vec v = mlp_ref(p.c1, p.c2, p.c_head, obs);
    REQUIRE(v.size() == 1);
    CHECK(policy_value(p, obs) == doctest::Approx(v(0)).epsilon(1e-12));
  }

  TEST_CASE("sampled actions follow the softmax over logits") {
    Rng rng(12);
    const PpoConfig cfg = tiny_cfg();
    const PolicyParams p = tiny_policy(cfg, rng);
    GridEnv env(make_spec('A', true, 1));
    env.reset(5);
    const Vec obs = env.observe();

    const Vec logits = policy_logits(p, obs);
    const Vec probs =
        (logits.array() - logits.maxCoeff()).exp() /
        (logits.array() - logits.maxCoeff()).exp().sum();

    Eigen::VectorXd counts = Eigen::VectorXd::Zero(kNumActions);
    Rng srng(13);
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const auto [a, lp] = sample_action(p, obs, srng);
      REQUIRE(a >= 0);
      REQUIRE(a < kNumActions);
      CHECK(lp == doctest::Approx(std::log(probs(a))).epsilon(1e-9));
      counts(a) += 1.0;
    }
    for (int a = 0; a < kNumActions; ++a)
      CHECK(std::abs(counts(a) / n - probs(a)) <= 0.015);
  }

  // -------------------------------------------------------------------------
  // episodic counter

  TEST_CASE("episodic counts grow per state and reset cleanly") {
    GridEnv env(make_spec('B', true, 2));
    env.reset(7);
    const GridState s = env.state();

    EpisodicCounter counter;
    CHECK(counter.visit(s) == 1);
    CHECK(counter.visit(s) == 2);
    CHECK(counter.visit(s) == 3);
    CHECK(counter.visit(s) == 4);
    // fourth visit at the default bonus scale: 0.005 / sqrt(4)
    CHECK(0.005 / std::sqrt(4.0) == doctest::Approx(0.0025).epsilon(1e-12));

    counter.reset();
    CHECK(counter.visit(s) == 1);
  }

  TEST_CASE("state identity keys react to position, heading and flags") {
    GridEnv env(make_spec('B', true, 3));
    env.reset(9);
    const GridState base = env.state();
    const std::uint64_t k0 = state_identity_key(base);

    GridState moved = base;
    moved.x = (base.x + 1) % base.w;
    CHECK(state_identity_key(moved) != k0);

    GridState turned = base;
    turned.dir = (base.dir + 1) % 4;
    CHECK(state_identity_key(turned) != k0);

    GridState carrying = base;
    carrying.carried = Carried::key;
    CHECK(state_identity_key(carrying) != k0);

    GridState flagged = base;
    flagged.flags[0] = !flagged.flags[0];
    CHECK(state_identity_key(flagged) != k0);

    // step count is *not* part of the identity: revisits must collide
    GridState later = base;
    later.step_count = base.step_count + 17;
    CHECK(state_identity_key(later) == k0);
  }

  // -------------------------------------------------------------------------
  // training loop accounting

  TEST_CASE("zero budget runs only the pre-evaluation") {
    Rng rng(14);
    const PpoConfig cfg = tiny_cfg();
    PolicyParams p = tiny_policy(cfg, rng);
    const Vec before = nn::to_flat(p.refs());

    int bank_sets = 0;
    TrainOptions opt;
    opt.budget = 0;
    opt.banks = [&](const EpisodeSet&) { ++bank_sets; };

    Rng trng(15);
    const TrainTrace trace =
        train_task(make_spec('A', true, 4), p, cfg, opt, trng);
    REQUIRE(trace.checkpoints.size() == 1);
    CHECK(trace.checkpoints[0].env_steps == 0);
    CHECK(bank_sets == 1);
    CHECK((nn::to_flat(p.refs()) - before).norm() == 0.0);
  }

  TEST_CASE("budgets are consumed exactly with a truncated last rollout") {
    Rng rng(16);
    const PpoConfig cfg = tiny_cfg();  // horizon 256, cadence 1000
    PolicyParams p = tiny_policy(cfg, rng);

    std::uint64_t train_steps = 0, eval_steps = 0, bank_rows = 0;
    TrainOptions opt;
    opt.budget = 2600;  // not a multiple of the horizon
    opt.train_meter = &train_steps;
    opt.eval_meter = &eval_steps;
    opt.banks = [&](const EpisodeSet& set) {
      for (const Episode& e : set.episodes)
        bank_rows += std::uint64_t(e.features.rows());
    };

    Rng trng(17);
    const TrainTrace trace =
        train_task(make_spec('A', true, 5), p, cfg, opt, trng);

    CHECK(train_steps == 2600);
    CHECK(eval_steps > 0);
    CHECK(eval_steps == bank_rows);  // banks see exactly the eval episodes

    REQUIRE(trace.checkpoints.size() >= 2);
    CHECK(trace.checkpoints.front().env_steps == 0);
    CHECK(trace.checkpoints.back().env_steps == 2600);
    for (std::size_t i = 1; i < trace.checkpoints.size(); ++i) {
      CHECK(trace.checkpoints[i].env_steps >
            trace.checkpoints[i - 1].env_steps);
      CHECK(trace.checkpoints[i].env_steps <= opt.budget);
    }
    for (const TrainCheckpoint& c : trace.checkpoints) {
      CHECK(c.sr >= 0.0);
      CHECK(c.sr <= 1.0);
    }
  }

  TEST_CASE("cadence checkpoints stay strictly increasing under fast eval") {
    Rng rng(18);
    PpoConfig cfg = tiny_cfg();
    cfg.horizon = 512;
    cfg.eval_interval = 200;  // several cadence marks per rollout
    cfg.eval_episodes = 2;
    PolicyParams p = tiny_policy(cfg, rng);

    TrainOptions opt;
    opt.budget = 1100;
    Rng trng(19);
    const TrainTrace trace =
        train_task(make_spec('A', true, 6), p, cfg, opt, trng);
    for (std::size_t i = 1; i < trace.checkpoints.size(); ++i)
      CHECK(trace.checkpoints[i].env_steps >
            trace.checkpoints[i - 1].env_steps);
    CHECK(trace.checkpoints.back().env_steps == 1100);
  }

  TEST_CASE("training is deterministic in the seed") {
    const PpoConfig cfg = tiny_cfg();
    Rng ra(20), rb(20), rc(21);
    PolicyParams pa = tiny_policy(cfg, ra);
    Rng rb_init(20), rc_init(20);
    PolicyParams pb = tiny_policy(cfg, rb_init);
    PolicyParams pc = tiny_policy(cfg, rc_init);

    TrainOptions opt;
    opt.budget = 512;
    Rng t1(22), t2(22), t3(23);
    (void)train_task(make_spec('A', true, 7), pa, cfg, opt, t1);
    (void)train_task(make_spec('A', true, 7), pb, cfg, opt, t2);
    (void)train_task(make_spec('A', true, 7), pc, cfg, opt, t3);

    CHECK((nn::to_flat(pa.refs()) - nn::to_flat(pb.refs())).norm() == 0.0);
    CHECK((nn::to_flat(pa.refs()) - nn::to_flat(pc.refs())).norm() > 0.0);
  }

  TEST_CASE("zero rewards and a zero critic leave every parameter still") {
    // no terminal reward arrives within the budget and the critic head is
    // zeroed, so advantages, returns and values are identically zero; with
    // the entropy bonus off the surrogate has no gradient anywhere
    Rng rng(24);
    PpoConfig cfg = tiny_cfg();
    cfg.horizon = 64;
    cfg.entropy_coef = 0.0;
    PolicyParams p = tiny_policy(cfg, rng);
    p.c_head.w.setZero();
    p.c_head.b.setZero();
    const Vec before = nn::to_flat(p.refs());

    TrainOptions opt;
    opt.budget = 64;  // far below the E-family step limit
    Rng trng(25);
    const TrainTrace trace =
        train_task(make_spec('E', false, 8), p, cfg, opt, trng);
    for (const TrainCheckpoint& c : trace.checkpoints) REQUIRE(c.sr == 0.0);
    CHECK((nn::to_flat(p.refs()) - before).norm() == 0.0);
  }

  TEST_CASE("training with entropy pressure moves the actor") {
    Rng rng(26);
    const PpoConfig cfg = tiny_cfg();
    PolicyParams p = tiny_policy(cfg, rng);
    const Vec before = nn::to_flat(p.refs());
    TrainOptions opt;
    opt.budget = 512;
    Rng trng(27);
    (void)train_task(make_spec('A', true, 9), p, cfg, opt, trng);
    CHECK((nn::to_flat(p.refs()) - before).norm() > 1e-8);
  }

  // -------------------------------------------------------------------------
  // l2init pull

  TEST_CASE("the initialization penalty keeps parameters nearer their anchor") {
    const PpoConfig cfg = tiny_cfg();
    Rng ra(28), rb(28);
    PolicyParams free_p = tiny_policy(cfg, ra);
    PolicyParams held_p = tiny_policy(cfg, rb);
    const PolicyParams anchor = held_p;
    const Vec flat0 = nn::to_flat(held_p.refs());

    TrainOptions free_opt;
    free_opt.budget = 1024;
    TrainOptions held_opt = free_opt;
    held_opt.l2init_lambda = 1.0;
    held_opt.l2init_anchor = &anchor;

    Rng t1(29), t2(29);
    (void)train_task(make_spec('A', true, 10), free_p, cfg, free_opt, t1);
    (void)train_task(make_spec('A', true, 10), held_p, cfg, held_opt, t2);

    const double drift_free = (nn::to_flat(free_p.refs()) - flat0).norm();
    const double drift_held = (nn::to_flat(held_p.refs()) - flat0).norm();
    CHECK(drift_held < drift_free);
  }

  // -------------------------------------------------------------------------
  // evaluation

  TEST_CASE("evaluation is reproducible and never trains") {
    Rng rng(30);
    const PpoConfig cfg = tiny_cfg();
    const PolicyParams p = tiny_policy(cfg, rng);
    const TaskSpec spec = make_spec('A', true, 11);

    Rng e1(31), e2(31);
    std::uint64_t meter = 0;
    const EpisodeSet a = evaluate_policy(spec, p, 10, e1, &meter);
    const EpisodeSet b = evaluate_policy(spec, p, 10, e2);
    REQUIRE(a.episodes.size() == 10);
    REQUIRE(b.episodes.size() == 10);
    std::uint64_t rows = 0;
    int successes = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(a.episodes[i].seed == b.episodes[i].seed);
      CHECK(a.episodes[i].ret == b.episodes[i].ret);
      CHECK((a.episodes[i].features - b.episodes[i].features).norm() == 0.0);
      rows += std::uint64_t(a.episodes[i].features.rows());
      successes += a.episodes[i].success ? 1 : 0;
    }
    CHECK(meter == rows);
    CHECK(a.mean_sr == doctest::Approx(successes / 10.0).epsilon(1e-12));
  }

  // -------------------------------------------------------------------------
  // shrink and perturb

  TEST_CASE("shrink-and-perturb edge cases and purity") {
    Rng rng(32);
    const PpoConfig cfg = tiny_cfg();
    PolicyParams p = tiny_policy(cfg, rng);
    const Vec flat0 = nn::to_flat(p.refs());

    PolicyParams ident = p;
    Rng r0(33);
    shrink_and_perturb(ident, 1.0, 0.0, r0);
    CHECK((nn::to_flat(ident.refs()) - flat0).norm() == 0.0);

    PolicyParams zero = p;
    Rng r1(34);
    shrink_and_perturb(zero, 0.0, 0.0, r1);
    CHECK(nn::to_flat(zero.refs()).norm() == 0.0);

    PolicyParams sa = p, sb = p;
    Rng r2(35), r3(35);
    shrink_and_perturb(sa, 0.9, 1e-3, r2);
    shrink_and_perturb(sb, 0.9, 1e-3, r3);
    CHECK((nn::to_flat(sa.refs()) - nn::to_flat(sb.refs())).norm() == 0.0);
    CHECK((nn::to_flat(sa.refs()) - flat0).norm() > 0.0);
  }

  TEST_CASE("shrink-and-perturb hits its expected squared norm") {
    Rng rng(36);
    PolicyParams p = init_policy(12, kNumActions, 8, rng);
    const Vec flat0 = nn::to_flat(p.refs());
    const double dim = double(flat0.size());

    struct Case {
      double alpha, noise;
    };
    Rng draw_rng(37);
    for (const Case c : {Case{0.9, 1e-3}, Case{0.0, 1.0}, Case{0.5, 0.5}}) {
      const double want =
          c.alpha * c.alpha * flat0.squaredNorm() + c.noise * c.noise * dim;
      double acc = 0.0;
      const int draws = 10000;
      for (int i = 0; i < draws; ++i) {
        PolicyParams q = p;
        shrink_and_perturb(q, c.alpha, c.noise, draw_rng);
        acc += nn::to_flat(q.refs()).squaredNorm();
      }
      acc /= double(draws);
      CHECK(std::abs(acc - want) <= 0.05 * want);
    }
  }
}
