#pragma once

#include <functional>
#include <unordered_map>

#include "telapa/gridworld.hpp"
#include "telapa/nets.hpp"

namespace telapa {

// ---------------------------------------------------------------------------
// Policy

struct PolicyParams {
  nn::Dense a1, a2, a_head;  // actor trunk + logits head
  nn::Dense c1, c2, c_head;  // critic trunk + value head
  nn::ParamRefs refs();
};

PolicyParams init_policy(int obs_dim, int n_actions, int hidden, Rng& rng);

Eigen::VectorXd policy_logits(const PolicyParams& p, const Eigen::VectorXd& obs);
double policy_value(const PolicyParams& p, const Eigen::VectorXd& obs);
// samples from the categorical softmax; returns (action, log-prob)
std::pair<int, double> sample_action(const PolicyParams& p,
                                     const Eigen::VectorXd& obs, Rng& rng);

// adapter for run_episodes: stochastic policy, external rewards only
Actor make_actor(const PolicyParams& p);

// ---------------------------------------------------------------------------
// Configuration

struct PpoConfig {
  int horizon = 2048;
  int minibatch = 256;
  int epochs = 4;
  double clip = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double lr = 3e-4;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double grad_clip = 0.5;
  int hidden = 64;
  int eval_interval = 10000;
  int eval_episodes = 20;
  bool intrinsic = false;     // episodic count-based bonus during training
  double intrinsic_beta = 0.005;
};

// env-step bookkeeping, reported per category in run manifests
struct StepMeter {
  std::uint64_t train = 0, eval = 0, probe = 0, illum = 0;
};

// ---------------------------------------------------------------------------
// Training

struct TrainCheckpoint {
  std::uint64_t env_steps = 0;
  double sr = 0.0;
  double mean_reward = 0.0;
};

struct TrainTrace {
  std::vector<TrainCheckpoint> checkpoints;  // pre-eval first, final last
};

using BanksHook = std::function<void(const EpisodeSet&)>;

struct TrainOptions {
  std::uint64_t budget = 0;            // training env steps for this task
  double l2init_lambda = 0.0;          // >0 pulls toward l2init_anchor
  const PolicyParams* l2init_anchor = nullptr;
  nn::AdamState* optimizer = nullptr;  // carried across tasks when given
  BanksHook banks;                     // receives every evaluation episode set
  std::uint64_t* train_meter = nullptr;
  std::uint64_t* eval_meter = nullptr;
};

// PPO on one task. Updates params in place; evaluation checkpoints run on a
// separate environment instance at a fixed cadence plus a pre- and post-eval.
TrainTrace train_task(const TaskSpec& spec, PolicyParams& params,
                      const PpoConfig& cfg, const TrainOptions& opt, Rng& rng);

// Evaluates the policy for n episodes; never applies intrinsic bonuses.
EpisodeSet evaluate_policy(const TaskSpec& spec, const PolicyParams& params,
                           int n, Rng& rng, std::uint64_t* meter = nullptr);

// theta <- alpha * theta + noise_std * N(0,1), every coordinate
void shrink_and_perturb(PolicyParams& params, double alpha, double noise_std,
                        Rng& rng);

// ---------------------------------------------------------------------------
// Episodic state-visit counter (intrinsic bonus)

class EpisodicCounter {
 public:
  void reset() { counts_.clear(); }
  // increments and returns the new count for the state's identity key
  int visit(const GridState& s);

 private:
  std::unordered_map<std::uint64_t, int> counts_;
};

std::uint64_t state_identity_key(const GridState& s);

}  // namespace telapa
