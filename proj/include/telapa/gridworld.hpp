#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "telapa/common.hpp"

namespace telapa {

// ---------------------------------------------------------------------------
// Task specification

// Families:
//   A  navigate the cluttered room to the named object (facing it succeeds)
//   B  fetch the named object and carry it onto the delivery cell
//   C  take the key, unlock the door, reach the goal
//   D  move the blocker guarding the key, unlock the door, pick up the box
//   E  key hidden in a box, blocker in front of the locked door, reach goal
struct TaskSpec {
  char family = 'A';  // 'A'..'E'
  bool small = false; // halved grid dimensions and step limit
  int width = 0;      // 0 -> family default
  int height = 0;
  int max_steps = 0;  // 0 -> 4*W*H of the standard grid (halved when small)
  std::uint64_t seed = 0;
  std::string tag = "A";  // curriculum tag this task instance runs under
};

// Fills defaults and validates; throws config_error on invalid dimensions.
TaskSpec resolve(TaskSpec spec);

// ---------------------------------------------------------------------------
// World state

enum class Cell : int {
  empty = 0,
  wall,
  key,
  ball,
  box,
  door_locked,
  door_closed,
  door_open,
  goal,
  blocker
};
constexpr int kNumCellTypes = 10;

enum class Carried : int { none = 0, key, ball, box, blocker };
constexpr int kNumCarried = 5;

// 0 left, 1 right, 2 forward, 3 pickup, 4 drop, 5 toggle, 6 done
constexpr int kNumActions = 7;

constexpr int kNumFlags = 6;
enum FlagIndex {
  kFlagHasKey = 0,
  kFlagHasBall,
  kFlagHasBox,
  kFlagDoorOpen,
  kFlagBoxToggled,
  kFlagDelivered
};

constexpr int kNumMissions = 4;  // one-hot width reserved for mission ids

struct GridState {
  int w = 0, h = 0;
  int max_steps = 0;
  std::vector<Cell> cells;  // row-major, index y*w + x
  int x = 0, y = 0;
  int dir = 0;  // 0 east(+x), 1 south(+y), 2 west, 3 north
  Carried carried = Carried::none;
  int step_count = 0;
  int mission = 0;  // object-type mission id for A/B, 0 otherwise
  std::array<bool, kNumFlags> flags{};
  bool done = false;
  bool success = false;

  Cell at(int cx, int cy) const { return cells[std::size_t(cy) * w + cx]; }
  Cell& at(int cx, int cy) { return cells[std::size_t(cy) * w + cx]; }
  bool in_grid(int cx, int cy) const {
    return cx >= 0 && cx < w && cy >= 0 && cy < h;
  }
};

// ---------------------------------------------------------------------------
// Step features and episodes

constexpr int kFeatureDim = 11;
using StepFeature = std::array<double, kFeatureDim>;

// Pure feature map: scaled position/direction/progress/action plus the six
// sticky event flags, every component clipped to [0,1].
StepFeature features_of(const GridState& s, int action);

struct Episode {
  std::string task_tag;
  std::uint64_t seed = 0;
  Eigen::MatrixXd features;  // T x 11, T >= 1
  double ret = 0.0;          // terminal reward, 0 on failure
  bool success = false;      // <=> ret > 0
};

struct EpisodeSet {
  std::vector<Episode> episodes;
  std::string source_tag;
  double mean_sr = 0.0;
};

EpisodeSet make_episode_set(std::vector<Episode> eps, std::string tag);

// ---------------------------------------------------------------------------
// Environment

class GridEnv {
 public:
  explicit GridEnv(TaskSpec spec);

  // Regenerates the layout deterministically from (spec.seed, episode_seed).
  void reset(std::uint64_t episode_seed);

  struct StepResult {
    double reward = 0.0;
    bool done = false;
  };
  // Applies one action; throws usage_error if the episode already ended.
  StepResult step(int action);

  const GridState& state() const { return state_; }
  const TaskSpec& spec() const { return spec_; }

  // Egocentric 5x5 cell one-hot window (out-of-bounds reads as wall) plus
  // direction, carried-object, and mission one-hots. Dimension 263.
  Eigen::VectorXd observe() const;
  static int observation_dim();

 private:
  void generate_layout(Rng& rng);
  void place_randomly(Cell c, Rng& rng);
  void place_reachable(Cell c, Rng& rng);
  bool empties_connected() const;
  std::pair<int, int> random_empty(Rng& rng) const;
  bool adjacent_to(Cell c) const;

  TaskSpec spec_;
  GridState state_;
  bool box_holds_key_ = false;  // family E: the box hides the key
};

// ---------------------------------------------------------------------------
// Rollout helpers

// Policy adapter: chooses an action from the current env state.
using Actor = std::function<int(const GridEnv&, Rng&)>;

// Runs n complete episodes (never with intrinsic bonuses) and returns the
// set: per-episode features/returns plus the pooled success rate.
EpisodeSet run_episodes(GridEnv& env, const Actor& actor, int n, Rng& rng);

// ---------------------------------------------------------------------------
// Episode serialization (JSONL, one episode per line)

std::string episode_to_jsonl(const Episode& e);
Episode episode_from_jsonl(const std::string& line);
void save_episodes(const std::string& path, const std::vector<Episode>& eps);
std::vector<Episode> load_episodes(const std::string& path);

}  // namespace telapa
