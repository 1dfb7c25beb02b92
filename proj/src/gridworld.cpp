#include "telapa/gridworld.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace telapa {

namespace {

struct FamilyDefaults {
  int w, h;
};

FamilyDefaults standard_dims(char family) {
  switch (family) {
    case 'A': return {10, 10};
    case 'B': return {6, 6};
    case 'C': return {8, 8};
    case 'D': return {8, 8};
    case 'E': return {10, 10};
    default: throw config_error(std::string("unknown task family: ") + family);
  }
}

constexpr int kDx[4] = {1, 0, -1, 0};
constexpr int kDy[4] = {0, 1, 0, -1};

double clip01(double v) { return std::min(1.0, std::max(0.0, v)); }

Cell carried_cell(Carried c) {
  switch (c) {
    case Carried::key: return Cell::key;
    case Carried::ball: return Cell::ball;
    case Carried::box: return Cell::box;
    case Carried::blocker: return Cell::blocker;
    default: throw usage_error("carried_cell: nothing carried");
  }
}

}  // namespace

TaskSpec resolve(TaskSpec spec) {
  if (spec.family < 'A' || spec.family > 'E')
    throw config_error(std::string("unknown task family: ") + spec.family);
  const FamilyDefaults std_dims = standard_dims(spec.family);
  if (spec.width == 0)
    spec.width = spec.small ? std::max(4, std_dims.w / 2) : std_dims.w;
  if (spec.height == 0)
    spec.height = spec.small ? std::max(4, std_dims.h / 2) : std_dims.h;
  if (spec.max_steps == 0) {
    const int base = 4 * std_dims.w * std_dims.h;
    spec.max_steps = spec.small ? base / 2 : base;
  }
  if (spec.width < 4 || spec.height < 4)
    throw config_error("grid dimensions below the 4x4 minimum");
  if (spec.max_steps < 1) throw config_error("max_steps must be positive");
  return spec;
}

StepFeature features_of(const GridState& s, int action) {
  StepFeature f{};
  f[0] = clip01(double(s.x) / double(std::max(s.w - 1, 1)));
  f[1] = clip01(double(s.y) / double(std::max(s.h - 1, 1)));
  f[2] = clip01(double(s.dir) / 3.0);
  f[3] = clip01(double(s.step_count) / double(std::max(s.max_steps, 1)));
  f[4] = clip01(double(action) / double(kNumActions - 1));
  for (int i = 0; i < kNumFlags; ++i) f[5 + i] = s.flags[i] ? 1.0 : 0.0;
  return f;
}

EpisodeSet make_episode_set(std::vector<Episode> eps, std::string tag) {
  EpisodeSet set;
  set.episodes = std::move(eps);
  set.source_tag = std::move(tag);
  int succ = 0;
  for (const Episode& e : set.episodes) succ += e.success ? 1 : 0;
  set.mean_sr =
      set.episodes.empty() ? 0.0 : double(succ) / double(set.episodes.size());
  return set;
}

// ---------------------------------------------------------------------------

GridEnv::GridEnv(TaskSpec spec) : spec_(resolve(std::move(spec))) {
  reset(0);
}

std::pair<int, int> GridEnv::random_empty(Rng& rng) const {
  std::vector<std::pair<int, int>> empties;
  for (int y = 0; y < state_.h; ++y)
    for (int x = 0; x < state_.w; ++x)
      if (state_.at(x, y) == Cell::empty) empties.emplace_back(x, y);
  if (empties.empty()) throw config_error("layout: no empty cell left");
  return empties[rng.randint(empties.size())];
}

void GridEnv::place_randomly(Cell c, Rng& rng) {
  auto [x, y] = random_empty(rng);
  state_.at(x, y) = c;
}

bool GridEnv::empties_connected() const {
  int total = 0, sx = -1, sy = -1;
  for (int y = 0; y < state_.h; ++y)
    for (int x = 0; x < state_.w; ++x)
      if (state_.at(x, y) == Cell::empty) {
        ++total;
        sx = x;
        sy = y;
      }
  if (total == 0) return false;
  std::vector<char> seen(std::size_t(state_.w) * state_.h, 0);
  std::vector<std::pair<int, int>> stack{{sx, sy}};
  seen[std::size_t(sy) * state_.w + sx] = 1;
  int found = 0;
  while (!stack.empty()) {
    auto [x, y] = stack.back();
    stack.pop_back();
    ++found;
    for (int d = 0; d < 4; ++d) {
      const int nx = x + kDx[d], ny = y + kDy[d];
      if (!state_.in_grid(nx, ny) || state_.at(nx, ny) != Cell::empty)
        continue;
      char& mark = seen[std::size_t(ny) * state_.w + nx];
      if (!mark) {
        mark = 1;
        stack.emplace_back(nx, ny);
      }
    }
  }
  return found == total;
}

void GridEnv::place_reachable(Cell c, Rng& rng) {
  // the object must have a free cell to face it from, and placing it must not
  // cut the free space apart (objects block movement)
  for (int tries = 0; tries < 16; ++tries) {
    auto [x, y] = random_empty(rng);
    state_.at(x, y) = c;
    bool faceable = false;
    for (int d = 0; d < 4; ++d) {
      const int nx = x + kDx[d], ny = y + kDy[d];
      if (state_.in_grid(nx, ny) && state_.at(nx, ny) == Cell::empty)
        faceable = true;
    }
    if (faceable && empties_connected()) return;
    state_.at(x, y) = Cell::empty;
  }
  place_randomly(c, rng);
}

void GridEnv::generate_layout(Rng& rng) {
  const int w = spec_.width, h = spec_.height;
  state_ = GridState{};
  state_.w = w;
  state_.h = h;
  state_.max_steps = spec_.max_steps;
  state_.cells.assign(std::size_t(w) * h, Cell::empty);
  box_holds_key_ = false;
  int divider = -1;  // families C/D/E: agent spawns left of this column

  auto object_type = [](int id) {
    return id == 0 ? Cell::key : (id == 1 ? Cell::ball : Cell::box);
  };

  switch (spec_.family) {
    case 'A': {
      // wall clutter turns the room into a loose maze; every placement keeps
      // the free space connected so the mission object stays reachable
      const int clutter = w * h / 6;
      for (int i = 0; i < clutter; ++i) {
        for (int tries = 0; tries < 8; ++tries) {
          auto [x, y] = random_empty(rng);
          state_.at(x, y) = Cell::wall;
          if (empties_connected()) break;
          state_.at(x, y) = Cell::empty;
        }
      }
      // the mission object is the only object in the maze
      state_.mission = int(rng.randint(3));
      place_reachable(object_type(state_.mission), rng);
      break;
    }
    case 'B': {
      place_randomly(Cell::goal, rng);  // delivery cell
      const int first = int(rng.randint(3));
      const int second = (first + 1 + int(rng.randint(2))) % 3;
      place_randomly(object_type(first), rng);
      place_randomly(object_type(second), rng);
      state_.mission = rng.uniform() < 0.5 ? first : second;
      break;
    }
    case 'C': {
      const int xw = 1 + int(rng.randint(std::uint64_t(w - 2)));
      divider = xw;
      const int yd = int(rng.randint(std::uint64_t(h)));
      for (int y = 0; y < h; ++y) state_.at(xw, y) = Cell::wall;
      state_.at(xw, yd) = Cell::door_locked;
      // key + agent left of the divider, goal right of it
      std::vector<std::pair<int, int>> left, right;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < xw; ++x) left.emplace_back(x, y);
        for (int x = xw + 1; x < w; ++x) right.emplace_back(x, y);
      }
      auto [kx, ky] = left[rng.randint(left.size())];
      state_.at(kx, ky) = Cell::key;
      auto [gx, gy] = right[rng.randint(right.size())];
      state_.at(gx, gy) = Cell::goal;
      break;
    }
    case 'D': {
      const int xw = 2 + int(rng.randint(std::uint64_t(w - 3)));
      divider = xw;
      const int yd = int(rng.randint(std::uint64_t(h)));
      for (int y = 0; y < h; ++y) state_.at(xw, y) = Cell::wall;
      state_.at(xw, yd) = Cell::door_locked;
      // key pocket on the left edge: walls above/below, blocker at its side
      const int ky = int(rng.randint(std::uint64_t(h)));
      state_.at(0, ky) = Cell::key;
      if (state_.in_grid(0, ky - 1)) state_.at(0, ky - 1) = Cell::wall;
      if (state_.in_grid(0, ky + 1)) state_.at(0, ky + 1) = Cell::wall;
      state_.at(1, ky) = Cell::blocker;
      // prize box behind the door
      std::vector<std::pair<int, int>> right;
      for (int y = 0; y < h; ++y)
        for (int x = xw + 1; x < w; ++x) right.emplace_back(x, y);
      auto [bx, by] = right[rng.randint(right.size())];
      state_.at(bx, by) = Cell::box;
      break;
    }
    case 'E': {
      const int xw = 2 + int(rng.randint(std::uint64_t(w - 3)));
      divider = xw;
      const int yd = int(rng.randint(std::uint64_t(h)));
      for (int y = 0; y < h; ++y) state_.at(xw, y) = Cell::wall;
      state_.at(xw, yd) = Cell::door_locked;
      state_.at(xw - 1, yd) = Cell::blocker;  // obstructs the door
      // the key hides inside a box somewhere on the agent's side
      std::vector<std::pair<int, int>> left;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < xw - 1; ++x)
          if (state_.at(x, y) == Cell::empty) left.emplace_back(x, y);
      auto [bx, by] = left[rng.randint(left.size())];
      state_.at(bx, by) = Cell::box;
      box_holds_key_ = true;
      std::vector<std::pair<int, int>> right;
      for (int y = 0; y < h; ++y)
        for (int x = xw + 1; x < w; ++x) right.emplace_back(x, y);
      auto [gx, gy] = right[rng.randint(right.size())];
      state_.at(gx, gy) = Cell::goal;
      break;
    }
    default:
      throw config_error("generate_layout: unknown family");
  }

  // agent spawns on a free cell; in divided families it starts on the left
  std::vector<std::pair<int, int>> starts;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (state_.at(x, y) != Cell::empty) continue;
      if (divider >= 0 && x >= divider) continue;
      starts.emplace_back(x, y);
    }
  if (starts.empty()) throw config_error("layout: nowhere to place the agent");
  if (spec_.family == 'A') {
    // spawn in the farther half of the maze from the mission object
    const Cell mc = object_type(state_.mission);
    int mx = -1, my = -1;
    for (int y = 0; y < h && mx < 0; ++y)
      for (int x = 0; x < w; ++x)
        if (state_.at(x, y) == mc) {
          mx = x;
          my = y;
          break;
        }
    std::vector<int> dist(std::size_t(w) * h, -1);
    std::vector<std::pair<int, int>> queue;
    for (int d = 0; d < 4; ++d) {
      const int nx = mx + kDx[d], ny = my + kDy[d];
      if (state_.in_grid(nx, ny) && state_.at(nx, ny) == Cell::empty) {
        dist[std::size_t(ny) * w + nx] = 1;
        queue.emplace_back(nx, ny);
      }
    }
    for (std::size_t head = 0; head < queue.size(); ++head) {
      auto [x, y] = queue[head];
      for (int d = 0; d < 4; ++d) {
        const int nx = x + kDx[d], ny = y + kDy[d];
        if (!state_.in_grid(nx, ny) || state_.at(nx, ny) != Cell::empty)
          continue;
        int& dn = dist[std::size_t(ny) * w + nx];
        if (dn < 0) {
          dn = dist[std::size_t(y) * w + x] + 1;
          queue.emplace_back(nx, ny);
        }
      }
    }
    int maxd = 0;
    for (auto [x, y] : starts) maxd = std::max(maxd, dist[std::size_t(y) * w + x]);
    std::vector<std::pair<int, int>> far;
    for (auto [x, y] : starts)
      if (2 * dist[std::size_t(y) * w + x] >= maxd) far.emplace_back(x, y);
    if (!far.empty()) starts = std::move(far);
  }
  auto [ax, ay] = starts[rng.randint(starts.size())];
  state_.x = ax;
  state_.y = ay;
  state_.dir = int(rng.randint(4));
  if (spec_.family == 'A') {
    // never spawn already facing an object the agent could commit to
    auto facing_object = [&] {
      const int fx = state_.x + kDx[state_.dir], fy = state_.y + kDy[state_.dir];
      if (!state_.in_grid(fx, fy)) return false;
      const Cell c = state_.at(fx, fy);
      return c == Cell::key || c == Cell::ball || c == Cell::box;
    };
    for (int tries = 0; tries < 4 && facing_object(); ++tries)
      state_.dir = (state_.dir + 1) % 4;
  }
}

void GridEnv::reset(std::uint64_t episode_seed) {
  Rng rng(hash_combine(spec_.seed, episode_seed));
  generate_layout(rng);
}

bool GridEnv::adjacent_to(Cell c) const {
  for (int d = 0; d < 4; ++d) {
    const int nx = state_.x + kDx[d], ny = state_.y + kDy[d];
    if (state_.in_grid(nx, ny) && state_.at(nx, ny) == c) return true;
  }
  return false;
}

GridEnv::StepResult GridEnv::step(int action) {
  if (state_.done) throw usage_error("step: episode already finished");
  if (action < 0 || action >= kNumActions)
    throw config_error("step: action out of range");

  GridState& s = state_;
  s.step_count += 1;

  const int fx = s.x + kDx[s.dir], fy = s.y + kDy[s.dir];
  const bool facing_in = s.in_grid(fx, fy);
  const Cell facing = facing_in ? s.at(fx, fy) : Cell::wall;

  switch (action) {
    case 0:
      s.dir = (s.dir + 3) % 4;
      break;
    case 1:
      s.dir = (s.dir + 1) % 4;
      break;
    case 2:  // forward
      if (facing_in && (facing == Cell::empty || facing == Cell::goal ||
                        facing == Cell::door_open)) {
        s.x = fx;
        s.y = fy;
      }
      break;
    case 3:  // pickup
      if (s.carried == Carried::none && facing_in) {
        switch (facing) {
          case Cell::key:
            s.carried = Carried::key;
            s.flags[kFlagHasKey] = true;
            break;
          case Cell::ball:
            s.carried = Carried::ball;
            s.flags[kFlagHasBall] = true;
            break;
          case Cell::box:
            s.carried = Carried::box;
            s.flags[kFlagHasBox] = true;
            break;
          case Cell::blocker:
            s.carried = Carried::blocker;
            break;
          default:
            break;
        }
        if (s.carried != Carried::none) s.at(fx, fy) = Cell::empty;
      }
      break;
    case 4:  // drop
      if (s.carried != Carried::none && facing_in && facing == Cell::empty) {
        s.at(fx, fy) = carried_cell(s.carried);
        s.carried = Carried::none;
      }
      break;
    case 5:  // toggle
      if (facing_in) {
        if (facing == Cell::door_locked && s.carried == Carried::key) {
          s.at(fx, fy) = Cell::door_open;
          s.flags[kFlagDoorOpen] = true;
        } else if (facing == Cell::door_closed) {
          s.at(fx, fy) = Cell::door_open;
          s.flags[kFlagDoorOpen] = true;
        } else if (facing == Cell::door_open) {
          s.at(fx, fy) = Cell::door_closed;
        } else if (facing == Cell::box && box_holds_key_) {
          s.at(fx, fy) = Cell::key;
          s.flags[kFlagBoxToggled] = true;
        }
      }
      break;
    case 6:  // done: a no-op in every family
      break;
    default:
      break;
  }

  // success conditions
  const Cell mission_obj = state_.mission == 0
                               ? Cell::key
                               : (state_.mission == 1 ? Cell::ball : Cell::box);
  switch (spec_.family) {
    case 'A': {
      // arriving in front of the mission object succeeds on its own
      const int gx = s.x + kDx[s.dir], gy = s.y + kDy[s.dir];
      if (s.in_grid(gx, gy) && s.at(gx, gy) == mission_obj) {
        s.success = true;
        s.done = true;
      }
      break;
    }
    case 'B': {
      const Carried want = state_.mission == 0
                               ? Carried::key
                               : (state_.mission == 1 ? Carried::ball
                                                      : Carried::box);
      if (s.at(s.x, s.y) == Cell::goal && s.carried == want) {
        s.flags[kFlagDelivered] = true;
        s.success = true;
        s.done = true;
      }
      break;
    }
    case 'C':
    case 'E':
      if (s.at(s.x, s.y) == Cell::goal) {
        s.success = true;
        s.done = true;
      }
      break;
    case 'D':
      if (s.flags[kFlagHasBox]) {
        s.success = true;
        s.done = true;
      }
      break;
    default:
      break;
  }

  double reward = 0.0;
  if (s.success)
    reward =
        1.0 - 0.9 * double(s.step_count) / double(std::max(s.max_steps, 1));
  if (s.step_count >= s.max_steps) s.done = true;
  return StepResult{reward, s.done};
}

int GridEnv::observation_dim() {
  return 5 * 5 * kNumCellTypes + 4 + kNumCarried + kNumMissions;
}

Eigen::VectorXd GridEnv::observe() const {
  Eigen::VectorXd obs = Eigen::VectorXd::Zero(observation_dim());
  int k = 0;
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      const int cx = state_.x + dx, cy = state_.y + dy;
      const Cell c =
          state_.in_grid(cx, cy) ? state_.at(cx, cy) : Cell::wall;
      obs(k + int(c)) = 1.0;
      k += kNumCellTypes;
    }
  obs(k + state_.dir) = 1.0;
  k += 4;
  obs(k + int(state_.carried)) = 1.0;
  k += kNumCarried;
  obs(k + state_.mission) = 1.0;
  return obs;
}

// ---------------------------------------------------------------------------

EpisodeSet run_episodes(GridEnv& env, const Actor& actor, int n, Rng& rng) {
  std::vector<Episode> eps;
  eps.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    const std::uint64_t ep_seed = rng.next();
    env.reset(ep_seed);
    std::vector<StepFeature> rows;
    double ret = 0.0;
    bool done = false;
    while (!done) {
      const int a = actor(env, rng);
      const auto res = env.step(a);
      rows.push_back(features_of(env.state(), a));
      ret += res.reward;
      done = res.done;
    }
    Episode e;
    e.task_tag = env.spec().tag;
    e.seed = ep_seed;
    e.features.resize(Eigen::Index(rows.size()), kFeatureDim);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (int c = 0; c < kFeatureDim; ++c)
        e.features(Eigen::Index(r), c) = rows[r][c];
    e.ret = ret;
    e.success = env.state().success;
    eps.push_back(std::move(e));
  }
  return make_episode_set(std::move(eps), env.spec().tag);
}

// ---------------------------------------------------------------------------

std::string episode_to_jsonl(const Episode& e) {
  nlohmann::json j;
  j["task_tag"] = e.task_tag;
  j["seed"] = e.seed;
  j["T"] = e.features.rows();
  std::vector<double> flat;
  flat.reserve(std::size_t(e.features.size()));
  for (Eigen::Index r = 0; r < e.features.rows(); ++r)
    for (Eigen::Index c = 0; c < e.features.cols(); ++c)
      flat.push_back(e.features(r, c));
  j["features"] = flat;
  j["return"] = e.ret;
  j["success"] = e.success;
  return j.dump();
}

Episode episode_from_jsonl(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  Episode e;
  e.task_tag = j.at("task_tag").get<std::string>();
  e.seed = j.at("seed").get<std::uint64_t>();
  const auto T = j.at("T").get<Eigen::Index>();
  const auto flat = j.at("features").get<std::vector<double>>();
  if (Eigen::Index(flat.size()) != T * kFeatureDim)
    throw config_error("episode: feature payload size mismatch");
  e.features.resize(T, kFeatureDim);
  for (Eigen::Index r = 0; r < T; ++r)
    for (Eigen::Index c = 0; c < kFeatureDim; ++c)
      e.features(r, c) = flat[std::size_t(r * kFeatureDim + c)];
  e.ret = j.at("return").get<double>();
  e.success = j.at("success").get<bool>();
  return e;
}

void save_episodes(const std::string& path, const std::vector<Episode>& eps) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw config_error("save_episodes: cannot open " + path);
  for (const Episode& e : eps) f << episode_to_jsonl(e) << "\n";
}

std::vector<Episode> load_episodes(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error("load_episodes: cannot open " + path);
  std::vector<Episode> eps;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) eps.push_back(episode_from_jsonl(line));
  return eps;
}

}  // namespace telapa
