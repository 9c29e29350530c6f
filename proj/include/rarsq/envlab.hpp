#pragma once
// Desk-scale data sources: a multi-mode synthetic chunk generator, a
// deterministic point-mass waypoint environment with a scripted expert, and
// a demonstration store with aligned observation windows and action chunks.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rarsq/rng.hpp"

namespace rarsq::env {

// ---- synthetic chunk datasets ---------------------------------------------

struct TrajectorySpec {
  int modes = 8;
  int chunks_per_mode = 512;
  int T = 8;
  int A = 2;
  double sigma = 0.01;
  std::uint64_t seed = 0;
};

struct ChunkDataset {
  int n = 0;
  int T = 0;
  int A = 0;
  std::vector<double> chunks;  // n x (T*A), entries in [-1,1]
  std::vector<int> mode;       // n ground-truth labels (tests only)
};

// Mode patterns are sinusoids whose amplitude, frequency, and phase are
// functions of the mode index alone; the seed drives only the added noise.
// Throws if the requested noise would blur the modes together (pairwise
// mean pattern distance must exceed 10 sigma).
ChunkDataset gen_trajectories(const TrajectorySpec& spec);

// The pattern of one mode without noise, row-major T x A.
std::vector<double> mode_pattern(const TrajectorySpec& spec, int mode);

// ---- point-mass environment ------------------------------------------------

constexpr double kStepScale = 0.1;   // position delta per unit action
constexpr double kTolerance = 0.05;  // waypoint capture radius
constexpr int kHorizon = 120;
constexpr int kMaxWaypoints = 3;
constexpr int kObsDim = 2 + 2 * kMaxWaypoints + 4;  // pos, rel wps, progress

struct Task {
  std::string name;
  std::vector<std::array<double, 2>> waypoints;  // visited in order
  int dwell = 0;  // consecutive in-tolerance steps required per waypoint
};

// reach, L-path, Z-path, dwell: short through long-horizon compositions.
const std::vector<Task>& standard_tasks();

struct PointMassEnv {
  Task task;
  int task_id = 0;
  std::array<double, 2> pos{0.0, 0.0};
  int progress = 0;    // waypoints completed
  int dwell_left = 0;  // remaining hold steps at the current waypoint
  int steps = 0;
  bool success = false;

  void reset(int task_id_, Rng& rng);  // uniform start in [-0.9, 0.9]^2
  // x <- clamp(x + a * kStepScale, [-1,1]^2); then waypoint bookkeeping.
  void step(const double* action2);
  std::vector<double> observe() const;  // kObsDim features
  bool done() const { return success || steps >= kHorizon; }
};

// Proportional controller toward the current waypoint, speed-capped to 1;
// holds still while dwelling and after success.
std::array<double, 2> scripted_expert(const PointMassEnv& e);

// ---- demonstration store ----------------------------------------------------

struct Episode {
  int task_id = 0;
  bool success = false;
  std::vector<double> obs;  // L x kObsDim
  std::vector<double> act;  // L x 2
};

struct DemoStore {
  int obs_dim = kObsDim;
  int act_dim = 2;
  std::uint64_t seed = 0;
  std::vector<Episode> episodes;
};

// Runs the scripted expert on every standard task. Throws if any episode
// fails (demonstrations must all succeed).
DemoStore collect_demos(int episodes_per_task, std::uint64_t seed);

// Single binary file plus a JSON sidecar at path + ".json" recording the
// generation parameters.
void save_demos(const std::string& path, const DemoStore& store);
DemoStore load_demos(const std::string& path);

// Aligned training views: one (window, chunk) pair per step of every
// episode. Windows cover steps t-h+1..t, front-padded by repeating the
// first observation; chunks cover t..t+T-1, tail-padded by repeating the
// last action.
struct DemoViews {
  int n = 0;
  int h = 0;
  int T = 0;
  int obs_dim = 0;
  int act_dim = 0;
  std::vector<double> windows;  // n x (h*obs_dim)
  std::vector<double> chunks;   // n x (T*act_dim)
  std::vector<int> task;        // n
};
DemoViews make_views(const DemoStore& store, int h, int T);

}  // namespace rarsq::env
