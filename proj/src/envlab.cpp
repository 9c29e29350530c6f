#include "rarsq/envlab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "rarsq/checkpoint.hpp"

namespace rarsq::env {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

double clampd(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}
}  // namespace

// ---- synthetic chunk datasets ---------------------------------------------

std::vector<double> mode_pattern(const TrajectorySpec& spec, int mode) {
  // Amplitude, frequency, and phase come from the mode index only, so the
  // mode structure is identical across seeds.
  double amp = 0.45 + 0.45 * (spec.modes > 1
                                  ? static_cast<double>(mode) / (spec.modes - 1)
                                  : 0.0);
  double freq = 1.0 + static_cast<double>(mode % 3);
  double phase = kTwoPi * mode / spec.modes;
  std::vector<double> p(static_cast<std::size_t>(spec.T) * spec.A);
  for (int t = 0; t < spec.T; ++t) {
    for (int c = 0; c < spec.A; ++c) {
      double arg = kTwoPi * freq * t / spec.T + phase + kTwoPi * c / (spec.A + 1);
      p[static_cast<std::size_t>(t) * spec.A + c] = amp * std::sin(arg);
    }
  }
  return p;
}

ChunkDataset gen_trajectories(const TrajectorySpec& spec) {
  if (spec.modes < 1 || spec.chunks_per_mode < 1 || spec.T < 1 || spec.A < 1)
    throw std::invalid_argument("gen_trajectories: empty spec");
  if (spec.sigma < 0.0)
    throw std::invalid_argument("gen_trajectories: negative sigma");

  const int d = spec.T * spec.A;
  std::vector<std::vector<double>> patterns(spec.modes);
  for (int i = 0; i < spec.modes; ++i) patterns[i] = mode_pattern(spec, i);

  // Modes must stay separated well beyond the noise scale or the labels
  // stop meaning anything.
  for (int i = 0; i < spec.modes; ++i)
    for (int j = i + 1; j < spec.modes; ++j) {
      double s2 = 0.0;
      for (int k = 0; k < d; ++k) {
        double diff = patterns[i][k] - patterns[j][k];
        s2 += diff * diff;
      }
      if (std::sqrt(s2) <= 10.0 * spec.sigma)
        throw std::invalid_argument(
            "gen_trajectories: sigma too large for the mode separation");
    }

  ChunkDataset ds;
  ds.n = spec.modes * spec.chunks_per_mode;
  ds.T = spec.T;
  ds.A = spec.A;
  ds.chunks.resize(static_cast<std::size_t>(ds.n) * d);
  ds.mode.resize(ds.n);
  Rng rng(spec.seed);
  for (int i = 0; i < spec.modes; ++i) {
    for (int c = 0; c < spec.chunks_per_mode; ++c) {
      int row = i * spec.chunks_per_mode + c;
      ds.mode[row] = i;
      double* out = ds.chunks.data() + static_cast<std::size_t>(row) * d;
      if (spec.sigma == 0.0) {
        std::copy(patterns[i].begin(), patterns[i].end(), out);
      } else {
        for (int k = 0; k < d; ++k)
          out[k] = clampd(patterns[i][k] + spec.sigma * rng.normal(), -1.0, 1.0);
      }
    }
  }
  return ds;
}

// ---- point-mass environment ------------------------------------------------

const std::vector<Task>& standard_tasks() {
  static const std::vector<Task> tasks = {
      {"reach", {{{0.6, 0.6}}}, 0},
      {"l_path", {{{0.6, 0.0}, {0.6, 0.6}}}, 0},
      {"z_path", {{{-0.6, 0.6}, {0.6, 0.6}, {-0.6, -0.6}}}, 0},
      {"dwell", {{{0.0, 0.6}, {0.6, -0.3}}}, 5},
  };
  return tasks;
}

void PointMassEnv::reset(int task_id_, Rng& rng) {
  const auto& tasks = standard_tasks();
  if (task_id_ < 0 || task_id_ >= static_cast<int>(tasks.size()))
    throw std::invalid_argument("PointMassEnv: unknown task id");
  task = tasks[task_id_];
  task_id = task_id_;
  pos = {rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)};
  progress = 0;
  dwell_left = task.dwell;
  steps = 0;
  success = false;
}

void PointMassEnv::step(const double* a) {
  pos[0] = clampd(pos[0] + a[0] * kStepScale, -1.0, 1.0);
  pos[1] = clampd(pos[1] + a[1] * kStepScale, -1.0, 1.0);
  ++steps;
  if (success) return;
  const auto& wp = task.waypoints[progress];
  double dx = pos[0] - wp[0];
  double dy = pos[1] - wp[1];
  if (std::sqrt(dx * dx + dy * dy) <= kTolerance) {
    if (dwell_left > 0) --dwell_left;
    if (dwell_left == 0) {
      ++progress;
      dwell_left = task.dwell;
      if (progress == static_cast<int>(task.waypoints.size())) success = true;
    }
  } else {
    dwell_left = task.dwell;  // dwell steps must be consecutive
  }
}

std::vector<double> PointMassEnv::observe() const {
  std::vector<double> o(kObsDim, 0.0);
  o[0] = pos[0];
  o[1] = pos[1];
  for (int w = 0; w < kMaxWaypoints; ++w) {
    if (w < static_cast<int>(task.waypoints.size())) {
      o[2 + 2 * w] = task.waypoints[w][0] - pos[0];
      o[3 + 2 * w] = task.waypoints[w][1] - pos[1];
    }
  }
  o[2 + 2 * kMaxWaypoints + std::min(progress, 3)] = 1.0;
  return o;
}

std::array<double, 2> scripted_expert(const PointMassEnv& e) {
  if (e.success) return {0.0, 0.0};
  const auto& wp = e.task.waypoints[e.progress];
  double dx = wp[0] - e.pos[0];
  double dy = wp[1] - e.pos[1];
  double dist = std::sqrt(dx * dx + dy * dy);
  if (dist <= kTolerance) return {0.0, 0.0};  // hold for the dwell counter
  double ax = dx / kStepScale;
  double ay = dy / kStepScale;
  double norm = std::sqrt(ax * ax + ay * ay);
  if (norm > 1.0) {
    ax /= norm;
    ay /= norm;
  }
  return {ax, ay};
}

// ---- demonstration store ----------------------------------------------------

DemoStore collect_demos(int episodes_per_task, std::uint64_t seed) {
  DemoStore store;
  store.seed = seed;
  Rng rng(seed);
  PointMassEnv e;
  const int n_tasks = static_cast<int>(standard_tasks().size());
  for (int task_id = 0; task_id < n_tasks; ++task_id) {
    for (int ep = 0; ep < episodes_per_task; ++ep) {
      e.reset(task_id, rng);
      Episode rec;
      rec.task_id = task_id;
      while (!e.done()) {
        auto o = e.observe();
        rec.obs.insert(rec.obs.end(), o.begin(), o.end());
        auto a = scripted_expert(e);
        rec.act.push_back(a[0]);
        rec.act.push_back(a[1]);
        e.step(a.data());
      }
      rec.success = e.success;
      if (!rec.success)
        throw std::runtime_error(
            "collect_demos: expert failed task '" + e.task.name +
            "' episode " + std::to_string(ep) + " after " +
            std::to_string(e.steps) + " steps");
      store.episodes.push_back(std::move(rec));
    }
  }
  return store;
}

void save_demos(const std::string& path, const DemoStore& store) {
  ckpt::Writer w(path);
  w.magic("RDEM1");
  w.u32(static_cast<std::uint32_t>(store.obs_dim));
  w.u32(static_cast<std::uint32_t>(store.act_dim));
  w.u32(static_cast<std::uint32_t>(store.episodes.size()));
  w.u64(store.seed);
  for (const auto& ep : store.episodes) {
    std::size_t len = ep.obs.size() / store.obs_dim;
    w.u32(static_cast<std::uint32_t>(ep.task_id));
    w.u32(static_cast<std::uint32_t>(len));
    w.u32(ep.success ? 1u : 0u);
    w.f32s(ep.obs.data(), ep.obs.size());
    w.f32s(ep.act.data(), ep.act.size());
  }
  w.close();

  nlohmann::json side;
  side["format"] = "RDEM1";
  side["seed"] = store.seed;
  side["obs_dim"] = store.obs_dim;
  side["act_dim"] = store.act_dim;
  side["episodes"] = store.episodes.size();
  side["step_scale"] = kStepScale;
  side["tolerance"] = kTolerance;
  side["horizon"] = kHorizon;
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : standard_tasks()) {
    std::size_t count = 0;
    for (const auto& ep : store.episodes)
      if (standard_tasks()[ep.task_id].name == t.name) ++count;
    tasks.push_back({{"name", t.name},
                     {"waypoints", t.waypoints},
                     {"dwell", t.dwell},
                     {"episodes", count}});
  }
  side["tasks"] = tasks;
  std::ofstream f(path + ".json");
  f << side.dump(2) << "\n";
  if (!f) throw std::runtime_error("save_demos: cannot write " + path + ".json");
}

DemoStore load_demos(const std::string& path) {
  ckpt::Reader r(path);
  r.expect_magic("RDEM1");
  DemoStore store;
  store.obs_dim = static_cast<int>(r.u32());
  store.act_dim = static_cast<int>(r.u32());
  std::uint32_t n = r.u32();
  store.seed = r.u64();
  store.episodes.resize(n);
  for (auto& ep : store.episodes) {
    ep.task_id = static_cast<int>(r.u32());
    std::size_t len = r.u32();
    ep.success = r.u32() != 0;
    ep.obs.resize(len * store.obs_dim);
    ep.act.resize(len * store.act_dim);
    r.f32s(ep.obs.data(), ep.obs.size());
    r.f32s(ep.act.data(), ep.act.size());
  }
  if (!r.at_end()) throw ckpt::FormatError("trailing bytes in " + path);
  return store;
}

DemoViews make_views(const DemoStore& store, int h, int T) {
  if (h < 1 || T < 1) throw std::invalid_argument("make_views: h, T >= 1");
  DemoViews v;
  v.h = h;
  v.T = T;
  v.obs_dim = store.obs_dim;
  v.act_dim = store.act_dim;
  for (const auto& ep : store.episodes)
    v.n += static_cast<int>(ep.obs.size()) / store.obs_dim;
  v.windows.resize(static_cast<std::size_t>(v.n) * h * store.obs_dim);
  v.chunks.resize(static_cast<std::size_t>(v.n) * T * store.act_dim);
  v.task.resize(v.n);

  int row = 0;
  for (const auto& ep : store.episodes) {
    int L = static_cast<int>(ep.obs.size()) / store.obs_dim;
    for (int t = 0; t < L; ++t, ++row) {
      v.task[row] = ep.task_id;
      double* wout =
          v.windows.data() + static_cast<std::size_t>(row) * h * store.obs_dim;
      for (int s = 0; s < h; ++s) {
        int src = std::max(t - h + 1 + s, 0);  // repeat the first observation
        std::copy_n(ep.obs.data() + static_cast<std::size_t>(src) * store.obs_dim,
                    store.obs_dim, wout + static_cast<std::size_t>(s) * store.obs_dim);
      }
      double* cout_ =
          v.chunks.data() + static_cast<std::size_t>(row) * T * store.act_dim;
      for (int s = 0; s < T; ++s) {
        int src = std::min(t + s, L - 1);  // repeat the last action
        std::copy_n(ep.act.data() + static_cast<std::size_t>(src) * store.act_dim,
                    store.act_dim, cout_ + static_cast<std::size_t>(s) * store.act_dim);
      }
    }
  }
  return v;
}

}  // namespace rarsq::env
