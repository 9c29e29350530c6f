#include "rarsq/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "json.hpp"

namespace rarsq::xp {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

SeedEval eval_one_seed(const cst::CstParams* p, const sae::Stage1Result* s1,
                       const config::RunConfig& rc, std::uint64_t seed) {
  SeedEval se;
  se.seed = seed;
  auto tasks = env::standard_tasks();
  auto expert = expert_policy(rc.stage1.T, rc.stage1.A);
  int total = 0, wins = 0;
  for (int t = 0; t < static_cast<int>(tasks.size()); ++t) {
    TaskResult tr;
    tr.task = tasks[t].name;
    tr.stage_hist.assign(tasks[t].waypoints.size() + 1, 0);
    for (int ep = 0; ep < rc.eval.episodes_per_task; ++ep) {
      Rng er(seed + static_cast<std::uint64_t>(ep));
      env::PointMassEnv e;
      e.reset(t, er);
      bool success = false;
      int steps = 0;
      if (p != nullptr) {
        cst::SamplingConfig sc = rc.sampling;
        sc.seed = seed + static_cast<std::uint64_t>(ep);
        // Rollouts want mutable params for graph wiring but only read
        // values; no backward pass runs.
        auto r = cst::rollout_policy(e, const_cast<cst::CstParams&>(*p),
                                     const_cast<sae::Stage1Result&>(*s1), sc,
                                     rc.eval.replan_every);
        success = r.success;
        steps = r.steps;
      } else {
        auto r = cst::rollout(e, expert, rc.stage1.T, rc.stage1.A, 1);
        success = r.success;
        steps = r.steps;
      }
      ++tr.episodes;
      ++total;
      if (success) {
        ++tr.successes;
        ++wins;
      }
      int done = std::min<int>(e.progress,
                               static_cast<int>(tasks[t].waypoints.size()));
      ++tr.stage_hist[done];
      tr.mean_steps += steps;
    }
    if (tr.episodes > 0) tr.mean_steps /= tr.episodes;
    se.tasks.push_back(std::move(tr));
  }
  se.success = total > 0 ? static_cast<double>(wins) / total : 0.0;
  return se;
}

EvalReport eval_over_seeds(const cst::CstParams* p,
                           const sae::Stage1Result* s1,
                           const config::RunConfig& rc) {
  EvalReport rep;
  rep.episodes_per_task = rc.eval.episodes_per_task;
  rep.replan_every = rc.eval.replan_every;
  for (auto seed : rc.eval.seeds)
    rep.per_seed.push_back(eval_one_seed(p, s1, rc, seed));
  double mu = 0.0;
  for (const auto& se : rep.per_seed) mu += se.success;
  mu /= static_cast<double>(rep.per_seed.size());
  double var = 0.0;
  for (const auto& se : rep.per_seed)
    var += (se.success - mu) * (se.success - mu);
  var /= static_cast<double>(rep.per_seed.size());
  rep.mean_success = mu;
  rep.std_success = std::sqrt(var);
  return rep;
}

}  // namespace

env::ChunkDataset sinusoid_data(const config::RunConfig& rc,
                                std::uint64_t seed) {
  env::TrajectorySpec spec;
  spec.modes = rc.data.modes;
  spec.chunks_per_mode = rc.data.chunks_per_mode;
  spec.T = rc.stage1.T;
  spec.A = rc.stage1.A;
  spec.sigma = rc.data.sigma;
  spec.seed = seed;
  return env::gen_trajectories(spec);
}

ModeRun train_mode(const env::ChunkDataset& data, quant::GradMode mode,
                   std::uint64_t seed, const config::RunConfig& rc,
                   const std::string& metrics_csv) {
  sae::Stage1Config cfg = rc.stage1;
  cfg.mode = mode;
  cfg.seed = seed;
  auto res = sae::train_stage1(data.chunks.data(), data.n, cfg, metrics_csv);
  const auto& last = res.metrics.back();
  ModeRun run;
  run.mode = config::mode_name(mode);
  run.seed = seed;
  run.active_d1 = last.usage[0].active;
  run.entropy_d1 = last.usage[0].entropy;
  run.perplexity_d1 = last.usage[0].perplexity;
  run.quant_l1 = last.quant_l1;
  run.recon = last.recon;
  return run;
}

std::string mode_csv(const std::vector<ModeRun>& runs) {
  std::string out =
      "mode,seed,active_d1,entropy_d1,perplexity_d1,quant_l1,recon\n";
  for (const auto& r : runs) {
    out += r.mode + "," + std::to_string(r.seed) + "," +
           std::to_string(r.active_d1) + "," + fmt(r.entropy_d1) + "," +
           fmt(r.perplexity_d1) + "," + fmt(r.quant_l1) + "," +
           fmt(r.recon) + "\n";
  }
  return out;
}

Pipeline train_pipeline(const env::DemoViews& views,
                        const config::RunConfig& rc, std::uint64_t seed,
                        const std::string& s1_csv,
                        const std::string& cst_csv) {
  Pipeline pl;
  sae::Stage1Config s1c = rc.stage1;
  s1c.seed = seed;
  pl.s1 = sae::train_stage1(views.chunks.data(), views.n, s1c, s1_csv);
  cst::CstConfig cc = rc.cst;
  cc.seed = seed;
  pl.policy = cst::train_cst(views, pl.s1, cc, cst_csv);
  return pl;
}

cst::ChunkPolicy expert_policy(int T, int A) {
  return [T, A](const std::vector<double>& hist, int od,
                int) -> std::vector<double> {
    const double* o = hist.data() + hist.size() - od;
    int progress = 0;
    for (int j = 0; j < 4; ++j)
      if (o[8 + j] == 1.0) progress = j;
    std::vector<double> chunk(static_cast<std::size_t>(T) * A, 0.0);
    if (progress >= env::kMaxWaypoints) return chunk;
    double rx = o[2 + 2 * progress];
    double ry = o[3 + 2 * progress];
    double ax = rx / env::kStepScale;
    double ay = ry / env::kStepScale;
    double norm = std::sqrt(ax * ax + ay * ay);
    if (norm > 1.0) {
      ax /= norm;
      ay /= norm;
    }
    for (int t = 0; t < T; ++t) {
      chunk[static_cast<std::size_t>(t) * A] = ax;
      if (A > 1) chunk[static_cast<std::size_t>(t) * A + 1] = ay;
    }
    return chunk;
  };
}

EvalReport evaluate_policy(const cst::CstParams& p,
                           const sae::Stage1Result& s1,
                           const config::RunConfig& rc) {
  return eval_over_seeds(&p, &s1, rc);
}

EvalReport evaluate_expert(const config::RunConfig& rc) {
  return eval_over_seeds(nullptr, nullptr, rc);
}

std::string eval_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["episodes_per_task"] = r.episodes_per_task;
  j["replan_every"] = r.replan_every;
  j["per_seed"] = nlohmann::ordered_json::array();
  for (const auto& se : r.per_seed) {
    nlohmann::ordered_json js;
    js["seed"] = se.seed;
    js["success"] = se.success;
    js["tasks"] = nlohmann::ordered_json::array();
    for (const auto& t : se.tasks) {
      nlohmann::ordered_json jt;
      jt["task"] = t.task;
      jt["episodes"] = t.episodes;
      jt["successes"] = t.successes;
      jt["stage_completion"] = t.stage_hist;
      jt["mean_steps"] = t.mean_steps;
      js["tasks"].push_back(jt);
    }
    j["per_seed"].push_back(js);
  }
  j["mean_success"] = r.mean_success;
  j["std_success"] = r.std_success;
  return j.dump(2) + "\n";
}

std::vector<AblationRow> ablation_grid(const config::RunConfig& rc,
                                       const std::string& prefix,
                                       std::ostream* log) {
  struct Variant {
    const char* name;
    bool rotation;
    bool no_ar;
    bool no_refine;
  };
  const Variant variants[] = {
      {"full", true, false, false},
      {"no_rotation", false, false, false},
      {"no_ar", true, true, false},
      {"no_rotation_no_ar", false, true, false},
      {"no_refine", true, false, true},
  };

  std::vector<AblationRow> rows;
  for (const auto& v : variants) rows.push_back({v.name, {}, 0.0});

  for (auto seed : rc.eval.seeds) {
    auto demos =
        env::collect_demos(rc.data.episodes_per_task, seed);
    auto views = env::make_views(demos, rc.cst.h, rc.stage1.T);

    sae::Stage1Result s1_by_mode[2];
    for (int rot = 0; rot < 2; ++rot) {
      sae::Stage1Config s1c = rc.stage1;
      s1c.mode = rot ? quant::GradMode::rotation : quant::GradMode::ste;
      s1c.seed = seed;
      std::string csv = prefix + "s1_" +
                        std::string(config::mode_name(s1c.mode)) + "_s" +
                        std::to_string(seed) + ".csv";
      s1_by_mode[rot] =
          sae::train_stage1(views.chunks.data(), views.n, s1c, csv);
      if (log)
        *log << "[ablation] seed " << seed << " stage-1 "
             << config::mode_name(s1c.mode) << " recon "
             << s1_by_mode[rot].metrics.back().recon << "\n";
    }

    for (std::size_t vi = 0; vi < std::size(variants); ++vi) {
      const auto& v = variants[vi];
      auto& s1 = s1_by_mode[v.rotation ? 1 : 0];
      cst::CstConfig cc = rc.cst;
      cc.seed = seed;
      cc.no_ar = v.no_ar;
      cc.no_refine = v.no_refine;
      std::string csv = prefix + "cst_" + v.name + "_s" +
                        std::to_string(seed) + ".csv";
      auto policy = cst::train_cst(views, s1, cc, csv);
      auto se = eval_one_seed(&policy.params, &s1, rc, seed);
      rows[vi].per_seed.push_back(se.success);
      if (log)
        *log << "[ablation] seed " << seed << " " << v.name << " success "
             << se.success << "\n";
    }
  }

  for (auto& row : rows) {
    double mu = 0.0;
    for (double s : row.per_seed) mu += s;
    row.mean_success = row.per_seed.empty()
                           ? 0.0
                           : mu / static_cast<double>(row.per_seed.size());
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows,
                         const std::vector<std::uint64_t>& seeds) {
  std::string out = "variant";
  for (auto s : seeds) out += ",success_s" + std::to_string(s);
  out += ",mean\n";
  for (const auto& r : rows) {
    out += r.name;
    for (double s : r.per_seed) out += "," + fmt(s);
    out += "," + fmt(r.mean_success) + "\n";
  }
  return out;
}

}  // namespace rarsq::xp
