#pragma once
// Experiment drivers shared by the comparison CLI and the acceptance
// harness: gradient-mode comparisons on the synthetic set, the two-stage
// point-mass pipeline, policy evaluation with per-stage completion, and
// the ablation grid. Everything here is deterministic given the seeds, so
// rerunning a driver reproduces its metrics files byte for byte.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "rarsq/config.hpp"
#include "rarsq/cst.hpp"
#include "rarsq/envlab.hpp"
#include "rarsq/skill_autoencoder.hpp"

namespace rarsq::xp {

// Synthetic chunk set per the data config; the seed drives the noise.
env::ChunkDataset sinusoid_data(const config::RunConfig& rc,
                                std::uint64_t seed);

// One stage-1 training run; final-epoch summary for mode comparisons.
struct ModeRun {
  std::string mode;
  std::uint64_t seed = 0;
  int active_d1 = 0;
  double entropy_d1 = 0.0;
  double perplexity_d1 = 0.0;
  double quant_l1 = 0.0;
  double recon = 0.0;
};
ModeRun train_mode(const env::ChunkDataset& data, quant::GradMode mode,
                   std::uint64_t seed, const config::RunConfig& rc,
                   const std::string& metrics_csv);
std::string mode_csv(const std::vector<ModeRun>& runs);

// Two-stage training on prepared demonstration views.
struct Pipeline {
  sae::Stage1Result s1;
  cst::CstResult policy;
};
Pipeline train_pipeline(const env::DemoViews& views,
                        const config::RunConfig& rc, std::uint64_t seed,
                        const std::string& s1_csv,
                        const std::string& cst_csv);

// Evaluation. Episodes use per-episode streams derived as seed + index,
// so they are independent and safe to parallelize.
struct TaskResult {
  std::string task;
  int episodes = 0;
  int successes = 0;
  std::vector<std::int64_t> stage_hist;  // completed waypoint count 0..W
  double mean_steps = 0.0;
};
struct SeedEval {
  std::uint64_t seed = 0;
  std::vector<TaskResult> tasks;
  double success = 0.0;
};
struct EvalReport {
  int episodes_per_task = 0;
  int replan_every = 0;
  std::vector<SeedEval> per_seed;
  double mean_success = 0.0;
  double std_success = 0.0;
};
EvalReport evaluate_policy(const cst::CstParams& p,
                           const sae::Stage1Result& s1,
                           const config::RunConfig& rc);
// Scripted-expert oracle run through the same chunked rollout plumbing.
EvalReport evaluate_expert(const config::RunConfig& rc);
std::string eval_json(const EvalReport& r);

// Expert as a chunk policy, reading everything from the latest observation.
cst::ChunkPolicy expert_policy(int T, int A);

// Ablation grid over rc.eval.seeds as training seeds. Writes per-run
// metrics CSVs under prefix; each variant is evaluated with its training
// seed. Variants: full, no_rotation, no_ar, no_rotation_no_ar, no_refine.
struct AblationRow {
  std::string name;
  std::vector<double> per_seed;
  double mean_success = 0.0;
};
std::vector<AblationRow> ablation_grid(const config::RunConfig& rc,
                                       const std::string& prefix,
                                       std::ostream* log = nullptr);
std::string ablation_csv(const std::vector<AblationRow>& rows,
                         const std::vector<std::uint64_t>& seeds);

}  // namespace rarsq::xp
