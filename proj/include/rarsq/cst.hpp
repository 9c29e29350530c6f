#pragma once
// Stage 2: the causal skill policy. A causal transformer turns a task token
// plus an observation window into a context vector; per-depth heads predict
// code indices autoregressively; an offset head predicts a continuous
// refinement. Actions decode through the frozen stage-1 stack as the plain
// sum of chosen code vectors plus the offset, de-normalized and clamped.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rarsq/envlab.hpp"
#include "rarsq/graph.hpp"
#include "rarsq/quantizer.hpp"
#include "rarsq/rng.hpp"
#include "rarsq/skill_autoencoder.hpp"
#include "rarsq/transformer.hpp"

namespace rarsq::cst {

struct CstConfig {
  int h = 10;  // observation window length
  int obs_dim = env::kObsDim;
  int n_tasks = 4;
  int g_dim = 128;  // context width == transformer d_model
  int layers = 2;
  int heads = 4;
  int d_ff = 512;
  int code_emb = 32;    // width of the code embeddings fed to later heads
  int head_hidden = 128;
  // must match the stage-1 stack (checked on load and in the loss)
  int K = 16;
  int D = 2;
  int m = 8;
  int T = 8;
  int A = 2;
  // loss weights: cross-entropy per depth (depths beyond the list reuse the
  // last entry), then the refinement term
  double lambda_d1 = 2.0;
  double lambda_d2 = 1.0;
  double lambda_ref = 20.0;
  bool no_ar = false;      // heads condition on the context only
  bool no_refine = false;  // offset forced to zero
  int batch = 64;
  double lr = 1e-3;
  int epochs = 30;
  int warmup_epochs = 2;
  double weight_decay = 1e-6;
  std::uint64_t seed = 0;
};

struct CstParams {
  CstConfig cfg;
  Tensor obs_in_w, obs_in_b;  // per-step observation projection
  Tensor task_emb;            // n_tasks x g_dim
  Tensor pos_emb;             // (h+1) x g_dim, slot 0 is the task token
  tfm::Params tf;
  struct Head {
    Tensor w1, b1, w2, b2;  // final layer zero-initialized
  };
  std::vector<Tensor> code_emb;  // D-1 tables, K x code_emb
  std::vector<Head> heads;       // D; head d sees g plus d code embeddings
  Head ref;                      // context -> T*A offset

  static CstParams make(const CstConfig& cfg, Rng& rng);
  void collect(std::vector<Tensor*>& out);
  void named(std::map<std::string, const Tensor*>& out) const;
  void load(const std::map<std::string, Tensor>& table);
};

// Throws ckpt::CompatError unless the policy was built against the same
// (K, D, m) as the quantizer stack.
void check_compat(const CstConfig& cfg, const quant::CodebookStack& stack);

// check_compat plus the chunk shape (T, A) against the stage-1 model.
void require_stage1_match(const CstConfig& cfg, const sae::Stage1Result& s1);

// Context vector for one window (h*obs_dim values, batch of one). The
// window covers times t-h+1..t; nothing later enters the computation.
std::vector<double> encode_context(const double* window, int task_id,
                                   CstParams& p);

// Last h observations of a history, front-padded by repeating the first.
std::vector<double> window_from_history(const std::vector<double>& history,
                                        int obs_dim, int h);

// Graph builder shared by loss and inference: windows [n, h*obs_dim] ->
// contexts [n, g_dim].
ad::NodeId build_context(ad::Graph& g, ad::NodeId windows,
                         const std::vector<int>& task_ids, int n,
                         CstParams& p);

// K logits for depth d (1-based) given the context and the d-1 earlier
// codes. Throws on a wrong prefix length or out-of-range codes.
std::vector<double> predict_code_logits(const std::vector<double>& g_ctx,
                                        const std::vector<int>& prefix,
                                        int depth, CstParams& p);

struct SamplingConfig {
  double p = 0.9;            // nucleus threshold in (0, 1]
  double temperature = 1.0;  // > 0
  std::uint64_t seed = 0;
};

// Indices of the minimal descending-probability prefix with cumulative mass
// >= p, after temperature scaling. Sorted by descending probability.
std::vector<int> nucleus_kept(const std::vector<double>& logits, double p,
                              double temperature);
int nucleus_sample(const std::vector<double>& logits,
                   const SamplingConfig& sc, Rng& rng);

struct SampledCodes {
  std::vector<int> codes;     // D
  std::vector<double> logp;   // model log P(k_d | k_<d, g), full softmax
  double joint_logp = 0.0;    // sum of the per-depth terms
};
SampledCodes sample_codes(const std::vector<double>& g_ctx, CstParams& p,
                          const SamplingConfig& sc, Rng& rng);

// Decode codes through the frozen stage-1 decoder with an explicit offset
// in normalized action space; de-normalizes and clamps to [-1,1]. The code
// combination is the plain codebook sum.
std::vector<double> compose_with_offset(const std::vector<int>& codes,
                                        const std::vector<double>& offset,
                                        sae::Stage1Result& s1);
// Same, with the offset produced by the policy's refinement head (zero when
// the no-refine flag is set).
std::vector<double> compose_action(const std::vector<int>& codes,
                                   const std::vector<double>& g_ctx,
                                   CstParams& p, sae::Stage1Result& s1);

struct LossParts {
  double total = 0.0;
  std::vector<double> ce;  // per depth
  double refine = 0.0;     // unweighted mean squared error
};
// Teacher-forced loss on a batch: expert chunks are normalized and pushed
// through the frozen stack for ground-truth codes; heads score those codes;
// the refinement term decodes the teacher codes and asks offset + decode to
// reproduce the normalized chunk.
LossParts cst_loss(const double* windows, const int* task_ids,
                   const double* chunks_raw, int n, CstParams& p,
                   sae::Stage1Result& s1);

struct CstEpochMetrics {
  int epoch = 0;
  double total = 0.0;
  std::vector<double> ce;
  double refine = 0.0;
};

struct CstResult {
  CstParams params;
  std::vector<CstEpochMetrics> metrics;
};

// Trains the policy on aligned demonstration views against a frozen stage-1
// result. Stage-1 weights are read, never written. Deterministic per config.
CstResult train_cst(const env::DemoViews& views, sae::Stage1Result& s1,
                    const CstConfig& cfg, const std::string& metrics_csv = "");

// ---- inference ---------------------------------------------------------------

struct EpisodeRecord {
  std::vector<double> obs;  // steps x obs_dim, pre-action observations
  std::vector<double> act;  // steps x A, executed actions
  bool success = false;
  int steps = 0;
};

// Rolling-horizon execution: every T_a steps ask the policy for a fresh
// chunk from the observations so far and run its first T_a actions. The
// policy receives the full history (most recent last) and returns env-scale
// actions (T x A). The env must already be reset.
using ChunkPolicy = std::function<std::vector<double>(
    const std::vector<double>& history, int obs_dim, int task_id)>;
EpisodeRecord rollout(env::PointMassEnv& e, const ChunkPolicy& policy, int T,
                      int A, int T_a);

// The trained policy as a ChunkPolicy, seeded from sc.seed.
EpisodeRecord rollout_policy(env::PointMassEnv& e, CstParams& p,
                             sae::Stage1Result& s1, const SamplingConfig& sc,
                             int T_a);

// Single-file policy checkpoint; round-trips byte for byte.
void save_policy(const std::string& path, const CstResult& r);
CstResult load_policy(const std::string& path);

}  // namespace rarsq::cst
