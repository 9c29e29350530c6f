#pragma once
// Multi-depth residual quantization over learned codebooks. Each depth picks
// the nearest code to the running residual, emits a carried code vector, and
// subtracts it; the quantized latent is the sum of the carried vectors.
//
// Two gradient modes share the same code selection:
//   rotation: the carried vector is a frozen per-row linear map applied to
//             the residual (norm-preserving alignment onto the code), so
//             backward geometry depends on the sample.
//   ste:      the carried vector is the code itself and backward treats the
//             depth as identity.
//
// Codebooks learn by EMA over assigned residuals by default; a pull loss on
// the code vectors is available behind a flag instead.

#include <cstdint>
#include <vector>

#include "rarsq/graph.hpp"
#include "rarsq/rng.hpp"
#include "rarsq/tensor.hpp"

namespace rarsq::quant {

enum class GradMode : std::uint8_t { rotation = 0, ste = 1 };

struct Codebook {
  int K = 0;
  int m = 0;
  Tensor vec;                        // K x m code vectors
  std::vector<double> ema_count;     // K
  std::vector<double> ema_sum;       // K x m
  std::vector<std::int64_t> usage;   // K, per-epoch assignment histogram

  void init(int k_codes, int dim);
  const double* row(int k) const {
    return vec.v.data() + static_cast<std::size_t>(k) * m;
  }
};

struct CodebookStack {
  int D = 0;
  int K = 0;
  int m = 0;
  GradMode mode = GradMode::rotation;
  std::vector<Codebook> books;  // D entries, shared K and m

  static CodebookStack make(int depth, int k_codes, int dim, GradMode mode);
  void reset_usage();
};

// Full trace of one quantization: codes k_1..k_D, carried vectors, residual
// chain r_0..r_D, and the quantized latent.
struct SkillPath {
  std::vector<int> codes;        // D
  std::vector<double> carried;   // D x m
  std::vector<double> resid;     // (D+1) x m, resid row 0 = input
  std::vector<double> zhat;      // m
};

// Same trace batched; residual rows are laid out per depth as n x m blocks.
struct BatchPath {
  int n = 0;
  int m = 0;
  int D = 0;
  std::vector<std::vector<int>> codes;      // D vectors of n
  std::vector<std::vector<double>> carried; // D blocks of n*m
  std::vector<std::vector<double>> resid;   // D+1 blocks of n*m
  std::vector<double> zhat;                 // n*m
};

// Index of the nearest code row under squared distance; ties resolve to the
// lowest index. Throws on an empty codebook.
int nearest_code(const double* r, const Codebook& cb);

SkillPath quantize(const double* z, CodebookStack& stack,
                   bool record_usage = true);
BatchPath quantize_batch(const double* z, int n, CodebookStack& stack,
                         bool record_usage = true);

// Per code k at each depth, with n_k rows of the batch assigned to k:
//   count <- decay*count + (1-decay)*n_k
//   sum   <- decay*sum   + (1-decay)*(sum of assigned pre-quantization rows)
//   vec   <- sum / (count + 1e-5)
// Unassigned codes decay toward stale values; nothing is reseeded.
void ema_update(CodebookStack& stack, const BatchPath& batch, double decay);

struct DepthUsage {
  int active = 0;
  std::vector<double> freq;  // K, sums to 1
  double entropy = 0.0;      // nats
  double perplexity = 1.0;   // exp(entropy)
};
// Reads the per-epoch histograms. Throws if a depth has no recorded usage.
std::vector<DepthUsage> usage_metrics(const CodebookStack& stack);

// k-means++ seeding from one data batch, depth by depth: depth d is seeded
// from the residuals the earlier depths leave behind, then tightened with a
// few Lloyd rounds so the next depth sees settled residuals. EMA state
// starts as count 1, sum = vector, so early updates move vectors rather
// than divide near-zero counts.
void init_kmeanspp(CodebookStack& stack, const double* data, int rows,
                   Rng& rng, int lloyd_iters = 4);

// Builds the quantization of z_node's current values into g with frozen
// per-depth maps. `commit` is the commitment penalty, beta * mean over the
// batch of the per-sample sum over depths (residuals pulled toward carried
// vectors in rotation mode, toward the raw codes in ste mode). When
// train_codebooks is set, code vectors enter the graph as leaves and
// `codebook_pull` is the matching loss that drags them toward the residuals
// they quantize; otherwise it is -1 and codes enter as constants.
struct GraphQuant {
  ad::NodeId zhat = -1;
  ad::NodeId commit = -1;
  ad::NodeId codebook_pull = -1;
  std::vector<std::vector<int>> codes;  // D vectors of n
};
GraphQuant quantize_into_graph(ad::Graph& g, ad::NodeId z_node,
                               CodebookStack& stack, double beta,
                               bool train_codebooks = false,
                               bool record_usage = true);

}  // namespace rarsq::quant
