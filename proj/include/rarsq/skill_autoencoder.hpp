#pragma once
// Stage 1: compress action chunks into quantized skill latents. An MLP
// encoder maps a flattened chunk to a latent, the residual quantizer snaps
// it onto the codebook stack, and a decoder reconstructs the chunk. The
// encoder and decoder train by AdamW on reconstruction + commitment; the
// codebooks train by EMA outside the gradient path.

#include <cstdint>
#include <string>
#include <vector>

#include "rarsq/graph.hpp"
#include "rarsq/optim.hpp"
#include "rarsq/quantizer.hpp"
#include "rarsq/rng.hpp"
#include "rarsq/tensor.hpp"
#include "rarsq/transformer.hpp"

namespace rarsq::sae {

struct Stage1Config {
  int T = 8;
  int A = 2;
  int m = 8;   // latent dim
  int K = 16;  // codes per depth
  int D = 2;   // depths
  quant::GradMode mode = quant::GradMode::rotation;
  double beta = 0.25;  // commitment weight
  int batch = 64;
  double lr = 1e-3;
  int epochs = 50;
  int warmup_epochs = 2;
  double ema_decay = 0.99;
  double weight_decay = 1e-6;
  std::uint64_t seed = 0;
  int hidden = 128;

  // Sequence decoder variant: per-step tokens through non-causal
  // transformer blocks instead of the flat MLP.
  bool attention_decoder = false;
  int dec_layers = 4;
  int dec_d_model = 64;
  int dec_heads = 4;
  int dec_ff = 256;
};

struct AutoencoderParams {
  Stage1Config cfg;
  // encoder: one hidden layer
  Tensor enc_w1, enc_b1, enc_w2, enc_b2;
  // MLP decoder: two hidden layers
  Tensor dec_w1, dec_b1, dec_w2, dec_b2, dec_w3, dec_b3;
  // attention decoder: latent -> T tokens -> blocks -> per-step actions
  Tensor att_in_w, att_in_b, att_pos, att_out_w, att_out_b;
  tfm::Params att;

  static AutoencoderParams make(const Stage1Config& cfg, Rng& rng);
  void collect(std::vector<Tensor*>& out);
  void named(std::map<std::string, const Tensor*>& out) const;
  void load(const std::map<std::string, Tensor>& table);
};

// Per-action-dimension affine map onto [-1,1] fitted from training data;
// constant dimensions map to 0 and invert back to their constant.
struct NormStats {
  std::vector<double> lo, hi;  // A entries each
};
NormStats compute_norm(const double* chunks, int n, int T, int A);
void normalize_chunks(const NormStats& ns, const double* in, double* out,
                      int n, int T, int A);
void denormalize_chunks(const NormStats& ns, const double* in, double* out,
                        int n, int T, int A);

// Graph builders. x is [n, T*A]; the latent is [n, m]; the reconstruction
// is [n, T*A].
ad::NodeId build_encoder(ad::Graph& g, ad::NodeId x, AutoencoderParams& p);
ad::NodeId build_decoder(ad::Graph& g, ad::NodeId z, int n,
                         AutoencoderParams& p);

// Latent for a single chunk (T*A values, already normalized). Throws on
// non-finite output.
std::vector<double> encode_chunk(const double* chunk, AutoencoderParams& p);

struct ReconResult {
  std::vector<double> ahat;  // T*A
  quant::SkillPath path;
  double recon = 0.0;   // mean squared error over the T*A entries
  double commit = 0.0;  // beta-weighted commitment penalty
};
ReconResult reconstruct(const double* chunk, AutoencoderParams& p,
                        quant::CodebookStack& stack);

struct EpochMetrics {
  int epoch = 0;
  double recon = 0.0;
  double commit = 0.0;
  double quant_l1 = 0.0;  // mean per-chunk L1 between z and zhat
  std::vector<quant::DepthUsage> usage;
};

struct Stage1Result {
  AutoencoderParams params;
  quant::CodebookStack stack;
  NormStats norm;
  std::vector<EpochMetrics> metrics;
};

// Trains on n raw chunks (row-major n x T*A). Normalization stats are
// fitted on the dataset and training runs in normalized space. Writes
// per-epoch metrics as CSV when metrics_csv is non-empty. Deterministic
// for a fixed config. Throws on divergence (loss above 1e3).
Stage1Result train_stage1(const double* chunks, int n,
                          const Stage1Config& cfg,
                          const std::string& metrics_csv = "");

void write_metrics_csv(const std::string& path,
                       const std::vector<EpochMetrics>& metrics, int depths);

// Single-file checkpoint: config scalars, normalization stats, codebooks
// with their EMA state, and all weights. Load-save round-trips byte for
// byte.
void save_stage1(const std::string& path, const Stage1Result& r);
Stage1Result load_stage1(const std::string& path);

}  // namespace rarsq::sae
