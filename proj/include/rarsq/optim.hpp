#pragma once
// AdamW with decoupled weight decay, plus the epoch-granular learning-rate
// schedule shared by both training stages.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rarsq/tensor.hpp"

namespace rarsq {

// Thrown by the training loops when the loss goes non-finite or explodes;
// callers map it to their divergence exit path.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace rarsq

namespace rarsq::opt {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, AdamWConfig cfg);

  // Applies one update at the given learning rate, then zeroes the consumed
  // gradients. Parameters without accumulated gradients are skipped.
  void step(double lr);

  void zero_grad();
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

// Linear warmup over the first warmup epochs (epoch 0 runs at base/warmup),
// then cosine decay toward zero across the remaining epochs.
double lr_at_epoch(double base, int epoch, int total_epochs,
                   int warmup_epochs);

// Rescales all gradients in place so their joint L2 norm is at most
// max_norm; no-op when already within bounds or max_norm <= 0. Returns the
// pre-clip norm. The rotation backward map scales like code/residual norm,
// which spikes when residuals shrink faster than the EMA codebooks track;
// clipping bounds those spikes without touching the steady-state updates.
double clip_grad_norm(const std::vector<Tensor*>& params, double max_norm);

}  // namespace rarsq::opt
