#pragma once
// Per-row frozen linear maps that carry a residual onto its selected code
// vector. The map is treated as a constant during differentiation: forward
// applies it, backward applies its transpose, and nothing else flows.
//
// The map is never materialized on the apply path; it is applied through its
// rank-1 structure, v -> v - 2*lam*(lam.v) + 2*qhat*(rhat.v), so cost stays
// O(dim) per row. materialize() exists for diagnostics and tests only.

#include <cstdint>
#include <vector>

namespace rarsq::rot {

// Degeneracy threshold shared by both branch tests.
constexpr double kDegenEps = 1e-8;

enum class Branch : std::uint8_t {
  regular = 0,      // proper rotation times norm ratio
  antipodal = 1,    // reflection (residual and code anti-aligned)
  passthrough = 2,  // residual (or code) too small; identity jacobian
};

Branch classify(const double* r, const double* q, int dim);

// Unit-norm rotation matrix for a non-degenerate pair, written into
// m_out[dim*dim]. Satisfies M rhat = qhat and M^T M = I. Tests only.
void rotation_matrix(const double* r, const double* q, int dim, double* m_out);

// Frozen maps for a batch of residual rows against their selected codes.
// Each row stores an affine map y = y0 + A (v - v0):
//   regular:      A = scale * (I - 2 lam lam^T + 2 qhat rhat^T)
//   antipodal:    A = scale * (I - 2 rhat rhat^T)
//   passthrough:  A = I, y0 = code vector
// with scale = |code| / |residual| and y0 = A v0 computed at freeze time.
struct BatchRotation {
  int rows = 0;
  int dim = 0;
  std::vector<Branch> branch;              // rows
  std::vector<double> scale;               // rows
  std::vector<double> lam, rhat, qhat;     // rows*dim
  std::vector<double> v0, y0;              // rows*dim

  static BatchRotation freeze(const double* residual, const double* code,
                              int rows, int dim);

  // Every row forced to the passthrough branch: forward carries the code
  // value, backward is identity. This is the straight-through estimator as
  // a frozen affine map anchored at the freeze-time residual.
  static BatchRotation freeze_passthrough(const double* residual,
                                          const double* code, int rows,
                                          int dim);

  // y[rows*dim] = y0 + A (v - v0), row-wise.
  void apply(const double* v, double* y) const;

  // gv[rows*dim] += A^T gy, row-wise.
  void apply_transpose_accum(const double* gy, double* gv) const;

  // Writes row's A into m_out[dim*dim]. Diagnostics and tests only.
  void materialize(int row, double* m_out) const;
};

}  // namespace rarsq::rot
