#include "rarsq/rotation.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace rarsq::rot {

namespace {

double norm(const double* x, int dim) {
  double s = 0.0;
  for (int i = 0; i < dim; ++i) s += x[i] * x[i];
  return std::sqrt(s);
}

double dot(const double* x, const double* y, int dim) {
  double s = 0.0;
  for (int i = 0; i < dim; ++i) s += x[i] * y[i];
  return s;
}

}  // namespace

Branch classify(const double* r, const double* q, int dim) {
  double rn = norm(r, dim);
  double qn = norm(q, dim);
  if (rn < kDegenEps || qn < kDegenEps) return Branch::passthrough;
  double bis = 0.0;
  for (int i = 0; i < dim; ++i) {
    double b = r[i] / rn + q[i] / qn;
    bis += b * b;
  }
  if (std::sqrt(bis) < kDegenEps) return Branch::antipodal;
  return Branch::regular;
}

void rotation_matrix(const double* r, const double* q, int dim,
                     double* m_out) {
  if (classify(r, q, dim) != Branch::regular)
    throw std::invalid_argument("rotation_matrix: degenerate pair");
  std::vector<double> rh(dim), qh(dim), lam(dim);
  double rn = norm(r, dim), qn = norm(q, dim);
  for (int i = 0; i < dim; ++i) {
    rh[i] = r[i] / rn;
    qh[i] = q[i] / qn;
    lam[i] = rh[i] + qh[i];
  }
  double ln = norm(lam.data(), dim);
  for (int i = 0; i < dim; ++i) lam[i] /= ln;
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j)
      m_out[i * dim + j] = (i == j ? 1.0 : 0.0) - 2.0 * lam[i] * lam[j] +
                           2.0 * qh[i] * rh[j];
}

BatchRotation BatchRotation::freeze(const double* residual, const double* code,
                                    int rows, int dim) {
  BatchRotation b;
  b.rows = rows;
  b.dim = dim;
  b.branch.resize(rows);
  b.scale.assign(rows, 1.0);
  b.lam.assign(static_cast<size_t>(rows) * dim, 0.0);
  b.rhat.assign(static_cast<size_t>(rows) * dim, 0.0);
  b.qhat.assign(static_cast<size_t>(rows) * dim, 0.0);
  b.v0.assign(residual, residual + static_cast<size_t>(rows) * dim);
  b.y0.assign(static_cast<size_t>(rows) * dim, 0.0);
  for (int i = 0; i < rows; ++i) {
    const double* r = residual + static_cast<size_t>(i) * dim;
    const double* q = code + static_cast<size_t>(i) * dim;
    double* lam = b.lam.data() + static_cast<size_t>(i) * dim;
    double* rh = b.rhat.data() + static_cast<size_t>(i) * dim;
    double* qh = b.qhat.data() + static_cast<size_t>(i) * dim;
    double* y0 = b.y0.data() + static_cast<size_t>(i) * dim;
    Branch br = classify(r, q, dim);
    b.branch[i] = br;
    if (br == Branch::passthrough) {
      // Too small to orient: forward is the code itself, jacobian stays I.
      std::memcpy(y0, q, sizeof(double) * dim);
      continue;
    }
    double rn = norm(r, dim), qn = norm(q, dim);
    b.scale[i] = qn / rn;
    for (int j = 0; j < dim; ++j) {
      rh[j] = r[j] / rn;
      qh[j] = q[j] / qn;
    }
    if (br == Branch::antipodal) {
      double rv = dot(rh, r, dim);
      for (int j = 0; j < dim; ++j)
        y0[j] = b.scale[i] * (r[j] - 2.0 * rh[j] * rv);
      continue;
    }
    for (int j = 0; j < dim; ++j) lam[j] = rh[j] + qh[j];
    double ln = norm(lam, dim);
    for (int j = 0; j < dim; ++j) lam[j] /= ln;
    double lv = dot(lam, r, dim);
    double rv = dot(rh, r, dim);
    for (int j = 0; j < dim; ++j)
      y0[j] = b.scale[i] * (r[j] - 2.0 * lam[j] * lv + 2.0 * qh[j] * rv);
  }
  return b;
}

BatchRotation BatchRotation::freeze_passthrough(const double* residual,
                                                const double* code, int rows,
                                                int dim) {
  BatchRotation b;
  b.rows = rows;
  b.dim = dim;
  b.branch.assign(rows, Branch::passthrough);
  b.scale.assign(rows, 1.0);
  b.lam.assign(static_cast<size_t>(rows) * dim, 0.0);
  b.rhat.assign(static_cast<size_t>(rows) * dim, 0.0);
  b.qhat.assign(static_cast<size_t>(rows) * dim, 0.0);
  b.v0.assign(residual, residual + static_cast<size_t>(rows) * dim);
  b.y0.assign(code, code + static_cast<size_t>(rows) * dim);
  return b;
}

void BatchRotation::apply(const double* v, double* y) const {
  for (int i = 0; i < rows; ++i) {
    const double* vi = v + static_cast<size_t>(i) * dim;
    const double* v0i = v0.data() + static_cast<size_t>(i) * dim;
    const double* y0i = y0.data() + static_cast<size_t>(i) * dim;
    double* yi = y + static_cast<size_t>(i) * dim;
    double s = scale[i];
    switch (branch[i]) {
      case Branch::passthrough:
        for (int j = 0; j < dim; ++j) yi[j] = y0i[j] + (vi[j] - v0i[j]);
        break;
      case Branch::antipodal: {
        const double* rh = rhat.data() + static_cast<size_t>(i) * dim;
        double rv = 0.0;
        for (int j = 0; j < dim; ++j) rv += rh[j] * (vi[j] - v0i[j]);
        for (int j = 0; j < dim; ++j)
          yi[j] = y0i[j] + s * ((vi[j] - v0i[j]) - 2.0 * rh[j] * rv);
        break;
      }
      case Branch::regular: {
        const double* lm = lam.data() + static_cast<size_t>(i) * dim;
        const double* rh = rhat.data() + static_cast<size_t>(i) * dim;
        const double* qh = qhat.data() + static_cast<size_t>(i) * dim;
        double lv = 0.0, rv = 0.0;
        for (int j = 0; j < dim; ++j) {
          double w = vi[j] - v0i[j];
          lv += lm[j] * w;
          rv += rh[j] * w;
        }
        for (int j = 0; j < dim; ++j)
          yi[j] = y0i[j] + s * ((vi[j] - v0i[j]) - 2.0 * lm[j] * lv +
                                2.0 * qh[j] * rv);
        break;
      }
    }
  }
}

void BatchRotation::apply_transpose_accum(const double* gy, double* gv) const {
  for (int i = 0; i < rows; ++i) {
    const double* gi = gy + static_cast<size_t>(i) * dim;
    double* oi = gv + static_cast<size_t>(i) * dim;
    double s = scale[i];
    switch (branch[i]) {
      case Branch::passthrough:
        for (int j = 0; j < dim; ++j) oi[j] += gi[j];
        break;
      case Branch::antipodal: {
        const double* rh = rhat.data() + static_cast<size_t>(i) * dim;
        double rv = dot(rh, gi, dim);
        for (int j = 0; j < dim; ++j)
          oi[j] += s * (gi[j] - 2.0 * rh[j] * rv);
        break;
      }
      case Branch::regular: {
        // A^T = scale * (I - 2 lam lam^T + 2 rhat qhat^T)
        const double* lm = lam.data() + static_cast<size_t>(i) * dim;
        const double* rh = rhat.data() + static_cast<size_t>(i) * dim;
        const double* qh = qhat.data() + static_cast<size_t>(i) * dim;
        double lv = dot(lm, gi, dim);
        double qv = dot(qh, gi, dim);
        for (int j = 0; j < dim; ++j)
          oi[j] += s * (gi[j] - 2.0 * lm[j] * lv + 2.0 * rh[j] * qv);
        break;
      }
    }
  }
}

void BatchRotation::materialize(int row, double* m_out) const {
  if (row < 0 || row >= rows)
    throw std::out_of_range("BatchRotation::materialize: bad row");
  const double* lm = lam.data() + static_cast<size_t>(row) * dim;
  const double* rh = rhat.data() + static_cast<size_t>(row) * dim;
  const double* qh = qhat.data() + static_cast<size_t>(row) * dim;
  double s = scale[row];
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) {
      double id = i == j ? 1.0 : 0.0;
      double m;
      switch (branch[row]) {
        case Branch::passthrough:
          m = id;
          break;
        case Branch::antipodal:
          m = s * (id - 2.0 * rh[i] * rh[j]);
          break;
        default:
          m = s * (id - 2.0 * lm[i] * lm[j] + 2.0 * qh[i] * rh[j]);
          break;
      }
      m_out[i * dim + j] = m;
    }
}

}  // namespace rarsq::rot
