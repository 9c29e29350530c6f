#include "rarsq/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <vector>
#include <limits>

namespace rarsq::kern {

namespace {

int g_thread_cap = 0;

int env_thread_cap() {
  static int cap = [] {
    const char* s = std::getenv("RARSQ_THREADS");
    if (!s || !*s) return 0;
    int v = std::atoi(s);
    return v > 0 ? v : 0;
  }();
  return cap;
}

// Work below this many flops is not worth a parallel region.
constexpr std::int64_t kGrain = 1 << 15;

inline int threads_for(std::int64_t work) {
  if (work < kGrain) return 1;
  return max_threads();
}

}  // namespace

int max_threads() {
  int t = omp_get_max_threads();
  int cap = env_thread_cap();
  if (cap > 0) t = std::min(t, cap);
  if (g_thread_cap > 0) t = std::min(t, g_thread_cap);
  return std::max(t, 1);
}

void set_thread_cap(int n) { g_thread_cap = n > 0 ? n : 0; }

// ---------------------------------------------------------------------------
// matmul family. The optimized inner loops unroll k by 4; each output row is
// produced by exactly one thread.

namespace {

inline void matmul_row(const double* __restrict a, const double* __restrict b,
                       double* __restrict c, int k, int n) {
  int k4 = k & ~3;
  for (int p = 0; p < k4; p += 4) {
    const double a0 = a[p], a1 = a[p + 1], a2 = a[p + 2], a3 = a[p + 3];
    const double* __restrict b0 = b + static_cast<std::int64_t>(p) * n;
    const double* __restrict b1 = b0 + n;
    const double* __restrict b2 = b1 + n;
    const double* __restrict b3 = b2 + n;
    for (int j = 0; j < n; ++j)
      c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
  }
  for (int p = k4; p < k; ++p) {
    const double ap = a[p];
    const double* __restrict bp = b + static_cast<std::int64_t>(p) * n;
    for (int j = 0; j < n; ++j) c[j] += ap * bp[j];
  }
}

// bt[n,k] -> out[k,n]
inline void transpose(const double* __restrict bt, double* __restrict out,
                      int n, int k) {
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < k; ++p)
      out[static_cast<std::int64_t>(p) * n + j] =
          bt[static_cast<std::int64_t>(j) * k + p];
}

}  // namespace

void matmul(const double* a, const double* b, double* c, int m, int k, int n,
            bool accumulate) {
  if (m <= 0 || n <= 0) return;
  const std::int64_t work = 2ll * m * k * n;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<std::int64_t>(i) * n;
    if (!accumulate) std::memset(ci, 0, sizeof(double) * n);
    matmul_row(a + static_cast<std::int64_t>(i) * k, b, ci, k, n);
  }
}

void matmul_nt(const double* a, const double* bt, double* c, int m, int k,
               int n, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  // One transpose pays for itself against m dot-product sweeps.
  std::vector<double> b(static_cast<size_t>(k) * n);
  transpose(bt, b.data(), n, k);
  matmul(a, b.data(), c, m, k, n, accumulate);
}

void matmul_tn(const double* at, const double* b, double* c, int m, int k,
               int n, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  const std::int64_t work = 2ll * m * k * n;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int i = 0; i < m; ++i) {
    double* __restrict ci = c + static_cast<std::int64_t>(i) * n;
    if (!accumulate) std::memset(ci, 0, sizeof(double) * n);
    for (int p = 0; p < k; ++p) {
      const double ap = at[static_cast<std::int64_t>(p) * m + i];
      const double* __restrict bp = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += ap * bp[j];
    }
  }
}

void bmm(const double* a, const double* b, double* c, int batch, int m, int k,
         int n, bool accumulate) {
  if (batch <= 0 || m <= 0 || n <= 0) return;
  const std::int64_t work = 2ll * batch * m * k * n;
  const std::int64_t sa = static_cast<std::int64_t>(m) * k;
  const std::int64_t sb = static_cast<std::int64_t>(k) * n;
  const std::int64_t sc = static_cast<std::int64_t>(m) * n;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int g = 0; g < batch; ++g) {
    const double* ag = a + g * sa;
    const double* bg = b + g * sb;
    double* cg = c + g * sc;
    for (int i = 0; i < m; ++i) {
      double* ci = cg + static_cast<std::int64_t>(i) * n;
      if (!accumulate) std::memset(ci, 0, sizeof(double) * n);
      matmul_row(ag + static_cast<std::int64_t>(i) * k, bg, ci, k, n);
    }
  }
}

void bmm_nt(const double* a, const double* bt, double* c, int batch, int m,
            int k, int n, bool accumulate) {
  if (batch <= 0 || m <= 0 || n <= 0) return;
  const std::int64_t work = 2ll * batch * m * k * n;
  const std::int64_t sa = static_cast<std::int64_t>(m) * k;
  const std::int64_t sb = static_cast<std::int64_t>(n) * k;
  const std::int64_t sc = static_cast<std::int64_t>(m) * n;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int g = 0; g < batch; ++g) {
    const double* ag = a + g * sa;
    double* cg = c + g * sc;
    std::vector<double> b(static_cast<size_t>(k) * n);
    transpose(bt + g * sb, b.data(), n, k);
    for (int i = 0; i < m; ++i) {
      double* ci = cg + static_cast<std::int64_t>(i) * n;
      if (!accumulate) std::memset(ci, 0, sizeof(double) * n);
      matmul_row(ag + static_cast<std::int64_t>(i) * k, b.data(), ci, k, n);
    }
  }
}

void bmm_tn(const double* at, const double* b, double* c, int batch, int m,
            int k, int n, bool accumulate) {
  if (batch <= 0 || m <= 0 || n <= 0) return;
  const std::int64_t work = 2ll * batch * m * k * n;
  const std::int64_t sa = static_cast<std::int64_t>(k) * m;
  const std::int64_t sb = static_cast<std::int64_t>(k) * n;
  const std::int64_t sc = static_cast<std::int64_t>(m) * n;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int g = 0; g < batch; ++g) {
    const double* atg = at + g * sa;
    const double* bg = b + g * sb;
    double* cg = c + g * sc;
    for (int i = 0; i < m; ++i) {
      double* __restrict ci = cg + static_cast<std::int64_t>(i) * n;
      if (!accumulate) std::memset(ci, 0, sizeof(double) * n);
      for (int p = 0; p < k; ++p) {
        const double ap = atg[static_cast<std::int64_t>(p) * m + i];
        const double* __restrict bp = bg + static_cast<std::int64_t>(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += ap * bp[j];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise

void add_bias_rows(double* x, const double* bias, int rows, int cols) {
  const std::int64_t work = static_cast<std::int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int i = 0; i < rows; ++i) {
    double* xi = x + static_cast<std::int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) xi[j] += bias[j];
  }
}

void col_sum_accum(const double* x, double* out, int rows, int cols) {
  // Each column is reduced in full row order by one thread, so the result
  // does not depend on the thread count.
  const std::int64_t work = static_cast<std::int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int j = 0; j < cols; ++j) {
    double s = 0.0;
    for (int i = 0; i < rows; ++i) s += x[static_cast<std::int64_t>(i) * cols + j];
    out[j] += s;
  }
}

void relu(const double* x, double* y, std::int64_t n) {
#pragma omp parallel for schedule(static) num_threads(threads_for(n)) \
    if (n >= kGrain)
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(const double* x, const double* gy, double* gx,
                   std::int64_t n) {
#pragma omp parallel for schedule(static) num_threads(threads_for(n)) \
    if (n >= kGrain)
  for (std::int64_t i = 0; i < n; ++i)
    if (x[i] > 0.0) gx[i] += gy[i];
}

namespace {
// tanh form of gelu; c0 = sqrt(2/pi).
constexpr double kGeluC0 = 0.7978845608028653558798921198687;
constexpr double kGeluC1 = 0.044715;

inline double gelu_one(double x) {
  double u = kGeluC0 * (x + kGeluC1 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_one(double x) {
  double u = kGeluC0 * (x + kGeluC1 * x * x * x);
  double t = std::tanh(u);
  double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}
}  // namespace

void gelu(const double* x, double* y, std::int64_t n) {
#pragma omp parallel for schedule(static) num_threads(threads_for(n * 8)) \
    if (n * 8 >= kGrain)
  for (std::int64_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_backward(const double* x, const double* gy, double* gx,
                   std::int64_t n) {
#pragma omp parallel for schedule(static) num_threads(threads_for(n * 8)) \
    if (n * 8 >= kGrain)
  for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i] * gelu_grad_one(x[i]);
}

// ---------------------------------------------------------------------------
// softmax / layernorm

void softmax_rows(const double* x, double* y, int rows, int cols,
                  const int* valid) {
  const std::int64_t work = static_cast<std::int64_t>(rows) * cols * 4;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int i = 0; i < rows; ++i) {
    const double* xi = x + static_cast<std::int64_t>(i) * cols;
    double* yi = y + static_cast<std::int64_t>(i) * cols;
    int v = valid ? valid[i] : cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < v; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      z += yi[j];
    }
    double inv = 1.0 / z;
    for (int j = 0; j < v; ++j) yi[j] *= inv;
    for (int j = v; j < cols; ++j) yi[j] = 0.0;
  }
}

void softmax_rows_backward(const double* y, const double* gy, double* gx,
                           int rows, int cols, const int* valid) {
  const std::int64_t work = static_cast<std::int64_t>(rows) * cols * 4;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int i = 0; i < rows; ++i) {
    const double* yi = y + static_cast<std::int64_t>(i) * cols;
    const double* gyi = gy + static_cast<std::int64_t>(i) * cols;
    double* gxi = gx + static_cast<std::int64_t>(i) * cols;
    int v = valid ? valid[i] : cols;
    double s = 0.0;
    for (int j = 0; j < v; ++j) s += yi[j] * gyi[j];
    for (int j = 0; j < v; ++j) gxi[j] += yi[j] * (gyi[j] - s);
  }
}

void layernorm_rows(const double* x, const double* gamma, const double* beta,
                    double* y, double* mean, double* rstd, int rows, int cols,
                    double eps) {
  const std::int64_t work = static_cast<std::int64_t>(rows) * cols * 4;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int i = 0; i < rows; ++i) {
    const double* xi = x + static_cast<std::int64_t>(i) * cols;
    double* yi = y + static_cast<std::int64_t>(i) * cols;
    double mu = 0.0;
    for (int j = 0; j < cols; ++j) mu += xi[j];
    mu /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      double d = xi[j] - mu;
      var += d * d;
    }
    var /= cols;
    double rs = 1.0 / std::sqrt(var + eps);
    mean[i] = mu;
    rstd[i] = rs;
    for (int j = 0; j < cols; ++j)
      yi[j] = (xi[j] - mu) * rs * gamma[j] + beta[j];
  }
}

void layernorm_rows_backward(const double* x, const double* gamma,
                             const double* mean, const double* rstd,
                             const double* gy, double* gx, double* ggamma,
                             double* gbeta, int rows, int cols) {
  // gx rows are disjoint per thread; ggamma/gbeta are reduced serially to
  // keep a fixed summation order.
  const std::int64_t work = static_cast<std::int64_t>(rows) * cols * 4;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int i = 0; i < rows; ++i) {
    const double* xi = x + static_cast<std::int64_t>(i) * cols;
    const double* gyi = gy + static_cast<std::int64_t>(i) * cols;
    double* gxi = gx + static_cast<std::int64_t>(i) * cols;
    double mu = mean[i], rs = rstd[i];
    double s1 = 0.0, s2 = 0.0;
    for (int j = 0; j < cols; ++j) {
      double xh = (xi[j] - mu) * rs;
      double g = gyi[j] * gamma[j];
      s1 += g;
      s2 += g * xh;
    }
    s1 /= cols;
    s2 /= cols;
    for (int j = 0; j < cols; ++j) {
      double xh = (xi[j] - mu) * rs;
      double g = gyi[j] * gamma[j];
      gxi[j] += rs * (g - s1 - xh * s2);
    }
  }
  for (int i = 0; i < rows; ++i) {
    const double* xi = x + static_cast<std::int64_t>(i) * cols;
    const double* gyi = gy + static_cast<std::int64_t>(i) * cols;
    double mu = mean[i], rs = rstd[i];
    for (int j = 0; j < cols; ++j) {
      ggamma[j] += gyi[j] * (xi[j] - mu) * rs;
      gbeta[j] += gyi[j];
    }
  }
}

// ---------------------------------------------------------------------------
// nearest neighbour

void nearest_rows(const double* queries, const double* table, int* out,
                  int rows, int tab_rows, int dim) {
  const std::int64_t work = 2ll * rows * tab_rows * dim;
#pragma omp parallel for schedule(static) num_threads(threads_for(work)) \
    if (work >= kGrain)
  for (int i = 0; i < rows; ++i) {
    const double* q = queries + static_cast<std::int64_t>(i) * dim;
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int t = 0; t < tab_rows; ++t) {
      const double* e = table + static_cast<std::int64_t>(t) * dim;
      double d = 0.0;
      for (int j = 0; j < dim; ++j) {
        double diff = q[j] - e[j];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = t;
      }
    }
    out[i] = arg;
  }
}

// ---------------------------------------------------------------------------
// serial references

namespace serial {

void matmul(const double* a, const double* b, double* c, int m, int k, int n,
            bool accumulate) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p)
        s += a[static_cast<std::int64_t>(i) * k + p] *
             b[static_cast<std::int64_t>(p) * n + j];
      std::int64_t idx = static_cast<std::int64_t>(i) * n + j;
      c[idx] = accumulate ? c[idx] + s : s;
    }
}

void matmul_nt(const double* a, const double* bt, double* c, int m, int k,
               int n, bool accumulate) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p)
        s += a[static_cast<std::int64_t>(i) * k + p] *
             bt[static_cast<std::int64_t>(j) * k + p];
      std::int64_t idx = static_cast<std::int64_t>(i) * n + j;
      c[idx] = accumulate ? c[idx] + s : s;
    }
}

void matmul_tn(const double* at, const double* b, double* c, int m, int k,
               int n, bool accumulate) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p)
        s += at[static_cast<std::int64_t>(p) * m + i] *
             b[static_cast<std::int64_t>(p) * n + j];
      std::int64_t idx = static_cast<std::int64_t>(i) * n + j;
      c[idx] = accumulate ? c[idx] + s : s;
    }
}

void bmm(const double* a, const double* b, double* c, int batch, int m, int k,
         int n, bool accumulate) {
  for (int g = 0; g < batch; ++g)
    matmul(a + static_cast<std::int64_t>(g) * m * k,
           b + static_cast<std::int64_t>(g) * k * n,
           c + static_cast<std::int64_t>(g) * m * n, m, k, n, accumulate);
}

void bmm_nt(const double* a, const double* bt, double* c, int batch, int m,
            int k, int n, bool accumulate) {
  for (int g = 0; g < batch; ++g)
    matmul_nt(a + static_cast<std::int64_t>(g) * m * k,
              bt + static_cast<std::int64_t>(g) * n * k,
              c + static_cast<std::int64_t>(g) * m * n, m, k, n, accumulate);
}

void bmm_tn(const double* at, const double* b, double* c, int batch, int m,
            int k, int n, bool accumulate) {
  for (int g = 0; g < batch; ++g)
    matmul_tn(at + static_cast<std::int64_t>(g) * k * m,
              b + static_cast<std::int64_t>(g) * k * n,
              c + static_cast<std::int64_t>(g) * m * n, m, k, n, accumulate);
}

void softmax_rows(const double* x, double* y, int rows, int cols,
                  const int* valid) {
  for (int i = 0; i < rows; ++i) {
    const double* xi = x + static_cast<std::int64_t>(i) * cols;
    double* yi = y + static_cast<std::int64_t>(i) * cols;
    int v = valid ? valid[i] : cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < v; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(xi[j] - mx);
    for (int j = 0; j < v; ++j) yi[j] = std::exp(xi[j] - mx) / z;
    for (int j = v; j < cols; ++j) yi[j] = 0.0;
  }
}

void layernorm_rows(const double* x, const double* gamma, const double* beta,
                    double* y, double* mean, double* rstd, int rows, int cols,
                    double eps) {
  for (int i = 0; i < rows; ++i) {
    const double* xi = x + static_cast<std::int64_t>(i) * cols;
    double* yi = y + static_cast<std::int64_t>(i) * cols;
    double mu = 0.0;
    for (int j = 0; j < cols; ++j) mu += xi[j];
    mu /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= cols;
    double rs = 1.0 / std::sqrt(var + eps);
    mean[i] = mu;
    rstd[i] = rs;
    for (int j = 0; j < cols; ++j)
      yi[j] = (xi[j] - mu) * rs * gamma[j] + beta[j];
  }
}

void gelu(const double* x, double* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void nearest_rows(const double* queries, const double* table, int* out,
                  int rows, int tab_rows, int dim) {
  for (int i = 0; i < rows; ++i) {
    const double* q = queries + static_cast<std::int64_t>(i) * dim;
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int t = 0; t < tab_rows; ++t) {
      const double* e = table + static_cast<std::int64_t>(t) * dim;
      double d = 0.0;
      for (int j = 0; j < dim; ++j) {
        double diff = q[j] - e[j];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = t;
      }
    }
    out[i] = arg;
  }
}

}  // namespace serial

}  // namespace rarsq::kern
