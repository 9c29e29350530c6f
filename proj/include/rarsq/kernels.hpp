#pragma once
// Dense double-precision kernels, row-major. The optimized versions split
// work into disjoint output ranges, so results are independent of the
// thread count; `serial` holds the naive loops kept as the testing oracle.

#include <cstdint>

namespace rarsq::kern {

// Effective thread count: OpenMP's max, capped by the RARSQ_THREADS
// environment variable and by set_thread_cap (0 means uncapped).
int max_threads();
void set_thread_cap(int n);

// c[m,n] = a[m,k] * b[k,n]           (+= when accumulate)
void matmul(const double* a, const double* b, double* c, int m, int k, int n,
            bool accumulate = false);
// c[m,n] = a[m,k] * bt[n,k]^T
void matmul_nt(const double* a, const double* bt, double* c, int m, int k,
               int n, bool accumulate = false);
// c[m,n] = at[k,m]^T * b[k,n]
void matmul_tn(const double* at, const double* b, double* c, int m, int k,
               int n, bool accumulate = false);

// Batched: a[batch,m,k] * b[batch,k,n] -> c[batch,m,n]
void bmm(const double* a, const double* b, double* c, int batch, int m, int k,
         int n, bool accumulate = false);
// Batched: a[batch,m,k] * bt[batch,n,k]^T -> c[batch,m,n]
void bmm_nt(const double* a, const double* bt, double* c, int batch, int m,
            int k, int n, bool accumulate = false);
// Batched: at[batch,k,m]^T * b[batch,k,n] -> c[batch,m,n]
void bmm_tn(const double* at, const double* b, double* c, int batch, int m,
            int k, int n, bool accumulate = false);

void add_bias_rows(double* x, const double* bias, int rows, int cols);
void col_sum_accum(const double* x, double* out, int rows, int cols);

void relu(const double* x, double* y, std::int64_t n);
void relu_backward(const double* x, const double* gy, double* gx,
                   std::int64_t n);  // gx +=
void gelu(const double* x, double* y, std::int64_t n);
void gelu_backward(const double* x, const double* gy, double* gx,
                   std::int64_t n);  // gx +=

// Row-wise softmax. When valid is given, row r uses only its first valid[r]
// entries; the rest get probability zero (causal masking).
void softmax_rows(const double* x, double* y, int rows, int cols,
                  const int* valid = nullptr);
void softmax_rows_backward(const double* y, const double* gy, double* gx,
                           int rows, int cols,
                           const int* valid = nullptr);  // gx +=

void layernorm_rows(const double* x, const double* gamma, const double* beta,
                    double* y, double* mean, double* rstd, int rows, int cols,
                    double eps);
void layernorm_rows_backward(const double* x, const double* gamma,
                             const double* mean, const double* rstd,
                             const double* gy, double* gx, double* ggamma,
                             double* gbeta, int rows, int cols);  // all +=

// For each query row, the index of the nearest table row under squared
// euclidean distance; exact ties resolve to the lowest index.
void nearest_rows(const double* queries, const double* table, int* out,
                  int rows, int tab_rows, int dim);

namespace serial {

void matmul(const double* a, const double* b, double* c, int m, int k, int n,
            bool accumulate = false);
void matmul_nt(const double* a, const double* bt, double* c, int m, int k,
               int n, bool accumulate = false);
void matmul_tn(const double* at, const double* b, double* c, int m, int k,
               int n, bool accumulate = false);
void bmm(const double* a, const double* b, double* c, int batch, int m, int k,
         int n, bool accumulate = false);
void bmm_nt(const double* a, const double* bt, double* c, int batch, int m,
            int k, int n, bool accumulate = false);
void bmm_tn(const double* at, const double* b, double* c, int batch, int m,
            int k, int n, bool accumulate = false);
void softmax_rows(const double* x, double* y, int rows, int cols,
                  const int* valid = nullptr);
void layernorm_rows(const double* x, const double* gamma, const double* beta,
                    double* y, double* mean, double* rstd, int rows, int cols,
                    double eps);
void gelu(const double* x, double* y, std::int64_t n);
void nearest_rows(const double* queries, const double* table, int* out,
                  int rows, int tab_rows, int dim);

}  // namespace serial

}  // namespace rarsq::kern
