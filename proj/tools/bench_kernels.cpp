// Times the optimized kernels against their serial references.
// Usage: bench_kernels [reps]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <vector>

#include "rarsq/kernels.hpp"
#include "rarsq/rng.hpp"

using namespace rarsq;
using clk = std::chrono::steady_clock;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm
  auto t0 = clk::now();
  for (int i = 0; i < reps; ++i) fn();
  auto t1 = clk::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double flops, double opt_ms, double ser_ms) {
  std::printf("%-22s opt %8.3f ms  serial %8.3f ms  speedup %5.2fx  %7.2f GFLOP/s\n",
              name, opt_ms, ser_ms, ser_ms / opt_ms,
              flops / (opt_ms * 1e6));
}

}  // namespace

int main(int argc, char** argv) {
  int reps = argc > 1 ? std::atoi(argv[1]) : 20;
  std::printf("threads: %d\n", kern::max_threads());
  Rng rng(0);

  {
    int m = 512, k = 512, n = 512;
    std::vector<double> a(static_cast<size_t>(m) * k), b(static_cast<size_t>(k) * n),
        c(static_cast<size_t>(m) * n);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    double fl = 2.0 * m * k * n;
    double o = time_ms([&] { kern::matmul(a.data(), b.data(), c.data(), m, k, n); }, reps);
    double s = time_ms([&] { kern::serial::matmul(a.data(), b.data(), c.data(), m, k, n); }, reps);
    report("matmul 512^3", fl, o, s);
    o = time_ms([&] { kern::matmul_nt(a.data(), b.data(), c.data(), m, k, n); }, reps);
    s = time_ms([&] { kern::serial::matmul_nt(a.data(), b.data(), c.data(), m, k, n); }, reps);
    report("matmul_nt 512^3", fl, o, s);
    o = time_ms([&] { kern::matmul_tn(a.data(), b.data(), c.data(), m, k, n); }, reps);
    s = time_ms([&] { kern::serial::matmul_tn(a.data(), b.data(), c.data(), m, k, n); }, reps);
    report("matmul_tn 512^3", fl, o, s);
  }
  {
    int g = 256, m = 11, k = 32, n = 11;
    std::vector<double> a(static_cast<size_t>(g) * m * k), b(static_cast<size_t>(g) * n * k),
        c(static_cast<size_t>(g) * m * n);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    double fl = 2.0 * g * m * k * n;
    double o = time_ms([&] { kern::bmm_nt(a.data(), b.data(), c.data(), g, m, k, n); }, reps);
    double s = time_ms([&] { kern::serial::bmm_nt(a.data(), b.data(), c.data(), g, m, k, n); }, reps);
    report("bmm_nt attention", fl, o, s);
  }
  {
    int r = 4096, c = 128;
    std::vector<double> x(static_cast<size_t>(r) * c), y(x.size());
    for (auto& v : x) v = rng.normal();
    double fl = 4.0 * r * c;
    double o = time_ms([&] { kern::softmax_rows(x.data(), y.data(), r, c); }, reps);
    double s = time_ms([&] { kern::serial::softmax_rows(x.data(), y.data(), r, c); }, reps);
    report("softmax 4096x128", fl, o, s);

    std::vector<double> gamma(c, 1.0), beta(c, 0.0), mu(r), rs(r);
    o = time_ms([&] {
      kern::layernorm_rows(x.data(), gamma.data(), beta.data(), y.data(), mu.data(), rs.data(), r, c, 1e-5);
    }, reps);
    s = time_ms([&] {
      kern::serial::layernorm_rows(x.data(), gamma.data(), beta.data(), y.data(), mu.data(), rs.data(), r, c, 1e-5);
    }, reps);
    report("layernorm 4096x128", fl, o, s);
  }
  {
    int rows = 4096, tab = 16, dim = 8;
    std::vector<double> q(static_cast<size_t>(rows) * dim), t(static_cast<size_t>(tab) * dim);
    std::vector<int> out(rows);
    for (auto& v : q) v = rng.normal();
    for (auto& v : t) v = rng.normal();
    double fl = 3.0 * rows * tab * dim;
    double o = time_ms([&] { kern::nearest_rows(q.data(), t.data(), out.data(), rows, tab, dim); }, reps);
    double s = time_ms([&] { kern::serial::nearest_rows(q.data(), t.data(), out.data(), rows, tab, dim); }, reps);
    report("nearest 4096x16x8", fl, o, s);
  }
  return 0;
}
