#include "rarsq/quantizer.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "rarsq/kernels.hpp"

namespace rarsq::quant {

void Codebook::init(int k_codes, int dim) {
  if (k_codes < 1) throw std::invalid_argument("Codebook: K must be >= 1");
  if (dim < 1) throw std::invalid_argument("Codebook: dim must be >= 1");
  K = k_codes;
  m = dim;
  vec.shape = {K, m};
  vec.v.assign(static_cast<std::size_t>(K) * m, 0.0);
  vec.g.clear();
  ema_count.assign(K, 0.0);
  ema_sum.assign(static_cast<std::size_t>(K) * m, 0.0);
  usage.assign(K, 0);
}

CodebookStack CodebookStack::make(int depth, int k_codes, int dim,
                                  GradMode mode) {
  if (depth < 1) throw std::invalid_argument("CodebookStack: D must be >= 1");
  CodebookStack s;
  s.D = depth;
  s.K = k_codes;
  s.m = dim;
  s.mode = mode;
  s.books.resize(depth);
  for (auto& b : s.books) b.init(k_codes, dim);
  return s;
}

void CodebookStack::reset_usage() {
  for (auto& b : books) b.usage.assign(b.K, 0);
}

int nearest_code(const double* r, const Codebook& cb) {
  if (cb.K <= 0) throw std::invalid_argument("nearest_code: empty codebook");
  int best = 0;
  double best_d = 0.0;
  for (int k = 0; k < cb.K; ++k) {
    const double* e = cb.row(k);
    double d = 0.0;
    for (int j = 0; j < cb.m; ++j) {
      double t = r[j] - e[j];
      d += t * t;
    }
    if (k == 0 || d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

namespace {

// Carried vectors for one depth: the frozen-map forward at the freeze point.
rot::BatchRotation freeze_depth(const double* resid, const double* codes,
                                int n, int m, GradMode mode) {
  return mode == GradMode::rotation
             ? rot::BatchRotation::freeze(resid, codes, n, m)
             : rot::BatchRotation::freeze_passthrough(resid, codes, n, m);
}

void check_finite(const std::vector<double>& x, const char* what) {
  for (double v : x)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("quantize: non-finite ") + what);
}

}  // namespace

BatchPath quantize_batch(const double* z, int n, CodebookStack& stack,
                         bool record_usage) {
  const int m = stack.m;
  const int D = stack.D;
  BatchPath out;
  out.n = n;
  out.m = m;
  out.D = D;
  out.resid.resize(D + 1);
  out.resid[0].assign(z, z + static_cast<std::size_t>(n) * m);
  check_finite(out.resid[0], "input");
  out.zhat.assign(static_cast<std::size_t>(n) * m, 0.0);
  out.codes.resize(D);
  for (int d = 0; d < D; ++d) {
    Codebook& cb = stack.books[d];
    const std::vector<double>& r = out.resid[d];
    std::vector<int>& idx = out.codes[d];
    idx.resize(n);
    kern::nearest_rows(r.data(), cb.vec.v.data(), idx.data(), n, cb.K, m);
    if (record_usage)
      for (int i = 0; i < n; ++i) ++cb.usage[idx[i]];
    std::vector<double> ev(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < n; ++i)
      std::memcpy(ev.data() + static_cast<std::size_t>(i) * m, cb.row(idx[i]),
                  sizeof(double) * m);
    rot::BatchRotation map = freeze_depth(r.data(), ev.data(), n, m,
                                          stack.mode);
    // At the freeze point the forward value is y0.
    std::vector<double>& next = out.resid[d + 1];
    next.resize(static_cast<std::size_t>(n) * m);
    for (std::size_t i = 0; i < next.size(); ++i) {
      out.zhat[i] += map.y0[i];
      next[i] = r[i] - map.y0[i];
    }
    check_finite(next, "residual");
    out.carried.push_back(std::move(map.y0));
  }
  return out;
}

SkillPath quantize(const double* z, CodebookStack& stack, bool record_usage) {
  BatchPath b = quantize_batch(z, 1, stack, record_usage);
  SkillPath p;
  p.codes.resize(stack.D);
  p.carried.resize(static_cast<std::size_t>(stack.D) * stack.m);
  p.resid.resize(static_cast<std::size_t>(stack.D + 1) * stack.m);
  for (int d = 0; d < stack.D; ++d) {
    p.codes[d] = b.codes[d][0];
    std::memcpy(p.carried.data() + static_cast<std::size_t>(d) * stack.m,
                b.carried[d].data(), sizeof(double) * stack.m);
  }
  for (int d = 0; d <= stack.D; ++d)
    std::memcpy(p.resid.data() + static_cast<std::size_t>(d) * stack.m,
                b.resid[d].data(), sizeof(double) * stack.m);
  p.zhat = b.zhat;
  return p;
}

void ema_update(CodebookStack& stack, const BatchPath& batch, double decay) {
  if (!(decay > 0.0 && decay < 1.0))
    throw std::invalid_argument("ema_update: decay must be in (0,1)");
  const int m = stack.m;
  for (int d = 0; d < stack.D; ++d) {
    Codebook& cb = stack.books[d];
    std::vector<double> cnt(cb.K, 0.0);
    std::vector<double> acc(static_cast<std::size_t>(cb.K) * m, 0.0);
    const std::vector<double>& r = batch.resid[d];
    for (int i = 0; i < batch.n; ++i) {
      int k = batch.codes[d][i];
      cnt[k] += 1.0;
      double* a = acc.data() + static_cast<std::size_t>(k) * m;
      const double* ri = r.data() + static_cast<std::size_t>(i) * m;
      for (int j = 0; j < m; ++j) a[j] += ri[j];
    }
    for (int k = 0; k < cb.K; ++k) {
      cb.ema_count[k] = decay * cb.ema_count[k] + (1.0 - decay) * cnt[k];
      double* s = cb.ema_sum.data() + static_cast<std::size_t>(k) * m;
      const double* a = acc.data() + static_cast<std::size_t>(k) * m;
      double* v = cb.vec.v.data() + static_cast<std::size_t>(k) * m;
      double denom = cb.ema_count[k] + 1e-5;
      for (int j = 0; j < m; ++j) {
        s[j] = decay * s[j] + (1.0 - decay) * a[j];
        v[j] = s[j] / denom;
      }
    }
  }
}

std::vector<DepthUsage> usage_metrics(const CodebookStack& stack) {
  std::vector<DepthUsage> out(stack.D);
  for (int d = 0; d < stack.D; ++d) {
    const Codebook& cb = stack.books[d];
    std::int64_t total = 0;
    for (auto c : cb.usage) total += c;
    if (total <= 0)
      throw std::runtime_error("usage_metrics: no recorded usage at depth " +
                               std::to_string(d + 1));
    DepthUsage& u = out[d];
    u.freq.resize(cb.K);
    for (int k = 0; k < cb.K; ++k) {
      u.freq[k] = static_cast<double>(cb.usage[k]) / static_cast<double>(total);
      if (cb.usage[k] > 0) {
        ++u.active;
        u.entropy -= u.freq[k] * std::log(u.freq[k]);
      }
    }
    u.perplexity = std::exp(u.entropy);
  }
  return out;
}

void init_kmeanspp(CodebookStack& stack, const double* data, int rows,
                   Rng& rng, int lloyd_iters) {
  if (rows < 1) throw std::invalid_argument("init_kmeanspp: empty batch");
  const int m = stack.m;
  std::vector<double> res(data, data + static_cast<std::size_t>(rows) * m);
  std::vector<double> d2(rows);
  for (int d = 0; d < stack.D; ++d) {
    Codebook& cb = stack.books[d];
    auto sqdist = [&](int i, const double* c) {
      const double* x = res.data() + static_cast<std::size_t>(i) * m;
      double s = 0.0;
      for (int j = 0; j < m; ++j) {
        double t = x[j] - c[j];
        s += t * t;
      }
      return s;
    };
    int first = rng.uniform_int(rows);
    std::memcpy(cb.vec.v.data(), res.data() + static_cast<std::size_t>(first) * m,
                sizeof(double) * m);
    for (int i = 0; i < rows; ++i) d2[i] = sqdist(i, cb.row(0));
    for (int k = 1; k < cb.K; ++k) {
      double total = 0.0;
      for (int i = 0; i < rows; ++i) total += d2[i];
      int pick;
      if (total > 0.0) {
        double target = rng.uniform() * total;
        double run = 0.0;
        pick = rows - 1;
        for (int i = 0; i < rows; ++i) {
          run += d2[i];
          if (run >= target) {
            pick = i;
            break;
          }
        }
      } else {
        // Fewer distinct rows than codes: duplicate an arbitrary row.
        pick = rng.uniform_int(rows);
      }
      std::memcpy(cb.vec.v.data() + static_cast<std::size_t>(k) * m,
                  res.data() + static_cast<std::size_t>(pick) * m,
                  sizeof(double) * m);
      for (int i = 0; i < rows; ++i)
        d2[i] = std::min(d2[i], sqdist(i, cb.row(k)));
    }
    // Lloyd rounds; codes with no assignments stay where they are.
    std::vector<int> idx(rows);
    for (int it = 0; it < lloyd_iters; ++it) {
      kern::nearest_rows(res.data(), cb.vec.v.data(), idx.data(), rows, cb.K,
                         m);
      std::vector<double> mean(static_cast<std::size_t>(cb.K) * m, 0.0);
      std::vector<int> cnt(cb.K, 0);
      for (int i = 0; i < rows; ++i) {
        double* a = mean.data() + static_cast<std::size_t>(idx[i]) * m;
        const double* x = res.data() + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) a[j] += x[j];
        ++cnt[idx[i]];
      }
      for (int k = 0; k < cb.K; ++k)
        if (cnt[k] > 0)
          for (int j = 0; j < m; ++j)
            cb.vec.v[static_cast<std::size_t>(k) * m + j] =
                mean[static_cast<std::size_t>(k) * m + j] / cnt[k];
    }
    for (int k = 0; k < cb.K; ++k) {
      cb.ema_count[k] = 1.0;
      std::memcpy(cb.ema_sum.data() + static_cast<std::size_t>(k) * m,
                  cb.row(k), sizeof(double) * m);
    }
    // Seed the next depth from what this depth leaves behind.
    kern::nearest_rows(res.data(), cb.vec.v.data(), idx.data(), rows, cb.K, m);
    for (int i = 0; i < rows; ++i) {
      double* x = res.data() + static_cast<std::size_t>(i) * m;
      const double* e = cb.row(idx[i]);
      for (int j = 0; j < m; ++j) x[j] -= e[j];
    }
  }
}

GraphQuant quantize_into_graph(ad::Graph& g, ad::NodeId z_node,
                               CodebookStack& stack, double beta,
                               bool train_codebooks, bool record_usage) {
  const auto& zshape = g.shape(z_node);
  if (zshape.size() != 2 || zshape[1] != stack.m)
    throw std::invalid_argument("quantize_into_graph: z must be [n, m]");
  const int n = static_cast<int>(zshape[0]);
  const int m = stack.m;
  GraphQuant out;
  ad::NodeId r_prev = z_node;
  for (int d = 0; d < stack.D; ++d) {
    Codebook& cb = stack.books[d];
    // Copy: node pushes below may reallocate the graph's value storage.
    const std::vector<double> rv = g.val(r_prev);
    std::vector<int> idx(n);
    kern::nearest_rows(rv.data(), cb.vec.v.data(), idx.data(), n, cb.K, m);
    if (record_usage)
      for (int i = 0; i < n; ++i) ++cb.usage[idx[i]];
    std::vector<double> ev(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < n; ++i)
      std::memcpy(ev.data() + static_cast<std::size_t>(i) * m, cb.row(idx[i]),
                  sizeof(double) * m);
    ad::NodeId gathered = -1;
    if (train_codebooks)
      gathered = g.gather_rows(g.leaf(cb.vec), idx);
    auto map = std::make_shared<rot::BatchRotation>(
        freeze_depth(rv.data(), ev.data(), n, m, stack.mode));
    ad::NodeId qt = g.frozen_affine(r_prev, map);
    // Commitment: rotation mode pulls residuals toward the carried vectors
    // (gradient arrives through the frozen transpose); ste mode pulls them
    // toward the raw codes directly.
    ad::NodeId diff;
    if (stack.mode == GradMode::rotation) {
      diff = g.sub(g.detach(r_prev), qt);
    } else {
      ad::NodeId target = train_codebooks ? g.detach(gathered)
                                          : g.input({n, m}, ev);
      diff = g.sub(r_prev, target);
    }
    ad::NodeId term = g.sum_sq(diff, beta / n);
    out.commit = out.commit < 0 ? term : g.add(out.commit, term);
    if (train_codebooks) {
      ad::NodeId pull =
          g.sum_sq(g.sub(g.detach(r_prev), gathered), 1.0 / n);
      out.codebook_pull =
          out.codebook_pull < 0 ? pull : g.add(out.codebook_pull, pull);
    }
    out.codes.push_back(std::move(idx));
    out.zhat = out.zhat < 0 ? qt : g.add(out.zhat, qt);
    if (d + 1 < stack.D) {
      // The next residual enters as a fresh input: each depth's output
      // back-propagates to its own residual through the frozen map alone,
      // so the encoder sees only the depth-1 map and never the unstable
      // (I - scale*R) chain of an in-graph subtraction.
      const std::vector<double> qv = g.val(qt);
      std::vector<double> rnext(static_cast<std::size_t>(n) * m);
      for (std::size_t i = 0; i < rnext.size(); ++i) rnext[i] = rv[i] - qv[i];
      r_prev = g.input({n, m}, rnext.data());
    }
  }
  return out;
}

}  // namespace rarsq::quant
