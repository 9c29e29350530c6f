#include "rarsq/cst.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

#include "rarsq/checkpoint.hpp"
#include "rarsq/optim.hpp"

namespace rarsq::cst {

namespace {
constexpr double kDivergenceAbort = 1e3;
constexpr double kMaxGradNorm = 1.0;

Tensor mlp_weight(std::int64_t in, std::int64_t out, Rng& rng) {
  return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

CstParams::Head make_head(std::int64_t in, std::int64_t hidden,
                          std::int64_t out, Rng& rng) {
  CstParams::Head h;
  h.w1 = mlp_weight(in, hidden, rng);
  h.b1 = Tensor({hidden});
  h.w2 = Tensor({hidden, out});  // zero: untrained heads are exactly uniform
  h.b2 = Tensor({out});
  return h;
}

ad::NodeId head_logits(ad::Graph& g, ad::NodeId in, CstParams::Head& hd) {
  auto h1 = g.relu(g.add_bias(g.matmul(in, g.leaf(hd.w1)), g.leaf(hd.b1)));
  return g.add_bias(g.matmul(h1, g.leaf(hd.w2)), g.leaf(hd.b2));
}

void head_named(std::map<std::string, const Tensor*>& out,
                const std::string& pre, const CstParams::Head& h) {
  out[pre + "w1"] = &h.w1;
  out[pre + "b1"] = &h.b1;
  out[pre + "w2"] = &h.w2;
  out[pre + "b2"] = &h.b2;
}

// Head input for depth d (1-based): context columns followed by the d-1
// conditioning code embeddings (zeros under the no-AR ablation, keeping the
// parameter count identical).
ad::NodeId head_input(ad::Graph& g, ad::NodeId ctx, int n,
                      const std::vector<const std::vector<int>*>& prefix,
                      CstParams& p) {
  auto in = ctx;
  for (std::size_t j = 0; j < prefix.size(); ++j) {
    ad::NodeId emb;
    if (p.cfg.no_ar) {
      emb = g.input({n, p.cfg.code_emb},
                    std::vector<double>(
                        static_cast<std::size_t>(n) * p.cfg.code_emb, 0.0));
    } else {
      emb = g.gather_rows(g.leaf(p.code_emb[j]), *prefix[j]);
    }
    in = g.concat_cols(in, emb);
  }
  return in;
}

double log_softmax_at(const std::vector<double>& logits, int idx) {
  double mx = *std::max_element(logits.begin(), logits.end());
  double lse = 0.0;
  for (double l : logits) lse += std::exp(l - mx);
  return logits[idx] - mx - std::log(lse);
}
}  // namespace

CstParams CstParams::make(const CstConfig& cfg, Rng& rng) {
  CstParams p;
  p.cfg = cfg;
  p.obs_in_w = mlp_weight(cfg.obs_dim, cfg.g_dim, rng);
  p.obs_in_b = Tensor({cfg.g_dim});
  p.task_emb = Tensor::randn({cfg.n_tasks, cfg.g_dim}, rng, 0.02);
  p.pos_emb = Tensor::randn({cfg.h + 1, cfg.g_dim}, rng, 0.02);
  tfm::Config tc;
  tc.layers = cfg.layers;
  tc.d_model = cfg.g_dim;
  tc.heads = cfg.heads;
  tc.d_ff = cfg.d_ff;
  tc.causal = true;
  p.tf = tfm::Params::make(tc, rng);
  for (int d = 0; d + 1 < cfg.D; ++d)
    p.code_emb.push_back(Tensor::randn({cfg.K, cfg.code_emb}, rng, 0.02));
  for (int d = 0; d < cfg.D; ++d)
    p.heads.push_back(make_head(cfg.g_dim + d * cfg.code_emb, cfg.head_hidden,
                                cfg.K, rng));
  p.ref = make_head(cfg.g_dim, cfg.head_hidden,
                    static_cast<std::int64_t>(cfg.T) * cfg.A, rng);
  return p;
}

void CstParams::collect(std::vector<Tensor*>& out) {
  out.push_back(&obs_in_w);
  out.push_back(&obs_in_b);
  out.push_back(&task_emb);
  out.push_back(&pos_emb);
  tf.collect(out);
  for (auto& t : code_emb) out.push_back(&t);
  auto head = [&](Head& h) {
    out.push_back(&h.w1);
    out.push_back(&h.b1);
    out.push_back(&h.w2);
    out.push_back(&h.b2);
  };
  for (auto& h : heads) head(h);
  head(ref);
}

void CstParams::named(std::map<std::string, const Tensor*>& out) const {
  out["obs_in_w"] = &obs_in_w;
  out["obs_in_b"] = &obs_in_b;
  out["task_emb"] = &task_emb;
  out["pos_emb"] = &pos_emb;
  tf.named(out, "tf.");
  for (std::size_t j = 0; j < code_emb.size(); ++j)
    out["emb.d" + std::to_string(j + 1)] = &code_emb[j];
  for (std::size_t d = 0; d < heads.size(); ++d)
    head_named(out, "head.d" + std::to_string(d + 1) + ".", heads[d]);
  head_named(out, "ref.", ref);
}

void CstParams::load(const std::map<std::string, Tensor>& table) {
  std::map<std::string, const Tensor*> want;
  named(want);
  for (auto& [name, dst] : want) {
    auto it = table.find(name);
    if (it == table.end()) throw ckpt::FormatError("missing tensor " + name);
    Tensor* t = const_cast<Tensor*>(dst);
    if (it->second.shape != t->shape)
      throw ckpt::FormatError("shape mismatch for tensor " + name);
    t->v = it->second.v;
  }
}

void check_compat(const CstConfig& cfg, const quant::CodebookStack& stack) {
  if (cfg.K != stack.K || cfg.D != stack.D || cfg.m != stack.m)
    throw ckpt::CompatError(
        "policy built against codebooks (K=" + std::to_string(cfg.K) +
        ", D=" + std::to_string(cfg.D) + ", m=" + std::to_string(cfg.m) +
        "), stack has (K=" + std::to_string(stack.K) +
        ", D=" + std::to_string(stack.D) +
        ", m=" + std::to_string(stack.m) + ")");
}

// ---- context ------------------------------------------------------------------

ad::NodeId build_context(ad::Graph& g, ad::NodeId windows,
                         const std::vector<int>& task_ids, int n,
                         CstParams& p) {
  const CstConfig& c = p.cfg;
  const int seq = c.h + 1;
  auto obs = g.reshape(windows, {static_cast<std::int64_t>(n) * c.h, c.obs_dim});
  auto obs_tok =
      g.add_bias(g.matmul(obs, g.leaf(p.obs_in_w)), g.leaf(p.obs_in_b));
  auto task_tok = g.gather_rows(g.leaf(p.task_emb), task_ids);
  auto cat = g.concat_rows(task_tok, obs_tok);

  // Interleave into [task_i, obs_i0..obs_i(h-1)] per sample.
  std::vector<int> order(static_cast<std::size_t>(n) * seq);
  std::vector<int> pidx(order.size());
  for (int i = 0; i < n; ++i) {
    order[static_cast<std::size_t>(i) * seq] = i;
    pidx[static_cast<std::size_t>(i) * seq] = 0;
    for (int s = 0; s < c.h; ++s) {
      order[static_cast<std::size_t>(i) * seq + 1 + s] = n + i * c.h + s;
      pidx[static_cast<std::size_t>(i) * seq + 1 + s] = 1 + s;
    }
  }
  auto tok = g.gather_rows(cat, std::move(order));
  tok = g.add(tok, g.gather_rows(g.leaf(p.pos_emb), std::move(pidx)));
  auto enc = tfm::build(g, tok, n, seq, p.tf);

  std::vector<int> last(n);
  for (int i = 0; i < n; ++i) last[i] = i * seq + c.h;
  return g.gather_rows(enc, std::move(last));
}

std::vector<double> encode_context(const double* window, int task_id,
                                   CstParams& p) {
  if (task_id < 0 || task_id >= p.cfg.n_tasks)
    throw std::invalid_argument("encode_context: task id out of range");
  ad::Graph g;
  auto w = g.input({1, static_cast<std::int64_t>(p.cfg.h) * p.cfg.obs_dim},
                   window);
  auto ctx = build_context(g, w, {task_id}, 1, p);
  std::vector<double> out = g.val(ctx);
  for (double v : out)
    if (!std::isfinite(v))
      throw std::runtime_error("encode_context: non-finite context");
  return out;
}

// ---- heads --------------------------------------------------------------------

std::vector<double> predict_code_logits(const std::vector<double>& g_ctx,
                                        const std::vector<int>& prefix,
                                        int depth, CstParams& p) {
  const CstConfig& c = p.cfg;
  if (depth < 1 || depth > c.D)
    throw std::invalid_argument("predict_code_logits: depth out of range");
  if (static_cast<int>(prefix.size()) != depth - 1)
    throw std::invalid_argument(
        "predict_code_logits: head " + std::to_string(depth) + " needs " +
        std::to_string(depth - 1) + " previous codes, got " +
        std::to_string(prefix.size()));
  for (int k : prefix)
    if (k < 0 || k >= c.K)
      throw std::invalid_argument("predict_code_logits: code out of range");
  if (static_cast<int>(g_ctx.size()) != c.g_dim)
    throw std::invalid_argument("predict_code_logits: bad context size");

  ad::Graph g;
  auto ctx = g.input({1, c.g_dim}, g_ctx.data());
  std::vector<std::vector<int>> rows(prefix.size());
  std::vector<const std::vector<int>*> pref(prefix.size());
  for (std::size_t j = 0; j < prefix.size(); ++j) {
    rows[j] = {prefix[j]};
    pref[j] = &rows[j];
  }
  auto in = head_input(g, ctx, 1, pref, p);
  auto logits = head_logits(g, in, p.heads[depth - 1]);
  return g.val(logits);
}

// ---- nucleus sampling -----------------------------------------------------------

std::vector<int> nucleus_kept(const std::vector<double>& logits, double p,
                              double temperature) {
  if (p <= 0.0 || p > 1.0)
    throw std::invalid_argument("nucleus threshold must be in (0, 1]");
  if (temperature <= 0.0)
    throw std::invalid_argument("temperature must be positive");
  if (logits.empty()) throw std::invalid_argument("empty logits");
  for (double l : logits)
    if (!std::isfinite(l)) throw std::invalid_argument("non-finite logit");

  const int k = static_cast<int>(logits.size());
  std::vector<double> prob(k);
  double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    prob[i] = std::exp((logits[i] - mx) / temperature);
    sum += prob[i];
  }
  for (double& q : prob) q /= sum;

  std::vector<int> order(k);
  for (int i = 0; i < k; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (prob[a] != prob[b]) return prob[a] > prob[b];
    return a < b;
  });
  std::vector<int> kept;
  double cum = 0.0;
  for (int idx : order) {
    kept.push_back(idx);
    cum += prob[idx];
    if (cum >= p) break;  // smallest prefix reaching the threshold
  }
  return kept;
}

int nucleus_sample(const std::vector<double>& logits,
                   const SamplingConfig& sc, Rng& rng) {
  auto kept = nucleus_kept(logits, sc.p, sc.temperature);
  const int k = static_cast<int>(logits.size());
  std::vector<double> prob(k);
  double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    prob[i] = std::exp((logits[i] - mx) / sc.temperature);
    sum += prob[i];
  }
  double mass = 0.0;
  for (int idx : kept) mass += prob[idx] / sum;
  double u = rng.uniform() * mass;
  double acc = 0.0;
  for (int idx : kept) {
    acc += prob[idx] / sum;
    if (u < acc) return idx;
  }
  return kept.back();
}

SampledCodes sample_codes(const std::vector<double>& g_ctx, CstParams& p,
                          const SamplingConfig& sc, Rng& rng) {
  SampledCodes out;
  for (int d = 1; d <= p.cfg.D; ++d) {
    auto logits = predict_code_logits(g_ctx, out.codes, d, p);
    int k = nucleus_sample(logits, sc, rng);
    out.codes.push_back(k);
    out.logp.push_back(log_softmax_at(logits, k));
    out.joint_logp += out.logp.back();
  }
  return out;
}

// ---- composition ----------------------------------------------------------------

std::vector<double> compose_with_offset(const std::vector<int>& codes,
                                        const std::vector<double>& offset,
                                        sae::Stage1Result& s1) {
  const auto& stack = s1.stack;
  const int ta = s1.params.cfg.T * s1.params.cfg.A;
  if (static_cast<int>(codes.size()) != stack.D)
    throw std::invalid_argument("compose: need one code per depth");
  for (int d = 0; d < stack.D; ++d)
    if (codes[d] < 0 || codes[d] >= stack.K)
      throw std::invalid_argument("compose: code out of range");
  if (static_cast<int>(offset.size()) != ta)
    throw std::invalid_argument("compose: offset size mismatch");

  std::vector<double> zsum(stack.m, 0.0);
  for (int d = 0; d < stack.D; ++d) {
    const double* e = stack.books[d].row(codes[d]);
    for (int j = 0; j < stack.m; ++j) zsum[j] += e[j];
  }
  ad::Graph g;
  auto z = g.input({1, stack.m}, zsum.data());
  auto dec = sae::build_decoder(g, z, 1, s1.params);
  std::vector<double> anorm = g.val(dec);
  for (int j = 0; j < ta; ++j) anorm[j] += offset[j];
  std::vector<double> out(ta);
  sae::denormalize_chunks(s1.norm, anorm.data(), out.data(), 1,
                          s1.params.cfg.T, s1.params.cfg.A);
  for (double& v : out) v = std::clamp(v, -1.0, 1.0);
  return out;
}

std::vector<double> compose_action(const std::vector<int>& codes,
                                   const std::vector<double>& g_ctx,
                                   CstParams& p, sae::Stage1Result& s1) {
  check_compat(p.cfg, s1.stack);
  const int ta = p.cfg.T * p.cfg.A;
  std::vector<double> offset(ta, 0.0);
  if (!p.cfg.no_refine) {
    ad::Graph g;
    auto ctx = g.input({1, p.cfg.g_dim}, g_ctx.data());
    offset = g.val(head_logits(g, ctx, p.ref));
  }
  return compose_with_offset(codes, offset, s1);
}

// ---- loss ---------------------------------------------------------------------

void require_stage1_match(const CstConfig& cfg, const sae::Stage1Result& s1) {
  check_compat(cfg, s1.stack);
  if (cfg.T != s1.params.cfg.T || cfg.A != s1.params.cfg.A)
    throw ckpt::CompatError("policy chunk shape does not match stage 1");
}

namespace {

// Ground-truth codes for normalized chunks through the frozen stack, plus
// the frozen decode of their plain code sums.
void teacher_paths(const double* chunks_norm, int n, sae::Stage1Result& s1,
                   std::vector<std::vector<int>>& codes,
                   std::vector<double>& dec_vals) {
  const auto& stack = s1.stack;
  std::vector<double> zv;
  {
    ad::Graph g;
    auto x = g.input({n, static_cast<std::int64_t>(s1.params.cfg.T) *
                             s1.params.cfg.A},
                     chunks_norm);
    zv = g.val(sae::build_encoder(g, x, s1.params));
  }
  auto bp = quant::quantize_batch(zv.data(), n, s1.stack, false);
  codes = bp.codes;
  std::vector<double> zsum(static_cast<std::size_t>(n) * stack.m, 0.0);
  for (int d = 0; d < stack.D; ++d)
    for (int i = 0; i < n; ++i) {
      const double* e = stack.books[d].row(codes[d][i]);
      for (int j = 0; j < stack.m; ++j)
        zsum[static_cast<std::size_t>(i) * stack.m + j] += e[j];
    }
  ad::Graph g;
  auto z = g.input({n, stack.m}, std::move(zsum));
  dec_vals = g.val(sae::build_decoder(g, z, n, s1.params));
}

struct LossNodes {
  ad::NodeId total = -1;
  ad::NodeId refine = -1;
  std::vector<ad::NodeId> ce;
};

LossNodes build_loss(ad::Graph& g, const double* windows,
                     const std::vector<int>& tasks,
                     const double* chunks_norm,
                     const std::vector<std::vector<int>>& teacher,
                     const std::vector<double>& dec_vals, int n,
                     CstParams& p) {
  const CstConfig& c = p.cfg;
  auto win = g.input({n, static_cast<std::int64_t>(c.h) * c.obs_dim}, windows);
  auto ctx = build_context(g, win, tasks, n, p);

  LossNodes out;
  std::vector<const std::vector<int>*> prefix;
  for (int d = 0; d < c.D; ++d) {
    auto in = head_input(g, ctx, n, prefix, p);
    auto logits = head_logits(g, in, p.heads[d]);
    out.ce.push_back(g.cross_entropy(logits, teacher[d]));
    prefix.push_back(&teacher[d]);
  }

  ad::NodeId pred = g.input({n, static_cast<std::int64_t>(c.T) * c.A},
                            dec_vals.data());
  if (!c.no_refine) pred = g.add(pred, head_logits(g, ctx, p.ref));
  auto target =
      g.input({n, static_cast<std::int64_t>(c.T) * c.A}, chunks_norm);
  out.refine = g.mse(pred, target);

  out.total = g.scale(out.ce[0], c.lambda_d1);
  for (int d = 1; d < c.D; ++d)
    out.total = g.add(out.total, g.scale(out.ce[d], c.lambda_d2));
  out.total = g.add(out.total, g.scale(out.refine, c.lambda_ref));
  return out;
}

}  // namespace

LossParts cst_loss(const double* windows, const int* task_ids,
                   const double* chunks_raw, int n, CstParams& p,
                   sae::Stage1Result& s1) {
  require_stage1_match(p.cfg, s1);
  const int ta = p.cfg.T * p.cfg.A;
  std::vector<double> chunks_norm(static_cast<std::size_t>(n) * ta);
  sae::normalize_chunks(s1.norm, chunks_raw, chunks_norm.data(), n, p.cfg.T,
                        p.cfg.A);
  std::vector<std::vector<int>> teacher;
  std::vector<double> dec_vals;
  teacher_paths(chunks_norm.data(), n, s1, teacher, dec_vals);

  ad::Graph g;
  std::vector<int> tasks(task_ids, task_ids + n);
  auto nodes = build_loss(g, windows, tasks, chunks_norm.data(), teacher,
                          dec_vals, n, p);
  LossParts parts;
  parts.total = g.scalar(nodes.total);
  parts.refine = g.scalar(nodes.refine);
  for (auto ce : nodes.ce) parts.ce.push_back(g.scalar(ce));
  return parts;
}

// ---- training -----------------------------------------------------------------

namespace {
void write_cst_csv(const std::string& path,
                   const std::vector<CstEpochMetrics>& metrics, int depths) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write metrics file " + path);
  std::fprintf(f, "epoch,total");
  for (int d = 1; d <= depths; ++d) std::fprintf(f, ",ce_d%d", d);
  std::fprintf(f, ",refine\n");
  for (const auto& e : metrics) {
    std::fprintf(f, "%d,%.17g", e.epoch, e.total);
    for (double ce : e.ce) std::fprintf(f, ",%.17g", ce);
    std::fprintf(f, ",%.17g\n", e.refine);
  }
  if (std::fclose(f) != 0)
    throw std::runtime_error("short write on metrics file " + path);
}
}  // namespace

CstResult train_cst(const env::DemoViews& views, sae::Stage1Result& s1,
                    const CstConfig& cfg, const std::string& metrics_csv) {
  require_stage1_match(cfg, s1);
  if (views.n < 1) throw std::invalid_argument("train_cst: no training views");
  if (views.h != cfg.h || views.obs_dim != cfg.obs_dim ||
      views.T != cfg.T || views.act_dim != cfg.A)
    throw std::invalid_argument("train_cst: view shape mismatch");

  const int n = views.n;
  const int ta = cfg.T * cfg.A;
  const int wd = cfg.h * cfg.obs_dim;

  CstResult r;
  Rng rng(cfg.seed);
  r.params = CstParams::make(cfg, rng);
  std::vector<Tensor*> weights;
  r.params.collect(weights);
  opt::AdamWConfig oc;
  oc.weight_decay = cfg.weight_decay;
  opt::AdamW optim(weights, oc);

  // The teacher signal never changes: normalize, quantize, and decode every
  // expert chunk once up front.
  std::vector<double> chunks_norm(static_cast<std::size_t>(n) * ta);
  sae::normalize_chunks(s1.norm, views.chunks.data(), chunks_norm.data(), n,
                        cfg.T, cfg.A);
  std::vector<std::vector<int>> teacher;
  std::vector<double> dec_vals;
  teacher_paths(chunks_norm.data(), n, s1, teacher, dec_vals);

  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  std::vector<double> wbuf(static_cast<std::size_t>(cfg.batch) * wd);
  std::vector<double> cbuf(static_cast<std::size_t>(cfg.batch) * ta);
  std::vector<double> dbuf(static_cast<std::size_t>(cfg.batch) * ta);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
    double lr = opt::lr_at_epoch(cfg.lr, epoch, cfg.epochs, cfg.warmup_epochs);
    CstEpochMetrics em;
    em.epoch = epoch;
    em.ce.assign(cfg.D, 0.0);

    for (int b0 = 0; b0 < n; b0 += cfg.batch) {
      int bn = std::min(cfg.batch, n - b0);
      std::vector<int> tasks(bn);
      std::vector<std::vector<int>> tcodes(cfg.D, std::vector<int>(bn));
      for (int i = 0; i < bn; ++i) {
        int src = perm[b0 + i];
        std::copy_n(views.windows.data() + static_cast<std::size_t>(src) * wd,
                    wd, wbuf.data() + static_cast<std::size_t>(i) * wd);
        std::copy_n(chunks_norm.data() + static_cast<std::size_t>(src) * ta,
                    ta, cbuf.data() + static_cast<std::size_t>(i) * ta);
        std::copy_n(dec_vals.data() + static_cast<std::size_t>(src) * ta, ta,
                    dbuf.data() + static_cast<std::size_t>(i) * ta);
        tasks[i] = views.task[src];
        for (int d = 0; d < cfg.D; ++d) tcodes[d][i] = teacher[d][src];
      }

      ad::Graph g;
      auto nodes =
          build_loss(g, wbuf.data(), tasks, cbuf.data(), tcodes, dbuf, bn,
                     r.params);
      double loss = g.scalar(nodes.total);
      if (!std::isfinite(loss) || loss > kDivergenceAbort)
        throw DivergenceError(
            "train_cst: diverged at epoch " + std::to_string(epoch) +
            ", loss " + std::to_string(loss));
      g.backward(nodes.total);
      opt::clip_grad_norm(weights, kMaxGradNorm);
      optim.step(lr);

      em.total += loss * bn;
      em.refine += g.scalar(nodes.refine) * bn;
      for (int d = 0; d < cfg.D; ++d)
        em.ce[d] += g.scalar(nodes.ce[d]) * bn;
    }
    em.total /= n;
    em.refine /= n;
    for (double& ce : em.ce) ce /= n;
    r.metrics.push_back(std::move(em));
  }

  if (!metrics_csv.empty()) write_cst_csv(metrics_csv, r.metrics, cfg.D);
  return r;
}

// ---- inference ----------------------------------------------------------------

EpisodeRecord rollout(env::PointMassEnv& e, const ChunkPolicy& policy, int T,
                      int A, int T_a) {
  if (T_a < 1 || T_a > T)
    throw std::invalid_argument("rollout: replan interval must be in [1, T]");
  EpisodeRecord rec;
  auto o = e.observe();
  const int od = static_cast<int>(o.size());
  rec.obs.insert(rec.obs.end(), o.begin(), o.end());
  while (!e.done()) {
    auto chunk = policy(rec.obs, od, e.task_id);
    if (static_cast<int>(chunk.size()) != T * A)
      throw std::runtime_error("rollout: policy returned a bad chunk");
    for (int j = 0; j < T_a && !e.done(); ++j) {
      const double* a = chunk.data() + static_cast<std::size_t>(j) * A;
      rec.act.insert(rec.act.end(), a, a + A);
      e.step(a);
      ++rec.steps;
      if (!e.done()) {
        o = e.observe();
        rec.obs.insert(rec.obs.end(), o.begin(), o.end());
      }
    }
  }
  rec.success = e.success;
  return rec;
}

std::vector<double> window_from_history(const std::vector<double>& history,
                                        int obs_dim, int h) {
  if (history.empty() || obs_dim < 1 || h < 1 ||
      history.size() % obs_dim != 0)
    throw std::invalid_argument("window_from_history: bad arguments");
  int steps = static_cast<int>(history.size()) / obs_dim;
  std::vector<double> win(static_cast<std::size_t>(h) * obs_dim);
  for (int s = 0; s < h; ++s) {
    int src = std::max(steps - h + s, 0);  // repeat the first observation
    std::copy_n(history.data() + static_cast<std::size_t>(src) * obs_dim,
                obs_dim, win.data() + static_cast<std::size_t>(s) * obs_dim);
  }
  return win;
}

EpisodeRecord rollout_policy(env::PointMassEnv& e, CstParams& p,
                             sae::Stage1Result& s1, const SamplingConfig& sc,
                             int T_a) {
  check_compat(p.cfg, s1.stack);
  Rng rng(sc.seed);
  auto pol = [&](const std::vector<double>& hist, int od,
                 int task) -> std::vector<double> {
    auto win = window_from_history(hist, od, p.cfg.h);
    auto ctx = encode_context(win.data(), task, p);
    auto codes = sample_codes(ctx, p, sc, rng);
    return compose_action(codes.codes, ctx, p, s1);
  };
  return rollout(e, pol, p.cfg.T, p.cfg.A, T_a);
}

// ---- checkpoint ----------------------------------------------------------------

void save_policy(const std::string& path, const CstResult& r) {
  const CstConfig& c = r.params.cfg;
  ckpt::Writer w(path);
  w.magic("CSTP1");
  for (int v : {c.h, c.obs_dim, c.n_tasks, c.g_dim, c.layers, c.heads,
                c.d_ff, c.code_emb, c.head_hidden, c.K, c.D, c.m, c.T, c.A})
    w.u32(static_cast<std::uint32_t>(v));
  w.u32(c.no_ar ? 1u : 0u);
  w.u32(c.no_refine ? 1u : 0u);
  w.f32(c.lambda_d1);
  w.f32(c.lambda_d2);
  w.f32(c.lambda_ref);
  w.u64(c.seed);
  std::map<std::string, const Tensor*> table;
  r.params.named(table);
  w.tensors(table);
  w.close();
}

CstResult load_policy(const std::string& path) {
  ckpt::Reader rd(path);
  rd.expect_magic("CSTP1");
  CstConfig c;
  for (int* v : {&c.h, &c.obs_dim, &c.n_tasks, &c.g_dim, &c.layers, &c.heads,
                 &c.d_ff, &c.code_emb, &c.head_hidden, &c.K, &c.D, &c.m, &c.T,
                 &c.A})
    *v = static_cast<int>(rd.u32());
  c.no_ar = rd.u32() != 0;
  c.no_refine = rd.u32() != 0;
  c.lambda_d1 = rd.f32();
  c.lambda_d2 = rd.f32();
  c.lambda_ref = rd.f32();
  c.seed = rd.u64();
  auto table = rd.tensors();
  CstResult r;
  Rng dummy(0);
  r.params = CstParams::make(c, dummy);
  r.params.load(table);
  return r;
}

}  // namespace rarsq::cst
