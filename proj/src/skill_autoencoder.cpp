#include "rarsq/skill_autoencoder.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>

#include "rarsq/checkpoint.hpp"
#include "rarsq/optim.hpp"

namespace rarsq::sae {

namespace {
constexpr double kDivergenceAbort = 1e3;
constexpr double kMaxGradNorm = 1.0;
constexpr double kFlatSpan = 1e-12;

Tensor mlp_weight(std::int64_t in, std::int64_t out, Rng& rng) {
  return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}
}  // namespace

AutoencoderParams AutoencoderParams::make(const Stage1Config& cfg, Rng& rng) {
  AutoencoderParams p;
  p.cfg = cfg;
  const std::int64_t ta = static_cast<std::int64_t>(cfg.T) * cfg.A;
  p.enc_w1 = mlp_weight(ta, cfg.hidden, rng);
  p.enc_b1 = Tensor({cfg.hidden});
  p.enc_w2 = mlp_weight(cfg.hidden, cfg.m, rng);
  p.enc_b2 = Tensor({cfg.m});
  if (!cfg.attention_decoder) {
    p.dec_w1 = mlp_weight(cfg.m, cfg.hidden, rng);
    p.dec_b1 = Tensor({cfg.hidden});
    p.dec_w2 = mlp_weight(cfg.hidden, cfg.hidden, rng);
    p.dec_b2 = Tensor({cfg.hidden});
    p.dec_w3 = mlp_weight(cfg.hidden, ta, rng);
    p.dec_b3 = Tensor({ta});
  } else {
    const std::int64_t dm = cfg.dec_d_model;
    p.att_in_w = mlp_weight(cfg.m, cfg.T * dm, rng);
    p.att_in_b = Tensor({cfg.T * dm});
    p.att_pos = Tensor::randn({cfg.T, dm}, rng, 0.02);
    tfm::Config tc;
    tc.layers = cfg.dec_layers;
    tc.d_model = cfg.dec_d_model;
    tc.heads = cfg.dec_heads;
    tc.d_ff = cfg.dec_ff;
    tc.causal = false;  // the whole latent is known when decoding
    p.att = tfm::Params::make(tc, rng);
    p.att_out_w = mlp_weight(dm, cfg.A, rng);
    p.att_out_b = Tensor({cfg.A});
  }
  return p;
}

void AutoencoderParams::collect(std::vector<Tensor*>& out) {
  out.push_back(&enc_w1);
  out.push_back(&enc_b1);
  out.push_back(&enc_w2);
  out.push_back(&enc_b2);
  if (!cfg.attention_decoder) {
    out.push_back(&dec_w1);
    out.push_back(&dec_b1);
    out.push_back(&dec_w2);
    out.push_back(&dec_b2);
    out.push_back(&dec_w3);
    out.push_back(&dec_b3);
  } else {
    out.push_back(&att_in_w);
    out.push_back(&att_in_b);
    out.push_back(&att_pos);
    att.collect(out);
    out.push_back(&att_out_w);
    out.push_back(&att_out_b);
  }
}

void AutoencoderParams::named(std::map<std::string, const Tensor*>& out) const {
  out["enc.w1"] = &enc_w1;
  out["enc.b1"] = &enc_b1;
  out["enc.w2"] = &enc_w2;
  out["enc.b2"] = &enc_b2;
  if (!cfg.attention_decoder) {
    out["dec.w1"] = &dec_w1;
    out["dec.b1"] = &dec_b1;
    out["dec.w2"] = &dec_w2;
    out["dec.b2"] = &dec_b2;
    out["dec.w3"] = &dec_w3;
    out["dec.b3"] = &dec_b3;
  } else {
    out["att.in_w"] = &att_in_w;
    out["att.in_b"] = &att_in_b;
    out["att.pos"] = &att_pos;
    att.named(out, "att.tfm.");
    out["att.out_w"] = &att_out_w;
    out["att.out_b"] = &att_out_b;
  }
}

void AutoencoderParams::load(const std::map<std::string, Tensor>& table) {
  std::map<std::string, const Tensor*> want;
  named(want);
  for (auto& [name, dst] : want) {
    auto it = table.find(name);
    if (it == table.end())
      throw ckpt::FormatError("missing tensor " + name);
    Tensor* t = const_cast<Tensor*>(dst);
    if (it->second.shape != t->shape)
      throw ckpt::FormatError("shape mismatch for tensor " + name);
    t->v = it->second.v;
  }
}

// ---- normalization ----------------------------------------------------------

NormStats compute_norm(const double* chunks, int n, int T, int A) {
  if (n < 1) throw std::invalid_argument("compute_norm: empty dataset");
  NormStats ns;
  ns.lo.assign(A, 1e300);
  ns.hi.assign(A, -1e300);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < T; ++t)
      for (int a = 0; a < A; ++a) {
        double v = chunks[(static_cast<std::size_t>(i) * T + t) * A + a];
        ns.lo[a] = std::min(ns.lo[a], v);
        ns.hi[a] = std::max(ns.hi[a], v);
      }
  return ns;
}

void normalize_chunks(const NormStats& ns, const double* in, double* out,
                      int n, int T, int A) {
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < T; ++t)
      for (int a = 0; a < A; ++a) {
        std::size_t idx = (static_cast<std::size_t>(i) * T + t) * A + a;
        double span = ns.hi[a] - ns.lo[a];
        out[idx] = span < kFlatSpan
                       ? 0.0
                       : 2.0 * (in[idx] - ns.lo[a]) / span - 1.0;
      }
}

void denormalize_chunks(const NormStats& ns, const double* in, double* out,
                        int n, int T, int A) {
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < T; ++t)
      for (int a = 0; a < A; ++a) {
        std::size_t idx = (static_cast<std::size_t>(i) * T + t) * A + a;
        double span = ns.hi[a] - ns.lo[a];
        out[idx] = span < kFlatSpan
                       ? ns.lo[a]
                       : ns.lo[a] + (in[idx] + 1.0) * 0.5 * span;
      }
}

// ---- graph builders ---------------------------------------------------------

ad::NodeId build_encoder(ad::Graph& g, ad::NodeId x, AutoencoderParams& p) {
  auto h = g.relu(g.add_bias(g.matmul(x, g.leaf(p.enc_w1)), g.leaf(p.enc_b1)));
  return g.add_bias(g.matmul(h, g.leaf(p.enc_w2)), g.leaf(p.enc_b2));
}

ad::NodeId build_decoder(ad::Graph& g, ad::NodeId z, int n,
                         AutoencoderParams& p) {
  const Stage1Config& c = p.cfg;
  if (!c.attention_decoder) {
    auto h1 =
        g.relu(g.add_bias(g.matmul(z, g.leaf(p.dec_w1)), g.leaf(p.dec_b1)));
    auto h2 =
        g.relu(g.add_bias(g.matmul(h1, g.leaf(p.dec_w2)), g.leaf(p.dec_b2)));
    return g.add_bias(g.matmul(h2, g.leaf(p.dec_w3)), g.leaf(p.dec_b3));
  }
  const std::int64_t dm = c.dec_d_model;
  auto proj = g.add_bias(g.matmul(z, g.leaf(p.att_in_w)), g.leaf(p.att_in_b));
  auto tok = g.reshape(proj, {static_cast<std::int64_t>(n) * c.T, dm});
  std::vector<int> pos_idx(static_cast<std::size_t>(n) * c.T);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < c.T; ++t) pos_idx[static_cast<std::size_t>(i) * c.T + t] = t;
  tok = g.add(tok, g.gather_rows(g.leaf(p.att_pos), std::move(pos_idx)));
  auto enc = tfm::build(g, tok, n, c.T, p.att);
  auto out =
      g.add_bias(g.matmul(enc, g.leaf(p.att_out_w)), g.leaf(p.att_out_b));
  return g.reshape(out, {n, static_cast<std::int64_t>(c.T) * c.A});
}

// ---- single-chunk entry points ----------------------------------------------

std::vector<double> encode_chunk(const double* chunk, AutoencoderParams& p) {
  ad::Graph g;
  auto x = g.input({1, static_cast<std::int64_t>(p.cfg.T) * p.cfg.A}, chunk);
  auto z = build_encoder(g, x, p);
  std::vector<double> out = g.val(z);
  for (double v : out)
    if (!std::isfinite(v))
      throw std::runtime_error("encode_chunk: non-finite latent");
  return out;
}

ReconResult reconstruct(const double* chunk, AutoencoderParams& p,
                        quant::CodebookStack& stack) {
  ad::Graph g;
  auto x = g.input({1, static_cast<std::int64_t>(p.cfg.T) * p.cfg.A}, chunk);
  auto z = build_encoder(g, x, p);
  auto q = quant::quantize_into_graph(g, z, stack, p.cfg.beta, false, false);
  auto dec = build_decoder(g, q.zhat, 1, p);
  auto recon = g.mse(dec, x);
  ReconResult r;
  r.ahat = g.val(dec);
  r.recon = g.scalar(recon);
  r.commit = g.scalar(q.commit);
  r.path = quant::quantize(g.val(z).data(), stack, false);
  if (!std::isfinite(r.recon) || !std::isfinite(r.commit))
    throw std::runtime_error("reconstruct: non-finite loss");
  return r;
}

// ---- training ---------------------------------------------------------------

void write_metrics_csv(const std::string& path,
                       const std::vector<EpochMetrics>& metrics, int depths) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write metrics file " + path);
  std::fprintf(f, "epoch,recon,commit,quant_l1");
  for (int d = 1; d <= depths; ++d) std::fprintf(f, ",active_codes_d%d", d);
  for (int d = 1; d <= depths; ++d) std::fprintf(f, ",perplexity_d%d", d);
  std::fprintf(f, "\n");
  for (const auto& e : metrics) {
    std::fprintf(f, "%d,%.17g,%.17g,%.17g", e.epoch, e.recon, e.commit,
                 e.quant_l1);
    for (int d = 0; d < depths; ++d)
      std::fprintf(f, ",%d", e.usage[d].active);
    for (int d = 0; d < depths; ++d)
      std::fprintf(f, ",%.17g", e.usage[d].perplexity);
    std::fprintf(f, "\n");
  }
  if (std::fclose(f) != 0)
    throw std::runtime_error("short write on metrics file " + path);
}

Stage1Result train_stage1(const double* chunks, int n,
                          const Stage1Config& cfg,
                          const std::string& metrics_csv) {
  if (n < 1) throw std::invalid_argument("train_stage1: empty dataset");
  if (cfg.beta <= 0.0) throw std::invalid_argument("train_stage1: beta <= 0");
  if (cfg.batch < 1 || cfg.epochs < 1)
    throw std::invalid_argument("train_stage1: batch and epochs must be >= 1");
  const int ta = cfg.T * cfg.A;

  Stage1Result r;
  r.norm = compute_norm(chunks, n, cfg.T, cfg.A);
  std::vector<double> data(static_cast<std::size_t>(n) * ta);
  normalize_chunks(r.norm, chunks, data.data(), n, cfg.T, cfg.A);

  Rng rng(cfg.seed);
  r.params = AutoencoderParams::make(cfg, rng);
  std::vector<Tensor*> weights;
  r.params.collect(weights);
  opt::AdamWConfig oc;
  oc.weight_decay = cfg.weight_decay;
  opt::AdamW optim(weights, oc);

  r.stack = quant::CodebookStack::make(cfg.D, cfg.K, cfg.m, cfg.mode);
  {
    // Seed the codebooks from the latents of an untrained encoder pass.
    int ib = std::min(n, std::max(cfg.batch, 4 * cfg.K));
    ad::Graph g;
    auto x = g.input({ib, ta}, data.data());
    auto z = build_encoder(g, x, r.params);
    quant::init_kmeanspp(r.stack, g.val(z).data(), ib, rng);
  }

  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  std::vector<double> xbuf(static_cast<std::size_t>(cfg.batch) * ta);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
    r.stack.reset_usage();
    double lr = opt::lr_at_epoch(cfg.lr, epoch, cfg.epochs, cfg.warmup_epochs);
    double recon_sum = 0.0, commit_sum = 0.0, l1_sum = 0.0;

    for (int b0 = 0; b0 < n; b0 += cfg.batch) {
      int bn = std::min(cfg.batch, n - b0);
      for (int i = 0; i < bn; ++i)
        std::copy_n(data.data() + static_cast<std::size_t>(perm[b0 + i]) * ta,
                    ta, xbuf.data() + static_cast<std::size_t>(i) * ta);

      ad::Graph g;
      auto x = g.input({bn, ta}, xbuf.data());
      auto z = build_encoder(g, x, r.params);
      auto q = quant::quantize_into_graph(g, z, r.stack, cfg.beta, false, true);
      auto dec = build_decoder(g, q.zhat, bn, r.params);
      auto recon = g.mse(dec, x);
      auto total = g.add(recon, q.commit);

      double loss = g.scalar(total);
      if (!std::isfinite(loss) || loss > kDivergenceAbort)
        throw DivergenceError(
            "train_stage1: diverged at epoch " + std::to_string(epoch) +
            " batch " + std::to_string(b0 / cfg.batch) + ", loss " +
            std::to_string(loss));
      g.backward(total);
      opt::clip_grad_norm(weights, kMaxGradNorm);
      optim.step(lr);

      const std::vector<double>& zv = g.val(z);
      auto bp = quant::quantize_batch(zv.data(), bn, r.stack, false);
      quant::ema_update(r.stack, bp, cfg.ema_decay);

      const std::vector<double>& zh = g.val(q.zhat);
      for (std::size_t i = 0; i < zv.size(); ++i)
        l1_sum += std::fabs(zv[i] - zh[i]);
      recon_sum += g.scalar(recon) * bn;
      commit_sum += g.scalar(q.commit) * bn;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.recon = recon_sum / n;
    em.commit = commit_sum / n;
    em.quant_l1 = l1_sum / n;
    em.usage = quant::usage_metrics(r.stack);
    r.metrics.push_back(std::move(em));
  }

  if (!metrics_csv.empty()) write_metrics_csv(metrics_csv, r.metrics, cfg.D);
  return r;
}

// ---- checkpoint ---------------------------------------------------------------

void save_stage1(const std::string& path, const Stage1Result& r) {
  const Stage1Config& c = r.params.cfg;
  ckpt::Writer w(path);
  w.magic("S1AE1");
  w.u32(static_cast<std::uint32_t>(c.T));
  w.u32(static_cast<std::uint32_t>(c.A));
  w.u32(static_cast<std::uint32_t>(c.m));
  w.u32(static_cast<std::uint32_t>(c.K));
  w.u32(static_cast<std::uint32_t>(c.D));
  w.u32(static_cast<std::uint32_t>(r.stack.mode));
  w.u32(static_cast<std::uint32_t>(c.hidden));
  w.u32(c.attention_decoder ? 1u : 0u);
  w.u32(static_cast<std::uint32_t>(c.dec_layers));
  w.u32(static_cast<std::uint32_t>(c.dec_d_model));
  w.u32(static_cast<std::uint32_t>(c.dec_heads));
  w.u32(static_cast<std::uint32_t>(c.dec_ff));
  w.f32(c.beta);
  w.u64(c.seed);
  w.f32s(r.norm.lo.data(), r.norm.lo.size());
  w.f32s(r.norm.hi.data(), r.norm.hi.size());

  std::map<std::string, const Tensor*> table;
  r.params.named(table);
  std::vector<Tensor> owned;
  owned.reserve(static_cast<std::size_t>(c.D) * 2);
  for (int d = 0; d < c.D; ++d) {
    const auto& cb = r.stack.books[d];
    std::string pre = "q.d" + std::to_string(d) + ".";
    table[pre + "vec"] = &cb.vec;
    Tensor cnt({c.K});
    cnt.v = cb.ema_count;
    owned.push_back(std::move(cnt));
    table[pre + "cnt"] = &owned.back();
    Tensor sum({c.K, c.m});
    sum.v = cb.ema_sum;
    owned.push_back(std::move(sum));
    table[pre + "sum"] = &owned.back();
  }
  w.tensors(table);
  w.close();
}

Stage1Result load_stage1(const std::string& path) {
  ckpt::Reader rd(path);
  rd.expect_magic("S1AE1");
  Stage1Config c;
  c.T = static_cast<int>(rd.u32());
  c.A = static_cast<int>(rd.u32());
  c.m = static_cast<int>(rd.u32());
  c.K = static_cast<int>(rd.u32());
  c.D = static_cast<int>(rd.u32());
  std::uint32_t mode = rd.u32();
  if (mode > 1) throw ckpt::FormatError("unknown gradient mode");
  c.mode = static_cast<quant::GradMode>(mode);
  c.hidden = static_cast<int>(rd.u32());
  c.attention_decoder = rd.u32() != 0;
  c.dec_layers = static_cast<int>(rd.u32());
  c.dec_d_model = static_cast<int>(rd.u32());
  c.dec_heads = static_cast<int>(rd.u32());
  c.dec_ff = static_cast<int>(rd.u32());
  c.beta = rd.f32();
  c.seed = rd.u64();

  Stage1Result r;
  r.norm.lo.resize(c.A);
  r.norm.hi.resize(c.A);
  rd.f32s(r.norm.lo.data(), r.norm.lo.size());
  rd.f32s(r.norm.hi.data(), r.norm.hi.size());

  auto table = rd.tensors();
  Rng dummy(0);
  r.params = AutoencoderParams::make(c, dummy);
  r.params.load(table);
  r.stack = quant::CodebookStack::make(c.D, c.K, c.m, c.mode);
  for (int d = 0; d < c.D; ++d) {
    auto& cb = r.stack.books[d];
    std::string pre = "q.d" + std::to_string(d) + ".";
    auto need = [&](const std::string& name) -> const Tensor& {
      auto it = table.find(name);
      if (it == table.end()) throw ckpt::FormatError("missing tensor " + name);
      return it->second;
    };
    const Tensor& vec = need(pre + "vec");
    if (vec.shape != cb.vec.shape)
      throw ckpt::FormatError("codebook shape mismatch");
    cb.vec.v = vec.v;
    cb.ema_count = need(pre + "cnt").v;
    cb.ema_sum = need(pre + "sum").v;
    if (static_cast<int>(cb.ema_count.size()) != c.K ||
        cb.ema_sum.size() != cb.vec.v.size())
      throw ckpt::FormatError("codebook EMA state mismatch");
  }
  return r;
}

}  // namespace rarsq::sae
