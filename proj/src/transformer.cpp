#include "rarsq/transformer.hpp"

#include <cmath>
#include <stdexcept>

#include "rarsq/checkpoint.hpp"

namespace rarsq::tfm {

namespace {

void fill_normal(Tensor& t, std::vector<std::int64_t> shape, Rng& rng,
                 double scale) {
  t.shape = std::move(shape);
  std::size_t n = 1;
  for (auto d : t.shape) n *= static_cast<std::size_t>(d);
  t.v.resize(n);
  for (auto& v : t.v) v = rng.normal() * scale;
}

void fill_const(Tensor& t, std::vector<std::int64_t> shape, double value) {
  t.shape = std::move(shape);
  std::size_t n = 1;
  for (auto d : t.shape) n *= static_cast<std::size_t>(d);
  t.v.assign(n, value);
}

}  // namespace

Params Params::make(const Config& cfg, Rng& rng) {
  Params p;
  p.cfg = cfg;
  if (cfg.d_model % cfg.heads != 0)
    throw std::invalid_argument("transformer: d_model must divide by heads");
  const int dm = cfg.d_model, ff = cfg.d_ff;
  // Residual-branch outputs start small so deep stacks begin near identity.
  const double res = 0.02 / std::sqrt(2.0 * cfg.layers);
  p.blocks.resize(cfg.layers);
  for (auto& b : p.blocks) {
    fill_const(b.ln1_g, {dm}, 1.0);
    fill_const(b.ln1_b, {dm}, 0.0);
    fill_normal(b.wq, {dm, dm}, rng, 0.02);
    fill_const(b.bq, {dm}, 0.0);
    fill_normal(b.wk, {dm, dm}, rng, 0.02);
    fill_const(b.bk, {dm}, 0.0);
    fill_normal(b.wv, {dm, dm}, rng, 0.02);
    fill_const(b.bv, {dm}, 0.0);
    fill_normal(b.wo, {dm, dm}, rng, res);
    fill_const(b.bo, {dm}, 0.0);
    fill_const(b.ln2_g, {dm}, 1.0);
    fill_const(b.ln2_b, {dm}, 0.0);
    fill_normal(b.w1, {dm, ff}, rng, 0.02);
    fill_const(b.b1, {ff}, 0.0);
    fill_normal(b.w2, {ff, dm}, rng, res);
    fill_const(b.b2, {dm}, 0.0);
  }
  fill_const(p.lnf_g, {dm}, 1.0);
  fill_const(p.lnf_b, {dm}, 0.0);
  return p;
}

void Params::collect(std::vector<Tensor*>& out) {
  for (auto& b : blocks)
    for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv,
                      &b.bv, &b.wo, &b.bo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1,
                      &b.w2, &b.b2})
      out.push_back(t);
  out.push_back(&lnf_g);
  out.push_back(&lnf_b);
}

namespace {

const char* kBlockNames[] = {"ln1_g", "ln1_b", "wq", "bq", "wk",    "bk",
                             "wv",    "bv",    "wo", "bo", "ln2_g", "ln2_b",
                             "w1",    "b1",    "w2", "b2"};

std::vector<Tensor*> block_slots(Block& b) {
  return {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv,
          &b.wo,    &b.bo,    &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2};
}

}  // namespace

void Params::named(std::map<std::string, const Tensor*>& out,
                   const std::string& prefix) const {
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto slots = block_slots(const_cast<Block&>(blocks[l]));
    for (std::size_t i = 0; i < slots.size(); ++i)
      out[prefix + "L" + std::to_string(l) + "." + kBlockNames[i]] = slots[i];
  }
  out[prefix + "lnf_g"] = &lnf_g;
  out[prefix + "lnf_b"] = &lnf_b;
}

void Params::load(const std::map<std::string, Tensor>& table,
                  const std::string& prefix) {
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = table.find(prefix + name);
    if (it == table.end())
      throw ckpt::FormatError("missing tensor: " + prefix + name);
    if (it->second.v.size() != dst.v.size())
      throw ckpt::FormatError("tensor size mismatch: " + prefix + name);
    dst.v = it->second.v;
  };
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto slots = block_slots(blocks[l]);
    for (std::size_t i = 0; i < slots.size(); ++i)
      take("L" + std::to_string(l) + "." + kBlockNames[i], *slots[i]);
  }
  take("lnf_g", lnf_g);
  take("lnf_b", lnf_b);
}

ad::NodeId build(ad::Graph& g, ad::NodeId x, int batch, int seq, Params& p) {
  const Config& cfg = p.cfg;
  const int dh = cfg.d_model / cfg.heads;
  std::vector<int> valid;
  if (cfg.causal) {
    valid.resize(static_cast<std::size_t>(batch) * cfg.heads * seq);
    for (std::size_t r = 0; r < valid.size(); ++r)
      valid[r] = static_cast<int>(r % seq) + 1;
  }
  ad::NodeId h = x;
  for (auto& b : p.blocks) {
    ad::NodeId n1 = g.layernorm(h, g.leaf(b.ln1_g), g.leaf(b.ln1_b), cfg.eps);
    ad::NodeId q = g.add_bias(g.matmul(n1, g.leaf(b.wq)), g.leaf(b.bq));
    ad::NodeId k = g.add_bias(g.matmul(n1, g.leaf(b.wk)), g.leaf(b.bk));
    ad::NodeId v = g.add_bias(g.matmul(n1, g.leaf(b.wv)), g.leaf(b.bv));
    ad::NodeId qh = g.split_heads(q, batch, seq, cfg.heads);
    ad::NodeId kh = g.split_heads(k, batch, seq, cfg.heads);
    ad::NodeId vh = g.split_heads(v, batch, seq, cfg.heads);
    ad::NodeId scores = g.scale(g.bmm_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
    ad::NodeId probs = g.softmax(scores, valid);
    ad::NodeId ctx = g.merge_heads(g.bmm(probs, vh), batch, seq, cfg.heads);
    ad::NodeId att = g.add_bias(g.matmul(ctx, g.leaf(b.wo)), g.leaf(b.bo));
    h = g.add(h, att);
    ad::NodeId n2 = g.layernorm(h, g.leaf(b.ln2_g), g.leaf(b.ln2_b), cfg.eps);
    ad::NodeId f1 = g.gelu(g.add_bias(g.matmul(n2, g.leaf(b.w1)), g.leaf(b.b1)));
    ad::NodeId f2 = g.add_bias(g.matmul(f1, g.leaf(b.w2)), g.leaf(b.b2));
    h = g.add(h, f2);
  }
  return g.layernorm(h, g.leaf(p.lnf_g), g.leaf(p.lnf_b), cfg.eps);
}

}  // namespace rarsq::tfm
