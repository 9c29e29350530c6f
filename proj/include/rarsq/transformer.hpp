#pragma once
// Pre-norm transformer encoder over already-embedded token rows. Callers own
// token assembly and position information; this module owns the blocks and
// the final norm. With `causal` set, token t attends to tokens 0..t only.

#include <map>
#include <string>
#include <vector>

#include "rarsq/graph.hpp"
#include "rarsq/rng.hpp"
#include "rarsq/tensor.hpp"

namespace rarsq::tfm {

struct Config {
  int layers = 2;
  int d_model = 128;
  int heads = 4;
  int d_ff = 512;
  bool causal = true;
  double eps = 1e-5;
};

struct Block {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

struct Params {
  Config cfg;
  std::vector<Block> blocks;
  Tensor lnf_g, lnf_b;

  static Params make(const Config& cfg, Rng& rng);
  void collect(std::vector<Tensor*>& out);
  void named(std::map<std::string, const Tensor*>& out,
             const std::string& prefix) const;
  void load(const std::map<std::string, Tensor>& table,
            const std::string& prefix);
};

// x: [batch*seq, d_model], batch-major rows. Returns the same shape.
ad::NodeId build(ad::Graph& g, ad::NodeId x, int batch, int seq, Params& p);

}  // namespace rarsq::tfm
