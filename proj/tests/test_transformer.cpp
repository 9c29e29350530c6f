#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "rarsq/graph.hpp"
#include "rarsq/rng.hpp"
#include "rarsq/transformer.hpp"

using namespace rarsq;

namespace {

tfm::Config tiny_cfg(bool causal) {
  tfm::Config c;
  c.layers = 2;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.causal = causal;
  return c;
}

std::vector<double> run(tfm::Params& p, const std::vector<double>& tokens,
                        int batch, int seq) {
  ad::Graph g;
  ad::NodeId x = g.input({batch * seq, p.cfg.d_model}, tokens);
  ad::NodeId y = tfm::build(g, x, batch, seq, p);
  return g.val(y);
}

}  // namespace

TEST_CASE("identical inputs produce bitwise identical outputs") {
  Rng rng(1);
  tfm::Params p = tfm::Params::make(tiny_cfg(true), rng);
  Rng data(2);
  std::vector<double> tokens(3 * 4 * 8);
  for (auto& v : tokens) v = data.normal();
  auto a = run(p, tokens, 3, 4);
  auto b = run(p, tokens, 3, 4);
  REQUIRE(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

TEST_CASE("causal mask keeps earlier tokens independent of later ones") {
  Rng rng(3);
  tfm::Params p = tfm::Params::make(tiny_cfg(true), rng);
  Rng data(4);
  const int seq = 5, dm = 8;
  std::vector<double> tokens(seq * dm);
  for (auto& v : tokens) v = data.normal();
  auto base = run(p, tokens, 1, seq);
  std::vector<double> altered = tokens;
  altered[(seq - 1) * dm + 2] += 10.0;
  altered[(seq - 1) * dm + 5] -= 3.0;
  auto changed = run(p, altered, 1, seq);
  for (int t = 0; t < seq - 1; ++t)
    for (int j = 0; j < dm; ++j)
      REQUIRE(std::abs(base[t * dm + j] - changed[t * dm + j]) <= 1e-12);
  double last_diff = 0.0;
  for (int j = 0; j < dm; ++j)
    last_diff +=
        std::abs(base[(seq - 1) * dm + j] - changed[(seq - 1) * dm + j]);
  REQUIRE(last_diff > 1e-6);
}

TEST_CASE("without the causal mask later tokens leak backward") {
  Rng rng(5);
  tfm::Params p = tfm::Params::make(tiny_cfg(false), rng);
  Rng data(6);
  const int seq = 5, dm = 8;
  std::vector<double> tokens(seq * dm);
  for (auto& v : tokens) v = data.normal();
  auto base = run(p, tokens, 1, seq);
  std::vector<double> altered = tokens;
  altered[(seq - 1) * dm + 2] += 10.0;
  altered[(seq - 1) * dm + 5] -= 3.0;
  auto changed = run(p, altered, 1, seq);
  double first_diff = 0.0;
  for (int j = 0; j < dm; ++j)
    first_diff += std::abs(base[j] - changed[j]);
  REQUIRE(first_diff > 1e-9);
}

TEST_CASE("token order matters under the causal mask") {
  Rng rng(7);
  tfm::Params p = tfm::Params::make(tiny_cfg(true), rng);
  Rng data(8);
  const int seq = 4, dm = 8;
  std::vector<double> tokens(seq * dm);
  for (auto& v : tokens) v = data.normal();
  std::vector<double> swapped = tokens;
  for (int j = 0; j < dm; ++j)
    std::swap(swapped[0 * dm + j], swapped[1 * dm + j]);
  auto a = run(p, tokens, 1, seq);
  auto b = run(p, swapped, 1, seq);
  double diff = 0.0;
  for (int j = 0; j < dm; ++j)
    diff += std::abs(a[(seq - 1) * dm + j] - b[(seq - 1) * dm + j]);
  REQUIRE(diff > 1e-9);
}

TEST_CASE("batch rows do not interact") {
  Rng rng(9);
  tfm::Params p = tfm::Params::make(tiny_cfg(true), rng);
  Rng data(10);
  const int seq = 3, dm = 8;
  std::vector<double> two(2 * seq * dm);
  for (auto& v : two) v = data.normal();
  auto both = run(p, two, 2, seq);
  std::vector<double> first(two.begin(), two.begin() + seq * dm);
  auto solo = run(p, first, 1, seq);
  for (int i = 0; i < seq * dm; ++i)
    REQUIRE(both[i] == doctest::Approx(solo[i]).epsilon(1e-12));
}

TEST_CASE("gradients match finite differences through full blocks") {
  Rng rng(11);
  tfm::Params p = tfm::Params::make(tiny_cfg(true), rng);
  Rng data(12);
  const int batch = 2, seq = 3, dm = 8;
  std::vector<double> tokens(batch * seq * dm);
  for (auto& v : tokens) v = data.normal();
  std::vector<double> target(batch * seq * dm);
  for (auto& v : target) v = data.normal();
  ad::Graph g;
  ad::NodeId x = g.input({batch * seq, dm}, tokens);
  ad::NodeId y = tfm::build(g, x, batch, seq, p);
  ad::NodeId loss = g.mse(y, g.input({batch * seq, dm}, target));
  std::vector<Tensor*> params;
  p.collect(params);
  double err = ad::finite_diff_check(g, loss, params, 1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("named table round-trips through load") {
  Rng rng(13);
  tfm::Params p = tfm::Params::make(tiny_cfg(true), rng);
  tfm::Params q = tfm::Params::make(tiny_cfg(true), rng);  // different values
  std::map<std::string, const Tensor*> table;
  p.named(table, "enc.");
  std::map<std::string, Tensor> owned;
  for (auto& [k, t] : table) owned[k] = *t;
  q.load(owned, "enc.");
  Rng data(14);
  std::vector<double> tokens(2 * 3 * 8);
  for (auto& v : tokens) v = data.normal();
  auto a = run(p, tokens, 2, 3);
  auto b = run(q, tokens, 2, 3);
  REQUIRE(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
  REQUIRE_THROWS(q.load({}, "enc."));
}
