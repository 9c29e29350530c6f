#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "rarsq/analyze.hpp"
#include "rarsq/quantizer.hpp"
#include "rarsq/rng.hpp"

using namespace rarsq;
using namespace rarsq::analyze;

namespace {

// Closed forms for the chi-square upper tail: erfc covers one degree of
// freedom, an exponential partial sum covers any even count.
double exact_survival_1(double x) { return std::erfc(std::sqrt(0.5 * x)); }

double exact_survival_even(double x, int dof) {
  int k = dof / 2;
  double term = 1.0, sum = 1.0;
  for (int j = 1; j < k; ++j) {
    term *= 0.5 * x / j;
    sum += term;
  }
  return std::exp(-0.5 * x) * sum;
}

sae::Stage1Result rand_stage1(int T, int A, int m, int K, int D,
                              std::uint64_t seed) {
  sae::Stage1Config c;
  c.T = T;
  c.A = A;
  c.m = m;
  c.K = K;
  c.D = D;
  c.hidden = 16;
  Rng rng(seed);
  sae::Stage1Result r;
  r.params = sae::AutoencoderParams::make(c, rng);
  r.stack = quant::CodebookStack::make(D, K, m, quant::GradMode::rotation);
  for (auto& cb : r.stack.books) cb.vec = Tensor::randn({K, m}, rng, 0.5);
  r.norm.lo.assign(A, -1.0);
  r.norm.hi.assign(A, 1.0);
  return r;
}

}  // namespace

TEST_CASE("chi-square survival matches closed forms") {
  for (double x : {0.1, 0.5, 1.0, 2.0, 3.84, 6.63, 10.0, 25.0}) {
    CHECK(chi2_survival(x, 1) ==
          doctest::Approx(exact_survival_1(x)).epsilon(1e-12));
    for (int dof : {2, 4, 6, 10, 20})
      CHECK(chi2_survival(x, dof) ==
            doctest::Approx(exact_survival_even(x, dof)).epsilon(1e-12));
  }
  // Textbook critical values.
  CHECK(chi2_survival(3.841458820694124, 1) ==
        doctest::Approx(0.05).epsilon(1e-9));
  CHECK(chi2_survival(5.991464547107979, 2) ==
        doctest::Approx(0.05).epsilon(1e-9));
  CHECK(chi2_survival(6.634896601021213, 1) ==
        doctest::Approx(0.01).epsilon(1e-9));
  CHECK(chi2_survival(0.0, 3) == 1.0);

  // Monotone decreasing in the statistic.
  double prev = 1.0;
  for (double x = 0.5; x < 40.0; x += 0.5) {
    double q = chi2_survival(x, 5);
    CHECK(q < prev);
    prev = q;
  }
  CHECK_THROWS_AS(chi2_survival(-1.0, 2), std::invalid_argument);
  CHECK_THROWS_AS(chi2_survival(1.0, 0), std::invalid_argument);
}

TEST_CASE("a rank-one count table is exactly independent") {
  // Counts that factor as an outer product have expected == observed.
  std::vector<std::int64_t> r = {3, 7, 2, 8};
  std::vector<std::int64_t> c = {5, 1, 4, 10};
  std::vector<std::int64_t> joint(16);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) joint[i * 4 + j] = r[i] * c[j];
  auto res = chi2_independence(joint, 4);
  CHECK(res.stat == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(res.dof == 9);
  CHECK(res.p_value == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a diagonal count table is flagged as dependent") {
  std::vector<std::int64_t> joint(16, 0);
  for (int i = 0; i < 4; ++i) joint[i * 4 + i] = 250;
  auto res = chi2_independence(joint, 4);
  CHECK(res.stat == doctest::Approx(3000.0).epsilon(1e-12));  // n*(K-1)
  CHECK(res.dof == 9);
  CHECK(res.p_value < 1e-10);
}

TEST_CASE("a worked two-by-two table gives the textbook result") {
  std::vector<std::int64_t> joint = {10, 20, 20, 10};
  auto res = chi2_independence(joint, 2);
  CHECK(res.stat == doctest::Approx(20.0 / 3.0).epsilon(1e-12));
  CHECK(res.dof == 1);
  CHECK(res.p_value ==
        doctest::Approx(exact_survival_1(20.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("empty rows and columns are dropped before the test") {
  // A 3x3 table whose middle row and column never occur must reduce to the
  // embedded 2x2 problem.
  std::vector<std::int64_t> big = {10, 0, 20, 0, 0, 0, 20, 0, 10};
  std::vector<std::int64_t> small = {10, 20, 20, 10};
  auto a = chi2_independence(big, 3);
  auto b = chi2_independence(small, 2);
  CHECK(a.stat == doctest::Approx(b.stat).epsilon(1e-12));
  CHECK(a.dof == b.dof);
  CHECK(a.p_value == doctest::Approx(b.p_value).epsilon(1e-12));

  // Degenerate tables cannot reject anything.
  std::vector<std::int64_t> one_row = {5, 7, 0, 0};
  auto r = chi2_independence(one_row, 2);
  CHECK(r.dof == 0);
  CHECK(r.p_value == 1.0);
  CHECK(chi2_independence(std::vector<std::int64_t>(9, 0), 3).p_value == 1.0);
}

TEST_CASE("conditional rows always sum to one") {
  std::vector<std::int64_t> joint = {6, 2, 0, 0, 0, 0, 1, 1, 2};
  auto cond = conditional_rows(joint, 3);
  CHECK(cond[0] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(cond[1] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(cond[2] == 0.0);
  for (int j = 0; j < 3; ++j)  // empty row falls back to uniform
    CHECK(cond[3 + j] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  for (int i = 0; i < 3; ++i) {
    double s = 0.0;
    for (int j = 0; j < 3; ++j) s += cond[i * 3 + j];
    CHECK(std::fabs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("row entropies hit the deterministic and uniform extremes") {
  std::vector<double> cond = {1.0, 0.0, 0.0, 0.0,  //
                              0.25, 0.25, 0.25, 0.25,
                              0.5, 0.5, 0.0, 0.0,
                              0.25, 0.25, 0.25, 0.25};
  auto h = row_entropies(cond, 4);
  CHECK(h[0] == 0.0);
  CHECK(h[1] == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(h[2] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(h[3] == doctest::Approx(std::log(4.0)).epsilon(1e-15));
}

TEST_CASE("depth statistics match a longhand tally") {
  CodeTable t;
  t.n = 8;
  t.K = 4;
  t.D = 2;
  t.codes = {0, 1, 0, 1, 0, 2, 1, 2, 1, 3, 2, 3, 2, 0, 2, 0};
  auto s = depth_stats(t);
  REQUIRE(s.size() == 2);
  CHECK(s[0].count == std::vector<std::int64_t>{3, 2, 3, 0});
  CHECK(s[0].active == 3);
  CHECK(s[0].freq[0] == doctest::Approx(0.375).epsilon(1e-15));
  double want = -(0.375 * std::log(0.375) * 2 + 0.25 * std::log(0.25));
  CHECK(s[0].entropy == doctest::Approx(want).epsilon(1e-12));
  CHECK(s[0].perplexity == doctest::Approx(std::exp(want)).epsilon(1e-12));
  CHECK(s[1].count == std::vector<std::int64_t>{2, 2, 2, 2});
  CHECK(s[1].entropy == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  auto joint = joint_counts(t);
  std::int64_t total = 0;
  for (auto v : joint) total += v;
  CHECK(total == t.n);
  CHECK(joint[0 * 4 + 1] == 2);  // (0,1) appears twice
  CHECK(joint[2 * 4 + 0] == 2);  // (2,0) appears twice

  CodeTable d1;
  d1.n = 2;
  d1.K = 2;
  d1.D = 1;
  d1.codes = {0, 1};
  CHECK_THROWS_AS(joint_counts(d1), std::invalid_argument);
}

TEST_CASE("code assignment agrees with the quantizer and mutates nothing") {
  auto s1 = rand_stage1(4, 2, 3, 6, 2, 50);
  Rng rng(51);
  const int n = 40;
  std::vector<double> chunks(n * 8);
  for (auto& v : chunks) v = rng.uniform(-0.9, 0.9);

  auto ema_before = s1.stack.books[0].ema_count;
  auto usage_before = s1.stack.books[0].usage;
  auto t = assign_codes(chunks.data(), n, s1);
  CHECK(s1.stack.books[0].ema_count == ema_before);
  CHECK(s1.stack.books[0].usage == usage_before);

  REQUIRE(t.n == n);
  REQUIRE(t.D == 2);
  for (int i = 0; i < n; ++i) {
    auto z = sae::encode_chunk(chunks.data() + i * 8, s1.params);
    auto path = quant::quantize(z.data(), s1.stack, false);
    CHECK(t.at(i, 0) == path.codes[0]);
    CHECK(t.at(i, 1) == path.codes[1]);
  }
}

TEST_CASE("full report is consistent and serializes stably") {
  auto s1 = rand_stage1(4, 2, 3, 6, 2, 52);
  Rng rng(53);
  const int n = 200;
  std::vector<double> chunks(n * 8);
  for (auto& v : chunks) v = rng.uniform(-0.9, 0.9);

  auto r = analyze_codes(chunks.data(), n, s1);
  CHECK(r.pairwise_valid);
  REQUIRE(static_cast<int>(r.joint.size()) == 36);

  // Joint row sums must reproduce the depth-1 histogram.
  for (int k = 0; k < 6; ++k) {
    std::int64_t row = 0;
    for (int j = 0; j < 6; ++j) row += r.joint[k * 6 + j];
    CHECK(row == r.depths[0].count[k]);
  }
  for (int i = 0; i < 6; ++i) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += r.conditional[i * 6 + j];
    CHECK(std::fabs(s - 1.0) < 1e-9);
  }
  CHECK(r.chi2.p_value >= 0.0);
  CHECK(r.chi2.p_value <= 1.0);

  auto text = report_json(r);
  CHECK(report_json(r) == text);  // byte-stable
  auto j = nlohmann::json::parse(text);
  CHECK(j["n"] == n);
  CHECK(j["K"] == 6);
  CHECK(j["pairwise_valid"] == true);
  CHECK(j["pairwise"]["chi2_dof"] == r.chi2.dof);
  CHECK(j["depths"].size() == 2);

  auto s1d1 = rand_stage1(4, 2, 3, 6, 1, 54);
  auto r1 = analyze_codes(chunks.data(), n, s1d1);
  CHECK_FALSE(r1.pairwise_valid);
  auto t1 = report_json(r1);
  CHECK(nlohmann::json::parse(t1).contains("pairwise_note"));
}
