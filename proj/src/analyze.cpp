#include "rarsq/analyze.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"
#include "rarsq/quantizer.hpp"

namespace rarsq::analyze {

namespace {

// Regularized upper incomplete gamma Q(a, x): series for the lower tail
// when x < a+1, modified Lentz continued fraction otherwise.
double gamma_q(double a, double x) {
  if (a <= 0.0 || x < 0.0)
    throw std::invalid_argument("gamma_q: need a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  const double log_pref = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-16) break;
    }
    return 1.0 - sum * std::exp(log_pref);
  }
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    double an = -static_cast<double>(i) * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-16) break;
  }
  return std::exp(log_pref) * h;
}

double entropy_nats(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

}  // namespace

CodeTable assign_codes(const double* chunks, int n,
                       const sae::Stage1Result& s1) {
  if (n < 1) throw std::invalid_argument("assign_codes: empty dataset");
  const auto& cfg = s1.params.cfg;
  const int ta = cfg.T * cfg.A;
  std::vector<double> norm(static_cast<std::size_t>(n) * ta);
  sae::normalize_chunks(s1.norm, chunks, norm.data(), n, cfg.T, cfg.A);

  std::vector<double> z(static_cast<std::size_t>(n) * cfg.m);
  // encode_chunk wants mutable params for gradient wiring but only reads
  // values here; no backward pass runs, so nothing is written.
  auto& params = const_cast<sae::AutoencoderParams&>(s1.params);
  for (int i = 0; i < n; ++i) {
    auto zi = sae::encode_chunk(norm.data() + static_cast<std::size_t>(i) * ta,
                                params);
    std::copy(zi.begin(), zi.end(),
              z.begin() + static_cast<std::size_t>(i) * cfg.m);
  }

  quant::CodebookStack stack = s1.stack;  // private copy: state untouched
  auto path = quant::quantize_batch(z.data(), n, stack, false);

  CodeTable t;
  t.n = n;
  t.K = cfg.K;
  t.D = cfg.D;
  t.codes.resize(static_cast<std::size_t>(n) * cfg.D);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < cfg.D; ++d)
      t.codes[static_cast<std::size_t>(i) * cfg.D + d] = path.codes[d][i];
  return t;
}

std::vector<DepthStats> depth_stats(const CodeTable& t) {
  std::vector<DepthStats> out(t.D);
  for (int d = 0; d < t.D; ++d) {
    auto& s = out[d];
    s.count.assign(t.K, 0);
    for (int i = 0; i < t.n; ++i) ++s.count[t.at(i, d)];
    s.freq.assign(t.K, 0.0);
    for (int k = 0; k < t.K; ++k) {
      s.freq[k] = static_cast<double>(s.count[k]) / t.n;
      if (s.count[k] > 0) ++s.active;
    }
    s.entropy = entropy_nats(s.freq);
    s.perplexity = std::exp(s.entropy);
  }
  return out;
}

std::vector<std::int64_t> joint_counts(const CodeTable& t) {
  if (t.D < 2)
    throw std::invalid_argument("joint_counts: needs at least two depths");
  std::vector<std::int64_t> joint(static_cast<std::size_t>(t.K) * t.K, 0);
  for (int i = 0; i < t.n; ++i)
    ++joint[static_cast<std::size_t>(t.at(i, 0)) * t.K + t.at(i, 1)];
  return joint;
}

std::vector<double> conditional_rows(const std::vector<std::int64_t>& joint,
                                     int K) {
  if (static_cast<int>(joint.size()) != K * K)
    throw std::invalid_argument("conditional_rows: joint must be K*K");
  std::vector<double> cond(joint.size(), 0.0);
  for (int i = 0; i < K; ++i) {
    std::int64_t row = 0;
    for (int j = 0; j < K; ++j) row += joint[static_cast<std::size_t>(i) * K + j];
    for (int j = 0; j < K; ++j) {
      std::size_t at = static_cast<std::size_t>(i) * K + j;
      cond[at] = row > 0 ? static_cast<double>(joint[at]) / row : 1.0 / K;
    }
  }
  return cond;
}

std::vector<double> row_entropies(const std::vector<double>& cond, int K) {
  std::vector<double> h(K, 0.0);
  for (int i = 0; i < K; ++i) {
    std::vector<double> row(cond.begin() + static_cast<std::size_t>(i) * K,
                            cond.begin() + static_cast<std::size_t>(i + 1) * K);
    h[i] = entropy_nats(row);
  }
  return h;
}

double chi2_survival(double x, int dof) {
  if (dof < 1) throw std::invalid_argument("chi2_survival: dof must be >= 1");
  if (x < 0.0) throw std::invalid_argument("chi2_survival: x must be >= 0");
  return gamma_q(0.5 * dof, 0.5 * x);
}

Chi2Result chi2_independence(const std::vector<std::int64_t>& joint, int K) {
  if (static_cast<int>(joint.size()) != K * K)
    throw std::invalid_argument("chi2_independence: joint must be K*K");
  std::vector<double> row(K, 0.0), col(K, 0.0);
  double n = 0.0;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      double c = static_cast<double>(joint[static_cast<std::size_t>(i) * K + j]);
      row[i] += c;
      col[j] += c;
      n += c;
    }
  std::vector<int> ri, cj;
  for (int i = 0; i < K; ++i)
    if (row[i] > 0.0) ri.push_back(i);
  for (int j = 0; j < K; ++j)
    if (col[j] > 0.0) cj.push_back(j);

  Chi2Result r;
  if (n == 0.0 || ri.size() < 2 || cj.size() < 2) return r;
  for (int i : ri)
    for (int j : cj) {
      double e = row[i] * col[j] / n;
      double o = static_cast<double>(joint[static_cast<std::size_t>(i) * K + j]);
      r.stat += (o - e) * (o - e) / e;
    }
  r.dof = static_cast<int>((ri.size() - 1) * (cj.size() - 1));
  r.p_value = chi2_survival(r.stat, r.dof);
  return r;
}

Report analyze_codes(const double* chunks, int n,
                     const sae::Stage1Result& s1) {
  Report r;
  CodeTable t = assign_codes(chunks, n, s1);
  r.n = t.n;
  r.K = t.K;
  r.D = t.D;
  r.depths = depth_stats(t);
  if (t.D >= 2) {
    r.pairwise_valid = true;
    r.joint = joint_counts(t);
    r.conditional = conditional_rows(r.joint, t.K);
    r.row_entropy = row_entropies(r.conditional, t.K);
    r.chi2 = chi2_independence(r.joint, t.K);
  }
  return r;
}

std::string report_json(const Report& r) {
  nlohmann::ordered_json j;
  j["n"] = r.n;
  j["K"] = r.K;
  j["D"] = r.D;
  j["depths"] = nlohmann::ordered_json::array();
  for (int d = 0; d < r.D; ++d) {
    const auto& s = r.depths[d];
    nlohmann::ordered_json e;
    e["depth"] = d + 1;
    e["count"] = s.count;
    e["freq"] = s.freq;
    e["active"] = s.active;
    e["entropy"] = s.entropy;
    e["perplexity"] = s.perplexity;
    j["depths"].push_back(e);
  }
  j["pairwise_valid"] = r.pairwise_valid;
  if (r.pairwise_valid) {
    nlohmann::ordered_json p;
    p["joint"] = r.joint;
    p["conditional"] = r.conditional;
    p["row_entropy"] = r.row_entropy;
    p["chi2_stat"] = r.chi2.stat;
    p["chi2_dof"] = r.chi2.dof;
    p["chi2_p_value"] = r.chi2.p_value;
    j["pairwise"] = p;
  } else {
    j["pairwise_note"] = "single-depth stack: pairwise statistics skipped";
  }
  return j.dump(2) + "\n";
}

}  // namespace rarsq::analyze
