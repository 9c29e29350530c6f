#pragma once
// Post-hoc statistics over the discrete codes a trained quantizer assigns
// to a dataset: per-depth usage, the conditional distribution of the second
// code given the first, and a chi-square test of independence between the
// first two depths. Deeper stacks only report the first pair.

#include <cstdint>
#include <string>
#include <vector>

#include "rarsq/skill_autoencoder.hpp"

namespace rarsq::analyze {

// Code assignments for a dataset: n rows, one code per depth.
struct CodeTable {
  int n = 0;
  int K = 0;
  int D = 0;
  std::vector<int> codes;  // n x D row-major
  int at(int i, int d) const {
    return codes[static_cast<std::size_t>(i) * D + d];
  }
};

// Normalizes, encodes, and quantizes every chunk. Works on a private copy
// of the codebooks, so EMA state and usage histograms stay untouched.
CodeTable assign_codes(const double* chunks, int n,
                       const sae::Stage1Result& s1);

struct DepthStats {
  std::vector<std::int64_t> count;  // K
  std::vector<double> freq;         // K, sums to 1
  int active = 0;
  double entropy = 0.0;     // nats
  double perplexity = 1.0;  // exp(entropy)
};
std::vector<DepthStats> depth_stats(const CodeTable& t);

// Joint counts of (first code, second code); K x K row-major.
std::vector<std::int64_t> joint_counts(const CodeTable& t);

// P(second | first) rows from joint counts. Every row sums to one; rows
// whose first code never occurs fall back to uniform.
std::vector<double> conditional_rows(const std::vector<std::int64_t>& joint,
                                     int K);

// Shannon entropy in nats of each conditional row.
std::vector<double> row_entropies(const std::vector<double>& cond, int K);

// Upper-tail probability P(X >= x) of the chi-square distribution with
// `dof` degrees of freedom (the regularized incomplete gamma Q(dof/2, x/2)).
double chi2_survival(double x, int dof);

struct Chi2Result {
  double stat = 0.0;
  int dof = 0;
  double p_value = 1.0;
};
// Pearson test of independence on a joint count table. Rows and columns
// with a zero marginal are dropped first so every expected count is
// positive; fewer than two surviving rows or columns yields p = 1.
Chi2Result chi2_independence(const std::vector<std::int64_t>& joint, int K);

// Everything above over one dataset. With a single-depth stack only the
// per-depth block is filled and pairwise_valid stays false.
struct Report {
  int n = 0;
  int K = 0;
  int D = 0;
  std::vector<DepthStats> depths;
  bool pairwise_valid = false;
  std::vector<std::int64_t> joint;  // K*K
  std::vector<double> conditional;  // K*K
  std::vector<double> row_entropy;  // K
  Chi2Result chi2;
};
Report analyze_codes(const double* chunks, int n,
                     const sae::Stage1Result& s1);

// Stable JSON rendering of a report (insertion-ordered keys, 2-space
// indent) for the CLI and for byte-comparison across reruns.
std::string report_json(const Report& r);

}  // namespace rarsq::analyze
