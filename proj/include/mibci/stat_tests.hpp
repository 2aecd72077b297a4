#ifndef MIBCI_STAT_TESTS_HPP
#define MIBCI_STAT_TESTS_HPP

#include <span>
#include <string>
#include <vector>

#include "mibci/common.hpp"

namespace mibci {

// Nonparametric machinery for comparing per-subject accuracy vectors across
// models: Shapiro-Wilk normality, Friedman omnibus with tie correction, and
// Wilcoxon signed-rank pairwise tests under Holm multiplicity control.
// Pure functions, safe from any thread.

struct ShapiroResult {
  double w = 0;
  double p = 0;
};

// Royston's AS R94 approximation; requires 3 <= n <= 5000 and a
// non-degenerate sample.
ShapiroResult shapiro_wilk(std::span<const double> sample);

struct FriedmanResult {
  double chi2 = 0;
  int df = 0;  // k - 1
  double p = 0;
};

// blocks[i] holds the k treatment values of block i; ranks are averaged on
// ties and the statistic carries the tie correction.
FriedmanResult friedman(const std::vector<std::vector<double>>& blocks);

struct WilcoxonResult {
  double w_stat = 0;  // sum of ranks of negative differences (x - y < 0)
  double p = 0;       // two-sided
  int n_used = 0;     // pairs remaining after dropping zero differences
  bool exact = false; // sign enumeration (n_used <= 12) vs normal approximation
};

WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y);

// Holm step-down adjustment; outputs align with the inputs.
std::vector<double> holm_adjust(std::span<const double> p_values);

struct PairwiseResult {
  int model_a = 0;
  int model_b = 0;
  double statistic = 0;
  double p_raw = 1;
  double p_adjusted = 1;
  bool degenerate = false;  // all differences zero: no difference detectable
};

struct StatReport {
  std::vector<std::string> model_names;
  std::vector<ShapiroResult> normality;  // one per model
  FriedmanResult omnibus;
  bool posthoc_run = false;  // pairwise tests only when omnibus p < alpha
  std::vector<PairwiseResult> pairwise;
  double alpha = 0.05;
};

// accuracy_vectors are subject-aligned, one vector per model
StatReport compare_models(const std::vector<std::vector<double>>& accuracy_vectors,
                          std::vector<std::string> model_names, double alpha = 0.05);

std::string stat_report_json(const StatReport& report);

// shared ranking helper: average ranks on ties (1-based)
std::vector<double> average_ranks(std::span<const double> values);

}  // namespace mibci

#endif  // MIBCI_STAT_TESTS_HPP
