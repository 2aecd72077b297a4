#include "mibci/stat_tests.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "json.hpp"

namespace mibci {

namespace {

double normal_quantile(double p) {
  static const boost::math::normal_distribution<double> n01;
  return boost::math::quantile(n01, p);
}

double normal_upper_tail(double z) {
  static const boost::math::normal_distribution<double> n01;
  return boost::math::cdf(boost::math::complement(n01, z));
}

double chi2_upper_tail(double x, int df) {
  if (x <= 0) return 1.0;
  const boost::math::chi_squared_distribution<double> dist(df);
  return boost::math::cdf(boost::math::complement(dist, x));
}

double poly(std::span<const double> c, double x) {
  double r = 0, xn = 1;
  for (const double ci : c) {
    r += ci * xn;
    xn *= x;
  }
  return r;
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> values) {
  const size_t n = values.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

// ----------------------------- Shapiro-Wilk (AS R94) -----------------------------

ShapiroResult shapiro_wilk(std::span<const double> sample) {
  const int n = static_cast<int>(sample.size());
  if (n < 3) throw StatError("shapiro_wilk: need at least 3 observations, got " + std::to_string(n));
  if (n > 5000) throw StatError("shapiro_wilk: n > 5000 outside the approximation's range");
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  if (x.front() == x.back()) throw StatError("shapiro_wilk: sample is constant");

  // expected normal order statistics via Blom scores
  std::vector<double> m(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    m[static_cast<size_t>(i)] = normal_quantile((static_cast<double>(i + 1) - 0.375) / (n + 0.25));
  }
  double summ2 = 0;
  for (const double mi : m) summ2 += mi * mi;

  std::vector<double> a(static_cast<size_t>(n));
  if (n == 3) {
    a[2] = std::sqrt(0.5);
    a[1] = 0.0;
    a[0] = -a[2];
  } else {
    static constexpr double c1[6] = {0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056};
    static constexpr double c2[6] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633};
    const double u = 1.0 / std::sqrt(static_cast<double>(n));
    const double rs = std::sqrt(summ2);
    const double an = m[static_cast<size_t>(n - 1)] / rs + poly(c1, u);
    double fac;
    int mid_lo;
    if (n > 5) {
      const double an1 = m[static_cast<size_t>(n - 2)] / rs + poly(c2, u);
      fac = std::sqrt((summ2 - 2.0 * m[static_cast<size_t>(n - 1)] * m[static_cast<size_t>(n - 1)] -
                       2.0 * m[static_cast<size_t>(n - 2)] * m[static_cast<size_t>(n - 2)]) /
                      (1.0 - 2.0 * an * an - 2.0 * an1 * an1));
      a[static_cast<size_t>(n - 1)] = an;
      a[static_cast<size_t>(n - 2)] = an1;
      a[0] = -an;
      a[1] = -an1;
      mid_lo = 2;
    } else {
      fac = std::sqrt((summ2 - 2.0 * m[static_cast<size_t>(n - 1)] * m[static_cast<size_t>(n - 1)]) /
                      (1.0 - 2.0 * an * an));
      a[static_cast<size_t>(n - 1)] = an;
      a[0] = -an;
      mid_lo = 1;
    }
    for (int i = mid_lo; i < n - mid_lo; ++i) a[static_cast<size_t>(i)] = m[static_cast<size_t>(i)] / fac;
  }

  double mean = 0;
  for (const double xi : x) mean += xi;
  mean /= n;
  double sse = 0, sax = 0;
  for (int i = 0; i < n; ++i) {
    sse += (x[static_cast<size_t>(i)] - mean) * (x[static_cast<size_t>(i)] - mean);
    sax += a[static_cast<size_t>(i)] * x[static_cast<size_t>(i)];
  }
  double w = sax * sax / sse;
  if (w > 1.0) w = 1.0;

  double p;
  if (n == 3) {
    constexpr double pi6 = 1.90985931710274;   // 6/pi
    constexpr double stqr = 1.04719755119660;  // asin(sqrt(3/4))
    p = pi6 * (std::asin(std::sqrt(w)) - stqr);
    p = std::clamp(p, 0.0, 1.0);
  } else if (n <= 11) {
    static constexpr double c3[4] = {0.5440, -0.39978, 0.025054, -6.714e-4};
    static constexpr double c4[4] = {1.3822, -0.77857, 0.062767, -2.0322e-3};
    const double g = -2.273 + 0.459 * n;
    const double arg = g - std::log1p(-w);
    if (arg <= 0) {
      p = 0.0;  // W below the transform's domain: extreme departure
    } else {
      const double y = -std::log(arg);
      const double mu = poly(c3, static_cast<double>(n));
      const double sigma = std::exp(poly(c4, static_cast<double>(n)));
      p = normal_upper_tail((y - mu) / sigma);
    }
  } else {
    static constexpr double c5[4] = {-1.5861, -0.31082, -0.083751, 3.8915e-3};
    static constexpr double c6[3] = {-0.4803, -0.082676, 3.0302e-3};
    const double ln = std::log(static_cast<double>(n));
    const double y = std::log1p(-w);
    const double mu = poly(c5, ln);
    const double sigma = std::exp(poly(c6, ln));
    p = normal_upper_tail((y - mu) / sigma);
  }
  return {w, p};
}

// ----------------------------- Friedman -----------------------------

FriedmanResult friedman(const std::vector<std::vector<double>>& blocks) {
  const size_t n = blocks.size();
  if (n < 2) throw StatError("friedman: need at least 2 blocks");
  const size_t k = blocks.front().size();
  if (k < 2) throw StatError("friedman: need at least 2 treatments");
  for (const auto& b : blocks) {
    if (b.size() != k) throw StatError("friedman: ragged block matrix");
  }
  std::vector<double> rank_sum(k, 0.0);
  double tie_term = 0;  // sum over blocks of sum(t^3 - t)
  for (const auto& block : blocks) {
    const auto ranks = average_ranks(block);
    for (size_t j = 0; j < k; ++j) rank_sum[j] += ranks[j];
    // tie groups within the block
    std::vector<double> sorted(block.begin(), block.end());
    std::sort(sorted.begin(), sorted.end());
    size_t i = 0;
    while (i < sorted.size()) {
      size_t j = i;
      while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie_term += t * t * t - t;
      i = j + 1;
    }
  }
  const double dn = static_cast<double>(n), dk = static_cast<double>(k);
  double ssbn = 0;
  for (const double r : rank_sum) ssbn += r * r;
  const double raw = 12.0 / (dn * dk * (dk + 1.0)) * ssbn - 3.0 * dn * (dk + 1.0);
  const double correction = 1.0 - tie_term / (dn * dk * (dk * dk - 1.0));
  FriedmanResult res;
  res.df = static_cast<int>(k) - 1;
  if (correction <= 0) {
    // every block fully tied: no information, chi2 degenerates to 0
    res.chi2 = 0.0;
    res.p = 1.0;
    return res;
  }
  res.chi2 = std::max(0.0, raw / correction);
  res.p = chi2_upper_tail(res.chi2, res.df);
  return res;
}

// ----------------------------- Wilcoxon signed-rank -----------------------------

WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw StatError("wilcoxon: paired samples must have equal length");
  std::vector<double> d;
  for (size_t i = 0; i < x.size(); ++i) {
    const double di = x[i] - y[i];
    if (di != 0.0) d.push_back(di);
  }
  if (d.empty()) throw StatError("wilcoxon: all differences are zero");
  const size_t n = d.size();
  std::vector<double> absd(n);
  for (size_t i = 0; i < n; ++i) absd[i] = std::fabs(d[i]);
  const auto ranks = average_ranks(absd);

  double w_neg = 0, w_pos = 0;
  for (size_t i = 0; i < n; ++i) (d[i] < 0 ? w_neg : w_pos) += ranks[i];

  WilcoxonResult res;
  res.w_stat = w_neg;
  res.n_used = static_cast<int>(n);

  if (n <= 12) {
    // exact two-sided p over the 2^n equiprobable sign assignments; doubled
    // ranks keep the distribution support integral under midrank ties
    res.exact = true;
    std::vector<int64_t> r2(n);
    int64_t total2 = 0;
    for (size_t i = 0; i < n; ++i) {
      r2[i] = static_cast<int64_t>(std::llround(2.0 * ranks[i]));
      total2 += r2[i];
    }
    std::vector<double> count(static_cast<size_t>(total2) + 1, 0.0);
    count[0] = 1.0;
    int64_t reach = 0;
    for (size_t i = 0; i < n; ++i) {
      reach += r2[i];
      for (int64_t s = reach; s >= r2[i]; --s) count[static_cast<size_t>(s)] += count[static_cast<size_t>(s - r2[i])];
    }
    const double denom = std::pow(2.0, static_cast<double>(n));
    const int64_t w2 = static_cast<int64_t>(std::llround(2.0 * w_neg));
    double le = 0, ge = 0;
    for (int64_t s = 0; s <= total2; ++s) {
      if (s <= w2) le += count[static_cast<size_t>(s)];
      if (s >= w2) ge += count[static_cast<size_t>(s)];
    }
    res.p = std::min(1.0, 2.0 * std::min(le, ge) / denom);
  } else {
    // normal approximation with tie correction
    double tie_term = 0;
    std::vector<double> sorted(absd);
    std::sort(sorted.begin(), sorted.end());
    size_t i = 0;
    while (i < sorted.size()) {
      size_t j = i;
      while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie_term += t * t * t - t;
      i = j + 1;
    }
    const double dn = static_cast<double>(n);
    const double mean = dn * (dn + 1.0) / 4.0;
    const double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0) throw StatError("wilcoxon: zero variance after tie correction");
    const double z = (w_neg - mean) / std::sqrt(var);
    res.p = std::min(1.0, 2.0 * normal_upper_tail(std::fabs(z)));
  }
  return res;
}

// ----------------------------- Holm -----------------------------

std::vector<double> holm_adjust(std::span<const double> p_values) {
  const size_t m = p_values.size();
  for (const double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) throw StatError("holm_adjust: p-value outside [0,1]");
  }
  std::vector<size_t> order(m);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return p_values[a] < p_values[b]; });
  std::vector<double> adjusted(m);
  double running = 0;
  for (size_t i = 0; i < m; ++i) {
    const double adj = static_cast<double>(m - i) * p_values[order[i]];
    running = std::max(running, adj);
    adjusted[order[i]] = std::min(1.0, running);
  }
  return adjusted;
}

// ----------------------------- model comparison -----------------------------

StatReport compare_models(const std::vector<std::vector<double>>& accuracy_vectors,
                          std::vector<std::string> model_names, double alpha) {
  const size_t k = accuracy_vectors.size();
  if (k < 2) throw ProtocolError("compare_models: need at least 2 models");
  const size_t n = accuracy_vectors.front().size();
  for (const auto& v : accuracy_vectors) {
    if (v.size() != n) throw ProtocolError("compare_models: accuracy vectors are not subject-aligned");
  }
  if (n < 3) throw ProtocolError("compare_models: need at least 3 subjects");
  if (model_names.size() != k) {
    model_names.clear();
    for (size_t i = 0; i < k; ++i) model_names.push_back("model" + std::to_string(i));
  }

  StatReport rep;
  rep.model_names = std::move(model_names);
  rep.alpha = alpha;
  for (const auto& v : accuracy_vectors) rep.normality.push_back(shapiro_wilk(v));

  std::vector<std::vector<double>> blocks(n, std::vector<double>(k));
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < k; ++j) blocks[i][j] = accuracy_vectors[j][i];
  }
  rep.omnibus = friedman(blocks);

  if (rep.omnibus.p < alpha) {
    rep.posthoc_run = true;
    std::vector<size_t> testable;
    std::vector<double> raw;
    for (size_t a = 0; a < k; ++a) {
      for (size_t b = a + 1; b < k; ++b) {
        PairwiseResult pr;
        pr.model_a = static_cast<int>(a);
        pr.model_b = static_cast<int>(b);
        try {
          const auto wr = wilcoxon_signed_rank(accuracy_vectors[a], accuracy_vectors[b]);
          pr.statistic = wr.w_stat;
          pr.p_raw = wr.p;
          testable.push_back(rep.pairwise.size());
          raw.push_back(wr.p);
        } catch (const StatError&) {
          // identical vectors: no difference detectable
          pr.degenerate = true;
          pr.statistic = 0;
          pr.p_raw = std::numeric_limits<double>::quiet_NaN();
          pr.p_adjusted = std::numeric_limits<double>::quiet_NaN();
        }
        rep.pairwise.push_back(pr);
      }
    }
    const auto adjusted = holm_adjust(raw);
    for (size_t i = 0; i < testable.size(); ++i) rep.pairwise[testable[i]].p_adjusted = adjusted[i];
  }
  return rep;
}

std::string stat_report_json(const StatReport& report) {
  nlohmann::json j;
  j["alpha"] = report.alpha;
  j["models"] = report.model_names;
  nlohmann::json normality = nlohmann::json::array();
  for (size_t i = 0; i < report.normality.size(); ++i) {
    normality.push_back({{"model", report.model_names[i]},
                         {"W", report.normality[i].w},
                         {"p", report.normality[i].p}});
  }
  j["normality"] = normality;
  j["omnibus"] = {{"test", "friedman"},
                  {"chi2", report.omnibus.chi2},
                  {"df", report.omnibus.df},
                  {"p", report.omnibus.p}};
  j["posthoc_run"] = report.posthoc_run;
  nlohmann::json pairwise = nlohmann::json::array();
  for (const auto& pr : report.pairwise) {
    nlohmann::json e;
    e["a"] = report.model_names[static_cast<size_t>(pr.model_a)];
    e["b"] = report.model_names[static_cast<size_t>(pr.model_b)];
    e["test"] = "wilcoxon_signed_rank_holm";
    e["degenerate"] = pr.degenerate;
    if (pr.degenerate) {
      e["note"] = "no difference detectable (all paired differences zero)";
      e["statistic"] = nullptr;
      e["p_raw"] = nullptr;
      e["p_adjusted"] = nullptr;
    } else {
      e["statistic"] = pr.statistic;
      e["p_raw"] = pr.p_raw;
      e["p_adjusted"] = pr.p_adjusted;
    }
    pairwise.push_back(e);
  }
  j["pairwise"] = pairwise;
  return j.dump(2) + "\n";
}

}  // namespace mibci
