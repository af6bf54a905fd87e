#pragma once

// Paired-statistics battery: relative change, BCa bootstrap intervals,
// normality screen, paired tests, multi-level tests with Holm correction,
// effect sizes and rank correlations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "capaudit/error.hpp"
#include "capaudit/rng.hpp"

namespace capaudit::stats {

// Bases closer to zero than this (on the normalized score range) make the
// relative change meaningless; such items are excluded and counted.
inline constexpr double kMinBase = 1e-6;
inline constexpr std::size_t kDefaultResamples = 10000;
inline constexpr std::uint64_t kDefaultSeed = 2025;
inline constexpr double kNormalityAlpha = 0.05;

inline double normal_cdf(double z) {
  return boost::math::cdf(boost::math::normal_distribution<double>(), z);
}

inline double normal_sf(double z) {
  return boost::math::cdf(
      boost::math::complement(boost::math::normal_distribution<double>(), z));
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

// ---------------------------------------------------------------------------
// Descriptive helpers

inline double median(std::vector<double> values) {
  if (values.empty()) throw InsufficientData("median of empty sample");
  const std::size_t n = values.size();
  const std::size_t mid = n / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double upper = values[mid];
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lower + upper);
}

inline double median(std::span<const double> values) {
  return median(std::vector<double>(values.begin(), values.end()));
}

inline double mean(std::span<const double> values) {
  if (values.empty()) throw InsufficientData("mean of empty sample");
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(values.size());
}

// Linear-interpolation quantile of an ascending-sorted sample (R type 7).
inline double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw InsufficientData("quantile of empty sample");
  q = std::clamp(q, 0.0, 1.0);
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Average (fractional) ranks, 1-based; ties share the mean of their ranks.
inline std::vector<double> average_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// Sizes of tie groups (only groups of size >= 2 matter to corrections).
inline std::vector<std::size_t> tie_sizes(std::span<const double> x) {
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  std::vector<std::size_t> out;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t j = i;
    while (j + 1 < s.size() && s[j + 1] == s[i]) ++j;
    if (j > i) out.push_back(j - i + 1);
    i = j + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Relative change

inline double pct_delta(double s_orig, double s_pert) {
  if (!(std::abs(s_orig) > kMinBase)) {
    throw DegenerateBase("base score " + std::to_string(s_orig) +
                         " is within the minimum-base guard");
  }
  return 100.0 * (s_pert - s_orig) / s_orig;
}

// ---------------------------------------------------------------------------
// Bootstrap

using Statistic = std::function<double(std::span<const double>)>;

inline double median_statistic(std::span<const double> x) { return median(x); }

struct BootstrapCI {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n_resamples = 0;
  std::uint64_t seed = 0;
};

// Replicate b draws its indices from its own stream derive_seed(seed, b),
// visiting positions in the given (canonical) sample order, so replicates
// can be computed in any order or in parallel with identical results.
inline std::vector<double> bootstrap_replicates(std::span<const double> sample,
                                                const Statistic& statistic,
                                                std::size_t n_resamples,
                                                std::uint64_t seed) {
  const std::size_t n = sample.size();
  std::vector<double> replicates(n_resamples);
  std::vector<double> resample(n);
  for (std::size_t b = 0; b < n_resamples; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    for (std::size_t i = 0; i < n; ++i) resample[i] = sample[rng.below(n)];
    replicates[b] = statistic(resample);
  }
  return replicates;
}

// Leave-one-out statistics.
inline std::vector<double> jackknife(std::span<const double> sample,
                                     const Statistic& statistic) {
  const std::size_t n = sample.size();
  std::vector<double> out(n);
  std::vector<double> loo;
  loo.reserve(n > 0 ? n - 1 : 0);
  for (std::size_t i = 0; i < n; ++i) {
    loo.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) loo.push_back(sample[j]);
    }
    out[i] = statistic(loo);
  }
  return out;
}

// Bias-corrected and accelerated interval from precomputed replicates.
//   z0 = Phi^-1(#{theta*_b < theta_hat} / B)
//   a  = sum (mean_J - theta_(i))^3 / (6 [sum (mean_J - theta_(i))^2]^1.5)
// When the fraction below is 0 or 1, z0 is undefined and plain percentile
// endpoints are returned.
inline std::pair<double, double> bca_interval(double point,
                                              std::vector<double> replicates,
                                              std::span<const double> jack,
                                              double level = 0.95) {
  if (replicates.empty()) throw InsufficientData("no bootstrap replicates");
  std::sort(replicates.begin(), replicates.end());
  const double alpha = 0.5 * (1.0 - level);
  const auto below = static_cast<double>(
      std::lower_bound(replicates.begin(), replicates.end(), point) -
      replicates.begin());
  const double frac = below / static_cast<double>(replicates.size());
  if (frac <= 0.0 || frac >= 1.0) {
    return {sorted_quantile(replicates, alpha),
            sorted_quantile(replicates, 1.0 - alpha)};
  }
  const double z0 = normal_quantile(frac);

  double accel = 0.0;
  if (!jack.empty()) {
    const double jbar =
        std::accumulate(jack.begin(), jack.end(), 0.0) / static_cast<double>(jack.size());
    double num = 0.0;
    double den = 0.0;
    for (double v : jack) {
      const double d = jbar - v;
      num += d * d * d;
      den += d * d;
    }
    if (den > 0.0) accel = num / (6.0 * std::pow(den, 1.5));
  }

  auto adjusted = [&](double a_level) {
    const double z = normal_quantile(a_level);
    const double shifted = z0 + (z0 + z) / (1.0 - accel * (z0 + z));
    return normal_cdf(shifted);
  };
  return {sorted_quantile(replicates, adjusted(alpha)),
          sorted_quantile(replicates, adjusted(1.0 - alpha))};
}

inline BootstrapCI bca_ci(std::span<const double> sample,
                          const Statistic& statistic = median_statistic,
                          std::size_t n_resamples = kDefaultResamples,
                          std::uint64_t seed = kDefaultSeed, double level = 0.95) {
  if (sample.size() < 3) {
    throw InsufficientData("BCa interval needs at least 3 samples, got " +
                           std::to_string(sample.size()));
  }
  BootstrapCI ci;
  ci.n_resamples = n_resamples;
  ci.seed = seed;
  ci.point = statistic(sample);
  const bool constant =
      std::all_of(sample.begin(), sample.end(), [&](double v) { return v == sample[0]; });
  if (constant) {
    ci.lo = ci.hi = ci.point;
    return ci;
  }
  auto replicates = bootstrap_replicates(sample, statistic, n_resamples, seed);
  const auto jack = jackknife(sample, statistic);
  std::tie(ci.lo, ci.hi) = bca_interval(ci.point, std::move(replicates), jack, level);
  return ci;
}

// ---------------------------------------------------------------------------
// Tests

enum class TestKind { kShapiroWilk, kPairedT, kWilcoxon, kKruskalWallis, kNone };

inline std::string test_name(TestKind kind) {
  switch (kind) {
    case TestKind::kShapiroWilk: return "shapiro_wilk";
    case TestKind::kPairedT: return "paired_t";
    case TestKind::kWilcoxon: return "wilcoxon";
    case TestKind::kKruskalWallis: return "kruskal_wallis";
    case TestKind::kNone: return "none";
  }
  return "none";
}

struct TestResult {
  TestKind test = TestKind::kNone;
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  std::size_t n_dropped = 0;  // zero deltas removed (Wilcoxon only)
};

namespace detail {

inline double poly(std::span<const double> c, double x) {
  double result = 0.0;
  for (std::size_t i = c.size(); i-- > 0;) result = result * x + c[i];
  return result;
}

}  // namespace detail

// Shapiro-Wilk W with Royston's (1995) coefficient and p-value
// approximations.
inline TestResult shapiro_wilk(std::span<const double> sample) {
  const std::size_t n = sample.size();
  if (n < 3) throw InsufficientData("Shapiro-Wilk needs n >= 3");
  if (n > 5000) throw DomainError("Shapiro-Wilk supports n <= 5000");
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  if (x.back() - x.front() < 1e-19 * std::max(1.0, std::abs(x.front()))) {
    throw DegenerateSample("Shapiro-Wilk on a constant sample");
  }

  static constexpr double c1[] = {0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056};
  static constexpr double c2[] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633};
  static constexpr double c3[] = {0.544, -0.39978, 0.025054, -6.714e-4};
  static constexpr double c4[] = {1.3822, -0.77857, 0.062767, -0.0020322};
  static constexpr double c5[] = {-1.5861, -0.31082, -0.083751, 0.0038915};
  static constexpr double c6[] = {-0.4803, -0.082676, 0.0030302};
  static constexpr double g[] = {-2.273, 0.459};

  const double an = static_cast<double>(n);
  std::vector<double> a(n, 0.0);
  if (n == 3) {
    a[0] = -std::sqrt(0.5);
    a[2] = std::sqrt(0.5);
  } else {
    std::vector<double> m(n);
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = normal_quantile((static_cast<double>(i + 1) - 0.375) / (an + 0.25));
    }
    double summ2 = 0.0;
    for (double v : m) summ2 += v * v;
    const double ssumm2 = std::sqrt(summ2);
    const double rsn = 1.0 / std::sqrt(an);
    const double a_last = detail::poly(c1, rsn) + m[n - 1] / ssumm2;
    double phi;
    std::size_t first_mid;
    if (n > 5) {
      const double a_second = detail::poly(c2, rsn) + m[n - 2] / ssumm2;
      phi = (summ2 - 2.0 * m[n - 1] * m[n - 1] - 2.0 * m[n - 2] * m[n - 2]) /
            (1.0 - 2.0 * a_last * a_last - 2.0 * a_second * a_second);
      a[n - 2] = a_second;
      a[1] = -a_second;
      first_mid = 2;
    } else {
      phi = (summ2 - 2.0 * m[n - 1] * m[n - 1]) / (1.0 - 2.0 * a_last * a_last);
      first_mid = 1;
    }
    a[n - 1] = a_last;
    a[0] = -a_last;
    const double root = std::sqrt(phi);
    for (std::size_t i = first_mid; i + first_mid < n; ++i) a[i] = m[i] / root;
  }

  const double xbar = std::accumulate(x.begin(), x.end(), 0.0) / an;
  double sxx = 0.0;
  double saa = 0.0;
  double sax = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - xbar) * (x[i] - xbar);
    saa += a[i] * a[i];
    sax += a[i] * (x[i] - xbar);
  }
  double w = (sax * sax) / (saa * sxx);
  w = std::min(w, 1.0);

  TestResult result{TestKind::kShapiroWilk, w, 1.0, n, 0};
  if (n == 3) {
    constexpr double pi6 = 1.90985931710274;  // 6/pi
    constexpr double stqr = 1.04719755119660;  // asin(sqrt(3/4))
    result.p_value = std::clamp(pi6 * (std::asin(std::sqrt(w)) - stqr), 0.0, 1.0);
    return result;
  }
  double y = std::log1p(-w);
  double mu;
  double sigma;
  if (n <= 11) {
    const double gamma = detail::poly(g, an);
    if (y >= gamma) {
      result.p_value = 1e-99;
      return result;
    }
    y = -std::log(gamma - y);
    mu = detail::poly(c3, an);
    sigma = std::exp(detail::poly(c4, an));
  } else {
    const double xx = std::log(an);
    mu = detail::poly(c5, xx);
    sigma = std::exp(detail::poly(c6, xx));
  }
  result.p_value = std::clamp(normal_sf((y - mu) / sigma), 0.0, 1.0);
  return result;
}

inline TestResult paired_t(std::span<const double> deltas) {
  const std::size_t n = deltas.size();
  if (n < 2) throw InsufficientData("paired t-test needs n >= 2");
  const double m = mean(deltas);
  double ss = 0.0;
  for (double d : deltas) ss += (d - m) * (d - m);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) throw DegenerateSample("paired t-test with zero variance");
  const double t = m / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t_distribution<double> dist(static_cast<double>(n - 1));
  const double p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  return {TestKind::kPairedT, t, std::min(1.0, p), n, 0};
}

// Exact null distribution of the doubled signed-rank sum W+ (ranks may be
// half-integers under ties, so they are doubled to stay integral). Entry s
// holds the number of sign patterns giving 2*W+ == s.
inline std::vector<double> signed_rank_null_counts(std::span<const long> doubled_ranks) {
  long total = 0;
  for (long r : doubled_ranks) total += r;
  std::vector<double> counts(static_cast<std::size_t>(total) + 1, 0.0);
  counts[0] = 1.0;
  long reach = 0;
  for (long r : doubled_ranks) {
    for (long s = reach; s >= 0; --s) {
      const double c = counts[static_cast<std::size_t>(s)];
      if (c != 0.0) counts[static_cast<std::size_t>(s + r)] += c;
    }
    reach += r;
  }
  return counts;
}

inline constexpr std::size_t kWilcoxonExactMax = 25;

// Wilcoxon signed-rank test. Zero deltas are dropped (and counted).
// Exact enumeration of the null for n <= 25, normal approximation with tie
// correction above. Statistic reported is W+ (sum of positive ranks).
inline TestResult wilcoxon_signed_rank(std::span<const double> deltas,
                                       bool two_sided = true) {
  std::vector<double> d;
  d.reserve(deltas.size());
  for (double v : deltas) {
    if (v != 0.0) d.push_back(v);
  }
  const std::size_t n = d.size();
  const std::size_t dropped = deltas.size() - n;
  if (n == 0) throw DegenerateSample("all Wilcoxon deltas are zero");

  std::vector<double> mags(n);
  for (std::size_t i = 0; i < n; ++i) mags[i] = std::abs(d[i]);
  const auto ranks = average_ranks(mags);
  double w_plus = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (d[i] > 0.0) w_plus += ranks[i];
  }

  TestResult result{TestKind::kWilcoxon, w_plus, 1.0, n, dropped};
  if (n <= kWilcoxonExactMax) {
    std::vector<long> doubled(n);
    for (std::size_t i = 0; i < n; ++i) doubled[i] = std::lround(2.0 * ranks[i]);
    const auto counts = signed_rank_null_counts(doubled);
    const long observed = std::lround(2.0 * w_plus);
    const double total = std::ldexp(1.0, static_cast<int>(n));
    double lower = 0.0;
    double upper = 0.0;
    for (std::size_t s = 0; s < counts.size(); ++s) {
      if (static_cast<long>(s) <= observed) lower += counts[s];
      if (static_cast<long>(s) >= observed) upper += counts[s];
    }
    lower /= total;
    upper /= total;
    result.p_value = two_sided ? std::min(1.0, 2.0 * std::min(lower, upper)) : upper;
    return result;
  }

  const double nn = static_cast<double>(n);
  const double expected = nn * (nn + 1.0) / 4.0;
  double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
  for (std::size_t t : tie_sizes(mags)) {
    const double tt = static_cast<double>(t);
    var -= (tt * tt * tt - tt) / 48.0;
  }
  if (!(var > 0.0)) throw DegenerateSample("Wilcoxon variance is zero");
  const double z = (w_plus - expected) / std::sqrt(var);
  result.p_value = two_sided ? std::min(1.0, 2.0 * normal_sf(std::abs(z))) : normal_sf(z);
  return result;
}

// Kruskal-Wallis H with tie correction; p from chi-square with k-1 df.
inline TestResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw InsufficientData("Kruskal-Wallis needs >= 2 groups");
  std::vector<double> pooled;
  for (const auto& g : groups) {
    if (g.size() < 2) throw InsufficientData("Kruskal-Wallis groups need >= 2 observations");
    pooled.insert(pooled.end(), g.begin(), g.end());
  }
  const auto ranks = average_ranks(pooled);
  const double big_n = static_cast<double>(pooled.size());
  double sum_term = 0.0;
  std::size_t offset = 0;
  for (const auto& g : groups) {
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) rank_sum += ranks[offset + i];
    sum_term += rank_sum * rank_sum / static_cast<double>(g.size());
    offset += g.size();
  }
  double h = 12.0 / (big_n * (big_n + 1.0)) * sum_term - 3.0 * (big_n + 1.0);
  double ties = 0.0;
  for (std::size_t t : tie_sizes(pooled)) {
    const double tt = static_cast<double>(t);
    ties += tt * tt * tt - tt;
  }
  const double correction = 1.0 - ties / (big_n * big_n * big_n - big_n);
  TestResult result{TestKind::kKruskalWallis, 0.0, 1.0, pooled.size(), 0};
  if (correction <= 0.0) return result;  // every observation tied
  h = std::max(0.0, h / correction);
  result.statistic = h;
  const boost::math::chi_squared_distribution<double> chi(static_cast<double>(groups.size() - 1));
  result.p_value = h == 0.0 ? 1.0 : boost::math::cdf(boost::math::complement(chi, h));
  return result;
}

// Holm step-down adjustment, returned in input order.
inline std::vector<double> holm_adjust(std::span<const double> p_values) {
  const std::size_t m = p_values.size();
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("p-value outside [0,1]");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p_values[a] < p_values[b];
  });
  std::vector<double> adjusted(m);
  double running = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const double scaled = std::min(1.0, static_cast<double>(m - k) * p_values[order[k]]);
    running = std::max(running, scaled);
    adjusted[order[k]] = running;
  }
  return adjusted;
}

// Cliff's delta via sorting: (#{a > b} - #{a < b}) / (|a||b|).
inline double cliffs_delta(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw InsufficientData("Cliff's delta needs nonempty samples");
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sb.begin(), sb.end());
  long long dominance = 0;
  for (double v : a) {
    const auto less = std::lower_bound(sb.begin(), sb.end(), v) - sb.begin();
    const auto greater = sb.end() - std::upper_bound(sb.begin(), sb.end(), v);
    dominance += static_cast<long long>(less) - static_cast<long long>(greater);
  }
  return static_cast<double>(dominance) /
         (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

enum class RankCorrKind { kSpearman, kKendall };

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw DegenerateSample("correlation of a constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

namespace detail {

// Merge sort counting strict inversions (pairs i<j with v[i] > v[j]).
inline long long count_inversions(std::vector<double>& v, std::vector<double>& buf,
                                  std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  long long swaps = count_inversions(v, buf, lo, mid) + count_inversions(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += static_cast<long long>(mid - i);
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<long>(lo), buf.begin() + static_cast<long>(hi),
            v.begin() + static_cast<long>(lo));
  return swaps;
}

inline long long tied_pairs(std::span<const double> sorted) {
  long long pairs = 0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const auto t = static_cast<long long>(j - i + 1);
    pairs += t * (t - 1) / 2;
    i = j + 1;
  }
  return pairs;
}

}  // namespace detail

// Kendall tau-b by Knight's O(n log n) algorithm.
inline double kendall_tau_b(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = x[order[i]];
    ys[i] = y[order[i]];
  }
  const long long total = static_cast<long long>(n) * static_cast<long long>(n - 1) / 2;
  const long long x_ties = detail::tied_pairs(xs);
  long long joint_ties = 0;
  {
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && xs[j + 1] == xs[i] && ys[j + 1] == ys[i]) ++j;
      const auto t = static_cast<long long>(j - i + 1);
      joint_ties += t * (t - 1) / 2;
      i = j + 1;
    }
  }
  std::vector<double> buf(n);
  const long long swaps = detail::count_inversions(ys, buf, 0, n);
  const long long y_ties = detail::tied_pairs(ys);  // ys is now sorted
  const double denom = std::sqrt(static_cast<double>(total - x_ties) *
                                 static_cast<double>(total - y_ties));
  if (!(denom > 0.0)) throw DegenerateSample("Kendall tau of a constant input");
  const double concordant_minus_discordant =
      static_cast<double>(total - x_ties - y_ties + joint_ties - 2 * swaps);
  return std::clamp(concordant_minus_discordant / denom, -1.0, 1.0);
}

inline double rank_corr(std::span<const double> x, std::span<const double> y,
                        RankCorrKind kind) {
  if (x.size() != y.size()) throw InputError("rank correlation inputs differ in length");
  if (x.size() < 3) throw InsufficientData("rank correlation needs n >= 3");
  return kind == RankCorrKind::kSpearman ? spearman(x, y) : kendall_tau_b(x, y);
}

// ---------------------------------------------------------------------------
// Per-cell protocol

struct PairedSample {
  std::string item_id;
  double s_orig = 0.0;
  double s_pert = 0.0;
};

struct PipelineOptions {
  std::size_t n_resamples = kDefaultResamples;
  std::uint64_t seed = kDefaultSeed;
  double level = 0.95;
};

// One evaluator x dataset x family row of the report.
struct ReportCell {
  std::string scorer_id;
  std::string dataset;
  std::string family;
  std::size_t n = 0;
  std::size_t n_excluded = 0;  // degenerate bases
  double median = std::numeric_limits<double>::quiet_NaN();
  double ci_lo = std::numeric_limits<double>::quiet_NaN();
  double ci_hi = std::numeric_limits<double>::quiet_NaN();
  double cliffs_delta = std::numeric_limits<double>::quiet_NaN();
  std::string test = "none";
  double statistic = std::numeric_limits<double>::quiet_NaN();
  double p_value = std::numeric_limits<double>::quiet_NaN();
  double p_holm = std::numeric_limits<double>::quiet_NaN();
  bool normal = false;
  std::string status = "ok";
  std::string detail;
  std::vector<double> pct_deltas;  // canonical (item_id) order

  bool ok() const { return status == "ok"; }
  double half_width() const { return 0.5 * (ci_hi - ci_lo); }
};

// Median %delta with BCa CI, normality screen, t or Wilcoxon, Cliff's delta.
// Component failures are recorded on the cell instead of thrown.
inline ReportCell paired_pipeline(std::string scorer_id, std::string dataset,
                                  std::string family, std::vector<PairedSample> samples,
                                  const PipelineOptions& options = {}) {
  ReportCell cell;
  cell.scorer_id = std::move(scorer_id);
  cell.dataset = std::move(dataset);
  cell.family = std::move(family);
  std::sort(samples.begin(), samples.end(),
            [](const PairedSample& a, const PairedSample& b) { return a.item_id < b.item_id; });

  std::vector<double> orig, pert, raw;
  for (const auto& s : samples) {
    try {
      cell.pct_deltas.push_back(pct_delta(s.s_orig, s.s_pert));
    } catch (const DegenerateBase&) {
      ++cell.n_excluded;
      continue;
    }
    orig.push_back(s.s_orig);
    pert.push_back(s.s_pert);
    raw.push_back(s.s_pert - s.s_orig);
  }
  cell.n = cell.pct_deltas.size();

  try {
    const auto ci = bca_ci(cell.pct_deltas, median_statistic, options.n_resamples,
                           options.seed, options.level);
    cell.median = ci.point;
    cell.ci_lo = ci.lo;
    cell.ci_hi = ci.hi;
    cell.cliffs_delta = cliffs_delta(pert, orig);
  } catch (const Error& e) {
    cell.status = std::string(kind_name(e.kind()));
    cell.detail = e.what();
    return cell;
  }

  try {
    cell.normal = shapiro_wilk(orig).p_value > kNormalityAlpha &&
                  shapiro_wilk(pert).p_value > kNormalityAlpha;
  } catch (const Error&) {
    cell.normal = false;
  }
  try {
    const TestResult t = cell.normal ? paired_t(raw) : wilcoxon_signed_rank(raw);
    cell.test = test_name(t.test);
    cell.statistic = t.statistic;
    cell.p_value = t.p_value;
  } catch (const Error& e) {
    // All-zero deltas: no evidence of a shift.
    cell.test = test_name(TestKind::kNone);
    cell.p_value = 1.0;
    cell.detail = e.what();
  }
  return cell;
}

// Holm adjustment across the ok cells of each scorer.
inline void apply_holm(std::vector<ReportCell>& cells) {
  std::vector<std::string> scorers;
  for (const auto& c : cells) {
    if (std::find(scorers.begin(), scorers.end(), c.scorer_id) == scorers.end()) {
      scorers.push_back(c.scorer_id);
    }
  }
  for (const auto& scorer : scorers) {
    std::vector<std::size_t> idx;
    std::vector<double> ps;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].scorer_id == scorer && cells[i].ok() && !std::isnan(cells[i].p_value)) {
        idx.push_back(i);
        ps.push_back(cells[i].p_value);
      }
    }
    const auto adj = holm_adjust(ps);
    for (std::size_t k = 0; k < idx.size(); ++k) cells[idx[k]].p_holm = adj[k];
  }
}

// Kruskal-Wallis across the levels of a multi-level factor (anchors, size
// bins, categories, modifier families).
struct FactorTest {
  std::string scorer_id;
  std::string dataset;
  std::string family;
  std::string factor;
  std::vector<std::string> levels;
  double statistic = std::numeric_limits<double>::quiet_NaN();
  double p_value = std::numeric_limits<double>::quiet_NaN();
  double p_holm = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
};

inline FactorTest factor_test(std::string scorer_id, std::string dataset, std::string family,
                              std::string factor,
                              const std::vector<std::pair<std::string, std::vector<double>>>& groups) {
  FactorTest out{std::move(scorer_id), std::move(dataset), std::move(family), std::move(factor),
                 {}, std::numeric_limits<double>::quiet_NaN(),
                 std::numeric_limits<double>::quiet_NaN(),
                 std::numeric_limits<double>::quiet_NaN(), "ok"};
  std::vector<std::vector<double>> data;
  for (const auto& [level, values] : groups) {
    if (values.size() < 2) continue;
    out.levels.push_back(level);
    data.push_back(values);
  }
  try {
    const auto r = kruskal_wallis(data);
    out.statistic = r.statistic;
    out.p_value = r.p_value;
  } catch (const Error& e) {
    out.status = std::string(kind_name(e.kind()));
  }
  return out;
}

inline void apply_holm(std::vector<FactorTest>& tests) {
  std::vector<std::size_t> idx;
  std::vector<double> ps;
  for (std::size_t i = 0; i < tests.size(); ++i) {
    if (tests[i].status == "ok") {
      idx.push_back(i);
      ps.push_back(tests[i].p_value);
    }
  }
  const auto adj = holm_adjust(ps);
  for (std::size_t k = 0; k < idx.size(); ++k) tests[idx[k]].p_holm = adj[k];
}

}  // namespace capaudit::stats
