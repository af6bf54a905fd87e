#pragma once

// Test-only reference implementations. These are deliberately written along
// a different route from the library code (brute force, O(n^2) counting,
// full enumeration, hand-rolled normal functions) and must not include any
// capaudit statistics header.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "capaudit/error.hpp"
#include "capaudit/rng.hpp"

namespace capaudit::oracle {

// Rank by counting: rank = 1 + #less + (#equal - 1) / 2.
inline std::vector<double> count_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double v : x) {
      if (v < x[i]) less += 1;
      if (v == x[i]) equal += 1;
    }
    r[i] = 1.0 + less + (equal - 1.0) / 2.0;
  }
  return r;
}

inline double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Acklam's rational approximation polished with two Newton steps.
inline double phi_inv(double p) {
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00, 2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  double x;
  if (p < 0.02425) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p > 1 - 0.02425) {
    const double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  }
  for (int it = 0; it < 3; ++it) {
    const double err = phi(x) - p;
    const double dens = std::exp(-0.5 * x * x) / std::sqrt(2 * M_PI);
    x -= err / dens;
  }
  return x;
}

inline double sorted_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double plain_mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

struct RefInterval {
  double point, lo, hi;
};

template <class Stat>
RefInterval reference_bca(const std::vector<double>& x, std::size_t n_boot, std::uint64_t seed,
                          double level, Stat stat) {
  const std::size_t n = x.size();
  const double theta = stat(x);
  std::vector<double> boots;
  std::vector<double> re(n);
  for (std::size_t b = 0; b < n_boot; ++b) {
    // Same documented index stream as the library: one generator per replicate.
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    for (std::size_t i = 0; i < n; ++i) re[i] = x[rng.below(n)];
    boots.push_back(stat(re));
  }
  std::sort(boots.begin(), boots.end());
  double count_below = 0;
  for (double v : boots) count_below += (v < theta) ? 1 : 0;
  const double z0 = phi_inv(count_below / static_cast<double>(n_boot));

  std::vector<double> jack;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> loo;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) loo.push_back(x[j]);
    jack.push_back(stat(loo));
  }
  const double jm = plain_mean(jack);
  double num = 0, den = 0;
  for (double v : jack) {
    num += std::pow(jm - v, 3);
    den += std::pow(jm - v, 2);
  }
  const double acc = den > 0 ? num / (6 * std::pow(den, 1.5)) : 0.0;

  auto at = [&](double q) {
    // Type-7 quantile.
    const double h = q * static_cast<double>(n_boot - 1);
    const double fl = std::floor(h);
    const auto k = static_cast<std::size_t>(fl);
    const std::size_t k1 = std::min(k + 1, n_boot - 1);
    return boots[k] + (h - fl) * (boots[k1] - boots[k]);
  };
  const double za = phi_inv((1 - level) / 2);
  const double zb = phi_inv(1 - (1 - level) / 2);
  const double a1 = phi(z0 + (z0 + za) / (1 - acc * (z0 + za)));
  const double a2 = phi(z0 + (z0 + zb) / (1 - acc * (z0 + zb)));
  return {theta, at(a1), at(a2)};
}

inline RefInterval reference_bca_median(const std::vector<double>& x, std::size_t n_boot,
                                        std::uint64_t seed, double level) {
  return reference_bca(x, n_boot, seed, level, sorted_median);
}

inline RefInterval reference_bca_mean(const std::vector<double>& x, std::size_t n_boot,
                                      std::uint64_t seed, double level) {
  return reference_bca(x, n_boot, seed, level, plain_mean);
}

// Two-sided Wilcoxon p by walking all 2^n sign patterns of |d| ranks.
inline double wilcoxon_enumerated_p(const std::vector<double>& deltas) {
  std::vector<double> d;
  for (double v : deltas)
    if (v != 0) d.push_back(v);
  const std::size_t n = d.size();
  std::vector<double> mags;
  for (double v : d) mags.push_back(std::fabs(v));
  const auto r = count_ranks(mags);
  double observed = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0) observed += r[i];
  double le = 0, ge = 0;
  const std::uint64_t patterns = std::uint64_t{1} << n;
  for (std::uint64_t mask = 0; mask < patterns; ++mask) {
    double w = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) w += r[i];
    if (w <= observed + 1e-9) le += 1;
    if (w >= observed - 1e-9) ge += 1;
  }
  const double total = static_cast<double>(patterns);
  return std::min(1.0, 2 * std::min(le / total, ge / total));
}

inline double wilcoxon_normal_p(const std::vector<double>& deltas) {
  std::vector<double> d;
  for (double v : deltas)
    if (v != 0) d.push_back(v);
  const double n = static_cast<double>(d.size());
  std::vector<double> mags;
  for (double v : d) mags.push_back(std::fabs(v));
  const auto r = count_ranks(mags);
  double w = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0) w += r[i];
  double tie_term = 0;
  std::vector<double> seen;
  for (double m : mags) {
    if (std::find(seen.begin(), seen.end(), m) != seen.end()) continue;
    seen.push_back(m);
    const double t = static_cast<double>(std::count(mags.begin(), mags.end(), m));
    tie_term += t * t * t - t;
  }
  const double var = n * (n + 1) * (2 * n + 1) / 24 - tie_term / 48;
  const double z = (w - n * (n + 1) / 4) / std::sqrt(var);
  return std::erfc(std::fabs(z) / std::sqrt(2.0));
}

inline double kruskal_hand(const std::vector<std::vector<double>>& groups) {
  std::vector<double> all;
  for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
  const auto r = count_ranks(all);
  const double n = static_cast<double>(all.size());
  double acc = 0;
  std::size_t k = 0;
  for (const auto& g : groups) {
    double rs = 0;
    for (std::size_t i = 0; i < g.size(); ++i) rs += r[k++];
    acc += rs * rs / static_cast<double>(g.size());
  }
  double h = 12 / (n * (n + 1)) * acc - 3 * (n + 1);
  double tie_term = 0;
  std::vector<double> seen;
  for (double v : all) {
    if (std::find(seen.begin(), seen.end(), v) != seen.end()) continue;
    seen.push_back(v);
    const double t = static_cast<double>(std::count(all.begin(), all.end(), v));
    tie_term += t * t * t - t;
  }
  return h / (1 - tie_term / (n * n * n - n));
}

// Step-down Holm: adjusted p_(i) = max_{j <= i} min(1, (m - j + 1) p_(j)).
inline std::vector<double> holm_hand(const std::vector<double>& p) {
  const std::size_t m = p.size();
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] < p[b]; });
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double best = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      best = std::max(best, std::min(1.0, static_cast<double>(m - j) * p[idx[j]]));
    }
    out[idx[i]] = best;
  }
  return out;
}

inline double cliffs_brute(const std::vector<double>& a, const std::vector<double>& b) {
  long long gt = 0, lt = 0;
  for (double x : a)
    for (double y : b) {
      if (x > y) ++gt;
      if (x < y) ++lt;
    }
  return static_cast<double>(gt - lt) / static_cast<double>(a.size() * b.size());
}

inline double kendall_tau_b_pairs(const std::vector<double>& x, const std::vector<double>& y) {
  long long conc = 0, disc = 0, tx = 0, ty = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      if (dx == 0 && dy == 0) continue;
      if (dx == 0) {
        ++tx;
      } else if (dy == 0) {
        ++ty;
      } else if ((dx > 0) == (dy > 0)) {
        ++conc;
      } else {
        ++disc;
      }
    }
  const double den = std::sqrt(static_cast<double>(conc + disc + tx) *
                               static_cast<double>(conc + disc + ty));
  if (den == 0) throw DegenerateSample("constant input");
  return static_cast<double>(conc - disc) / den;
}

}  // namespace capaudit::oracle
