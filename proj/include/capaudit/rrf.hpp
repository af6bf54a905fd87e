#pragma once

// Risk of Ranking Flip under the fixed-gap stress test: the chance that two
// independent draws from the empirical shift distribution differ by more
// than a gap d.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "capaudit/error.hpp"
#include "capaudit/rng.hpp"
#include "capaudit/stats.hpp"
#include "capaudit/util.hpp"

namespace capaudit::rrf {

inline constexpr std::array<double, 4> kDefaultGaps = {0.3, 0.5, 0.7, 1.0};  // percent
inline constexpr std::size_t kMinResamples = 1000;

struct ShiftSample {
  std::string item_id;
  std::string family;
  std::string scorer_id;
  double delta = 0.0;  // raw score units
};

// Ordered pairs (i, j) of the sorted sample with s[j] - s[i] > d and a
// nonzero difference. For fixed i the floating difference is monotone in
// s[j], so a partition point gives exactly the brute-force count.
inline long long count_exceedances(std::span<const double> sorted, double d) {
  long long count = 0;
  const auto n = sorted.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double si = sorted[i];
    const auto first = std::partition_point(sorted.begin(), sorted.end(),
                                            [&](double sj) { return !(sj - si > d); });
    count += sorted.end() - first;
    if (d < 0) {
      // Equal values pass "> d" when d is negative but are not flips.
      const auto [lo, hi] = std::equal_range(sorted.begin(), sorted.end(), si);
      count -= hi - lo;
    }
  }
  return count;
}

inline double rrf_exhaustive(std::span<const double> shifts, double d) {
  if (shifts.empty()) throw InsufficientData("RRF needs at least one shift");
  std::vector<double> s(shifts.begin(), shifts.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  return static_cast<double>(count_exceedances(s, d)) / (n * n);
}

struct RRFEstimate {
  double d_pct = 0.0;
  double d_raw = 0.0;
  std::string family;
  std::string scorer_id;
  double rrf = 0.0;
  double lo = 0.0, hi = 0.0;
  double exhaustive = 0.0;
  std::size_t n_boot = 0;
  std::uint64_t seed = 0;
  std::size_t n_items = 0, n_shifts = 0;
  bool monotonicity_flag = false;

  json to_json() const {
    return {{"scorer", scorer_id},  {"family", family},   {"d", d_pct},
            {"d_raw", d_raw},       {"rrf", rrf},         {"ci_lo", lo},
            {"ci_hi", hi},          {"exhaustive", exhaustive}, {"n_boot", n_boot},
            {"seed", seed},         {"n_items", n_items}, {"n_shifts", n_shifts},
            {"monotonicity_flag", monotonicity_flag}};
  }
};

// Shifts grouped by item: one inner vector per audited example, one entry
// per transform of the family.
using ItemShifts = std::vector<std::vector<double>>;

inline std::vector<double> pooled(const ItemShifts& items) {
  std::vector<double> out;
  for (const auto& v : items) out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline ItemShifts singletons(std::span<const double> shifts) {
  ItemShifts out;
  for (double s : shifts) out.push_back({s});
  return out;
}

// One replicate: resample items with replacement, one uniformly chosen
// transform per drawn item, and the exceedance fraction over the n(n-1)
// ordered pairs of distinct draws (self-pairs never flip, so counting them
// would bias the replicate low by a factor (n-1)/n).
inline double bootstrap_replicate(const ItemShifts& items, double d, Rng& rng,
                                  std::vector<double>& draw) {
  const std::size_t n = items.size();
  draw.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& item = items[rng.below(n)];
    draw[k] = item[rng.below(item.size())];
  }
  std::sort(draw.begin(), draw.end());
  const double nn = static_cast<double>(n);
  return static_cast<double>(count_exceedances(draw, d)) / (nn * (nn - 1.0));
}

inline RRFEstimate rrf_bootstrap(const ItemShifts& items, double d_raw,
                                 std::size_t n_boot = stats::kDefaultResamples,
                                 std::uint64_t seed = stats::kDefaultSeed) {
  if (n_boot < kMinResamples)
    throw ConfigError("RRF bootstrap needs at least 1000 resamples");
  RRFEstimate e;
  e.d_raw = d_raw;
  e.n_boot = n_boot;
  e.seed = seed;
  e.n_items = items.size();
  for (const auto& v : items) {
    if (v.empty()) throw InputError("RRF: item without shifts");
    e.n_shifts += v.size();
  }
  if (items.empty()) throw InsufficientData("RRF needs at least one shift");
  const auto all = pooled(items);
  e.exhaustive = rrf_exhaustive(all, d_raw);
  const bool constant = std::all_of(all.begin(), all.end(), [&](double v) { return v == all[0]; });
  if (constant) return e;  // rrf 0, CI (0, 0)
  if (items.size() < 2)
    throw InsufficientData("RRF bootstrap needs at least two items with varying shifts");

  std::vector<double> reps(n_boot), draw;
  for (std::size_t b = 0; b < n_boot; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    reps[b] = bootstrap_replicate(items, d_raw, rng, draw);
  }
  // Pooled fraction over every sampled pair. All replicates share the
  // n(n-1) denominator, so this is the replicate mean; the median carries a
  // discreteness bias of up to about 0.02 at n around 10.
  e.rrf = stats::mean(reps);

  std::vector<double> jack(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::vector<double> rest;
    for (std::size_t j = 0; j < items.size(); ++j)
      if (j != i) rest.insert(rest.end(), items[j].begin(), items[j].end());
    jack[i] = rrf_exhaustive(rest, d_raw);
  }
  std::tie(e.lo, e.hi) = stats::bca_interval(e.exhaustive, reps, jack);
  e.lo = std::min(e.lo, e.rrf);
  e.hi = std::max(e.hi, e.rrf);
  return e;
}

inline RRFEstimate rrf_bootstrap(std::span<const double> shifts, double d_raw,
                                 std::size_t n_boot = stats::kDefaultResamples,
                                 std::uint64_t seed = stats::kDefaultSeed) {
  return rrf_bootstrap(singletons(shifts), d_raw, n_boot, seed);
}

// Percent gap to raw score units on the scorer's declared range.
inline double gap_to_raw(double d_pct, double range_width) { return d_pct / 100.0 * range_width; }

// Estimates per gap. A point estimate that rises by more than the previous
// estimate's CI half-width is flagged; the sweep still returns.
inline std::vector<RRFEstimate> gap_sweep(const ItemShifts& items, std::span<const double> ds_pct,
                                          double range_width = 1.0,
                                          std::size_t n_boot = stats::kDefaultResamples,
                                          std::uint64_t seed = stats::kDefaultSeed) {
  if (ds_pct.empty()) throw ConfigError("gap sweep needs at least one gap");
  std::vector<double> ds(ds_pct.begin(), ds_pct.end());
  if (!std::is_sorted(ds.begin(), ds.end())) throw ConfigError("gap sweep gaps must be ascending");
  std::vector<RRFEstimate> out;
  for (double d : ds) {
    auto e = rrf_bootstrap(items, gap_to_raw(d, range_width), n_boot, seed);
    e.d_pct = d;
    if (!out.empty()) {
      const auto& prev = out.back();
      if (e.rrf - prev.rrf > 0.5 * (prev.hi - prev.lo)) e.monotonicity_flag = true;
    }
    out.push_back(e);
  }
  return out;
}

// Groups samples into (scorer, family) -> items ordered by item id, with each
// item's shifts in input order.
inline std::map<std::pair<std::string, std::string>, ItemShifts> group_shifts(
    const std::vector<ShiftSample>& samples) {
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::vector<double>>> tmp;
  for (const auto& s : samples) {
    if (!std::isfinite(s.delta)) throw InputError("non-finite shift for " + s.item_id);
    tmp[{s.scorer_id, s.family}][s.item_id].push_back(s.delta);
  }
  std::map<std::pair<std::string, std::string>, ItemShifts> out;
  for (auto& [key, by_item] : tmp)
    for (auto& [id, v] : by_item) out[key].push_back(std::move(v));
  return out;
}

inline std::string rrf_csv(const std::vector<RRFEstimate>& rows) {
  std::string out = "scorer,family,d,rrf,ci_lo,ci_hi\n";
  for (const auto& r : rows)
    out += csv_escape(r.scorer_id) + "," + csv_escape(r.family) + "," + fmt(r.d_pct) + "," +
           fmt(r.rrf) + "," + fmt(r.lo) + "," + fmt(r.hi) + "\n";
  return out;
}

}  // namespace capaudit::rrf
