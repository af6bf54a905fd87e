#pragma once

// Human validation: majority votes over three annotators, Fleiss' kappa,
// robustness refilters of the paired report, and pairwise preference
// accuracy of a scorer against human judgements.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "capaudit/error.hpp"
#include "capaudit/rng.hpp"
#include "capaudit/stats.hpp"
#include "capaudit/util.hpp"

namespace capaudit::humanval {

inline constexpr std::size_t kAnnotators = 3;
inline constexpr double kScoreTieTolerance = 1e-9;

enum class Label { kIncorrect, kPartial, kFully };
enum class Preference { kA, kB, kTie };
enum class Verdict { kAcceptable, kUnacceptable, kNoMajority };

inline Label parse_label(const std::string& s) {
  if (s == "incorrect") return Label::kIncorrect;
  if (s == "partially_correct") return Label::kPartial;
  if (s == "fully_correct") return Label::kFully;
  throw InputError("unknown acceptability label '" + s + "'");
}

inline std::string label_name(Label l) {
  switch (l) {
    case Label::kIncorrect: return "incorrect";
    case Label::kPartial: return "partially_correct";
    case Label::kFully: return "fully_correct";
  }
  return "?";
}

inline Preference parse_preference(const std::string& s) {
  if (s == "A") return Preference::kA;
  if (s == "B") return Preference::kB;
  if (s == "Tie") return Preference::kTie;
  throw InputError("unknown preference label '" + s + "'");
}

inline std::string preference_name(Preference p) {
  switch (p) {
    case Preference::kA: return "A";
    case Preference::kB: return "B";
    case Preference::kTie: return "Tie";
  }
  return "?";
}

inline std::string verdict_name(Verdict v) {
  switch (v) {
    case Verdict::kAcceptable: return "acceptable";
    case Verdict::kUnacceptable: return "unacceptable";
    case Verdict::kNoMajority: return "no_majority";
  }
  return "?";
}

inline bool acceptable(Label l) { return l != Label::kIncorrect; }

template <class T>
void require_arity(std::span<const T> labels) {
  if (labels.size() != kAnnotators)
    throw InputError("expected " + std::to_string(kAnnotators) + " labels, got " +
                     std::to_string(labels.size()));
}

inline Verdict majority_acceptability(std::span<const Label> labels) {
  require_arity(labels);
  const auto n = std::count_if(labels.begin(), labels.end(), acceptable);
  if (n >= 2) return Verdict::kAcceptable;
  return Verdict::kUnacceptable;  // at least two incorrect
}

// nullopt when all three annotators disagree.
inline std::optional<Preference> majority_preference(std::span<const Preference> labels) {
  require_arity(labels);
  for (Preference p : {Preference::kA, Preference::kB, Preference::kTie})
    if (std::count(labels.begin(), labels.end(), p) >= 2) return p;
  return std::nullopt;
}

// Whether at least two annotators chose "partially correct".
inline bool majority_partial(std::span<const Label> labels) {
  require_arity(labels);
  return std::count(labels.begin(), labels.end(), Label::kPartial) >= 2;
}

struct AnnotationItem {
  std::string item_id;
  std::string family;  // empty: applies to every family of the item
  std::array<Label, kAnnotators> version_a{};
  std::array<Label, kAnnotators> version_b{};
  std::array<Preference, kAnnotators> preference{};
  bool synthetic = false;

  Verdict verdict_a() const { return majority_acceptability(version_a); }
  Verdict verdict_b() const { return majority_acceptability(version_b); }
  bool both_acceptable() const {
    return verdict_a() == Verdict::kAcceptable && verdict_b() == Verdict::kAcceptable;
  }
  bool one_sided() const { return (verdict_a() == Verdict::kAcceptable) != (verdict_b() == Verdict::kAcceptable); }
  bool any_majority_partial() const { return majority_partial(version_a) || majority_partial(version_b); }

  json to_json() const {
    auto labels = [](const auto& arr, auto name) {
      json j = json::array();
      for (auto v : arr) j.push_back(name(v));
      return j;
    };
    json j = {{"item_id", item_id},
              {"version_a_labels", labels(version_a, label_name)},
              {"version_b_labels", labels(version_b, label_name)},
              {"preference_labels", labels(preference, preference_name)}};
    if (!family.empty()) j["family"] = family;
    if (synthetic) j["synthetic"] = true;
    return j;
  }

  static AnnotationItem from_json(const json& j) {
    AnnotationItem a;
    try {
      a.item_id = j.at("item_id").get<std::string>();
      a.family = j.value("family", "");
      a.synthetic = j.value("synthetic", false);
      auto fill = [&](const char* key, auto& out, auto parse) {
        const auto& arr = j.at(key);
        if (!arr.is_array() || arr.size() != kAnnotators)
          throw InputError(std::string(key) + " must hold exactly 3 labels (item " + a.item_id + ")");
        for (std::size_t i = 0; i < kAnnotators; ++i) out[i] = parse(arr[i].get<std::string>());
      };
      fill("version_a_labels", a.version_a, parse_label);
      fill("version_b_labels", a.version_b, parse_label);
      fill("preference_labels", a.preference, parse_preference);
    } catch (const json::exception& e) {
      throw InputError(std::string("malformed annotation record: ") + e.what());
    }
    return a;
  }
};

inline std::vector<AnnotationItem> load_annotations(const fs::path& path) {
  std::vector<AnnotationItem> out;
  for (const auto& row : read_jsonl(path)) out.push_back(AnnotationItem::from_json(row));
  return out;
}

inline std::string annotations_jsonl(const std::vector<AnnotationItem>& items) {
  std::vector<json> rows;
  for (const auto& a : items) rows.push_back(a.to_json());
  return to_jsonl(rows);
}

// ---------------------------------------------------------------------------
// Agreement

// Fleiss' kappa over an items x raters matrix of category indices. Every
// item needs the same number of raters (at least two).
inline double fleiss_kappa(const std::vector<std::vector<int>>& labels, int n_categories) {
  if (labels.empty()) throw InsufficientData("Fleiss' kappa needs at least one item");
  if (n_categories < 1) throw DomainError("Fleiss' kappa needs at least one category");
  const std::size_t m = labels[0].size();
  if (m < 2) throw InputError("Fleiss' kappa needs at least two raters per item");
  const double N = static_cast<double>(labels.size());
  const double M = static_cast<double>(m);
  std::vector<double> totals(n_categories, 0.0);
  double p_bar = 0.0;
  for (const auto& row : labels) {
    if (row.size() != m) throw InputError("Fleiss' kappa needs a constant number of raters");
    std::vector<double> counts(n_categories, 0.0);
    for (int c : row) {
      if (c < 0 || c >= n_categories) throw InputError("category index out of range");
      counts[c] += 1.0;
    }
    double agree = 0.0;
    for (int j = 0; j < n_categories; ++j) {
      agree += counts[j] * (counts[j] - 1.0);
      totals[j] += counts[j];
    }
    p_bar += agree / (M * (M - 1.0));
  }
  p_bar /= N;
  double p_e = 0.0;
  for (double t : totals) p_e += (t / (N * M)) * (t / (N * M));
  if (p_e >= 1.0 - 1e-15)
    throw DegenerateAgreement("Fleiss' kappa undefined: every label falls in one category");
  return (p_bar - p_e) / (1.0 - p_e);
}

// Acceptability agreement on the binary acceptable/unacceptable mapping,
// pooled over both versions of every item.
inline std::vector<std::vector<int>> acceptability_matrix(const std::vector<AnnotationItem>& items,
                                                          bool binary = true) {
  std::vector<std::vector<int>> out;
  for (const auto& a : items)
    for (const auto* v : {&a.version_a, &a.version_b}) {
      std::vector<int> row;
      for (Label l : *v) row.push_back(binary ? (acceptable(l) ? 1 : 0) : static_cast<int>(l));
      out.push_back(std::move(row));
    }
  return out;
}

// Tie is its own category.
inline std::vector<std::vector<int>> preference_matrix(const std::vector<AnnotationItem>& items) {
  std::vector<std::vector<int>> out;
  for (const auto& a : items) {
    std::vector<int> row;
    for (Preference p : a.preference) row.push_back(static_cast<int>(p));
    out.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Robustness refilters

enum class RefilterMode { kDropOneSided, kDropPartials };

inline RefilterMode parse_refilter_mode(const std::string& s) {
  if (s == "drop_one_sided") return RefilterMode::kDropOneSided;
  if (s == "drop_partials") return RefilterMode::kDropPartials;
  throw ConfigError("refilter mode must be drop_one_sided or drop_partials");
}

inline std::string refilter_mode_name(RefilterMode m) {
  return m == RefilterMode::kDropOneSided ? "drop_one_sided" : "drop_partials";
}

// Paired samples of one report cell.
struct CellSamples {
  std::string scorer_id;
  std::string dataset;
  std::string family;
  std::vector<stats::PairedSample> samples;
};

struct RefilterRow {
  std::string scorer_id, dataset, family, mode;
  std::size_t n_before = 0, n_after = 0, n_removed = 0;
  double median_before = std::nan(""), median_after = std::nan("");
  double change = std::nan("");
  double half_width_before = std::nan("");
  bool direction_preserved = false;
  std::string status = "ok";

  json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    return {{"scorer", scorer_id},
            {"dataset", dataset},
            {"family", family},
            {"mode", mode},
            {"n_before", n_before},
            {"n_after", n_after},
            {"n_removed", n_removed},
            {"median_before", num(median_before)},
            {"median_after", num(median_after)},
            {"change", num(change)},
            {"ci_half_width_before", num(half_width_before)},
            {"direction_preserved", direction_preserved},
            {"status", status}};
  }
};

inline int sign(double v) { return (v > 0) - (v < 0); }

// Item ids to drop from a given family under the mode.
inline std::set<std::string> removed_items(const std::vector<AnnotationItem>& annotations,
                                           const std::string& family, RefilterMode mode) {
  std::set<std::string> out;
  for (const auto& a : annotations) {
    if (!a.family.empty() && a.family != family) continue;
    const bool drop =
        mode == RefilterMode::kDropOneSided ? a.one_sided() : a.any_majority_partial();
    if (drop) out.insert(a.item_id);
  }
  return out;
}

inline std::vector<RefilterRow> refilter_and_recompute(
    const std::vector<CellSamples>& cells, const std::vector<AnnotationItem>& annotations,
    RefilterMode mode, const stats::PipelineOptions& options = {}) {
  std::vector<RefilterRow> rows;
  for (const auto& cell : cells) {
    RefilterRow r{cell.scorer_id, cell.dataset, cell.family, refilter_mode_name(mode)};
    const auto drop = removed_items(annotations, cell.family, mode);
    std::vector<stats::PairedSample> kept;
    for (const auto& s : cell.samples)
      if (!drop.count(s.item_id)) kept.push_back(s);
    r.n_removed = cell.samples.size() - kept.size();
    const auto before =
        stats::paired_pipeline(cell.scorer_id, cell.dataset, cell.family, cell.samples, options);
    r.n_before = before.n;
    r.median_before = before.median;
    r.half_width_before = before.half_width();
    if (kept.empty()) {
      r.status = "InsufficientData";
      rows.push_back(r);
      continue;
    }
    const auto after = r.n_removed == 0
                           ? before
                           : stats::paired_pipeline(cell.scorer_id, cell.dataset, cell.family,
                                                    std::move(kept), options);
    r.n_after = after.n;
    r.median_after = after.median;
    if (!before.ok() || !after.ok()) {
      r.status = before.ok() ? after.status : before.status;
    } else {
      r.change = r.median_after - r.median_before;
      r.direction_preserved = sign(r.median_after) == sign(r.median_before);
    }
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Pairwise preference accuracy

struct PreferencePair {
  std::string pair_id;
  Preference human = Preference::kTie;
  std::optional<double> score_a;
  std::optional<double> score_b;
};

inline Preference predict(double score_a, double score_b) {
  if (std::abs(score_a - score_b) < kScoreTieTolerance) return Preference::kTie;
  return score_a > score_b ? Preference::kA : Preference::kB;
}

// 1 for agreement, 0.5 when exactly one side is a tie, 0 otherwise.
inline double credit(Preference predicted, Preference human) {
  if (predicted == human) return 1.0;
  if (predicted == Preference::kTie || human == Preference::kTie) return 0.5;
  return 0.0;
}

struct PreferenceResult {
  double accuracy = std::nan("");
  double lo = std::nan(""), hi = std::nan("");
  std::size_t n_pairs = 0;
  std::size_t n_skipped = 0;
  std::size_t n_predicted_ties = 0;

  json to_json() const {
    return {{"accuracy", accuracy}, {"ci_lo", lo},         {"ci_hi", hi},
            {"n_pairs", n_pairs},   {"n_skipped", n_skipped}, {"n_predicted_ties", n_predicted_ties}};
  }
};

inline double mean_statistic(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

inline PreferenceResult preference_accuracy(const std::vector<PreferencePair>& pairs,
                                            std::size_t n_resamples = stats::kDefaultResamples,
                                            std::uint64_t seed = stats::kDefaultSeed) {
  PreferenceResult r;
  std::vector<double> credits;
  for (const auto& p : pairs) {
    if (!p.score_a || !p.score_b) {
      ++r.n_skipped;
      continue;
    }
    const auto pred = predict(*p.score_a, *p.score_b);
    r.n_predicted_ties += pred == Preference::kTie;
    credits.push_back(credit(pred, p.human));
  }
  r.n_pairs = credits.size();
  if (credits.empty()) throw InsufficientData("no scored preference pairs");
  r.accuracy = mean_statistic(credits);
  if (credits.size() < 3) {
    r.lo = r.hi = r.accuracy;
    return r;
  }
  const auto ci = stats::bca_ci(credits, mean_statistic, n_resamples, seed);
  r.lo = std::min(ci.lo, r.accuracy);
  r.hi = std::max(ci.hi, r.accuracy);
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic annotations

struct SyntheticRates {
  double both_acceptable = 0.973;  // share of items with both versions acceptable
  double tie = 0.966;              // share of items whose majority preference is Tie
  double dissent = 0.15;           // chance that one annotator disagrees with the majority
  double fully = 0.8;              // share of acceptable labels that are "fully correct"
};

// Labels drawn around a predetermined majority outcome, so the marginal
// majority rates match the requested ones in expectation.
inline std::vector<AnnotationItem> synthetic_annotations(const std::vector<std::string>& item_ids,
                                                         std::uint64_t seed,
                                                         const SyntheticRates& rates = {}) {
  std::vector<AnnotationItem> out;
  for (const auto& id : item_ids) {
    Rng rng(derive_seed(seed, "annotate|" + id));
    AnnotationItem a;
    a.item_id = id;
    a.synthetic = true;
    const bool both = rng.uniform() < rates.both_acceptable;
    const bool a_ok = both || rng.uniform() < 0.5;
    const bool b_ok = both || !a_ok;
    auto draw = [&](bool ok, auto& labels) {
      for (auto& l : labels)
        l = ok ? (rng.uniform() < rates.fully ? Label::kFully : Label::kPartial) : Label::kIncorrect;
      if (rng.uniform() < rates.dissent) {
        auto& d = labels[rng.below(kAnnotators)];
        d = ok ? Label::kIncorrect : (rng.uniform() < 0.5 ? Label::kFully : Label::kPartial);
      }
    };
    draw(a_ok, a.version_a);
    draw(b_ok, a.version_b);
    const Preference major = rng.uniform() < rates.tie
                                 ? Preference::kTie
                                 : (rng.uniform() < 0.5 ? Preference::kA : Preference::kB);
    a.preference.fill(major);
    if (rng.uniform() < rates.dissent) {
      const int other = (static_cast<int>(major) + 1 + static_cast<int>(rng.below(2))) % 3;
      a.preference[rng.below(kAnnotators)] = static_cast<Preference>(other);
    }
    out.push_back(a);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

inline json kappa_entry(const std::vector<std::vector<int>>& m, int k) {
  try {
    return {{"kappa", fleiss_kappa(m, k)}, {"n_items", m.size()}};
  } catch (const Error& e) {
    return {{"error", std::string(kind_name(e.kind()))}, {"detail", e.what()}, {"n_items", m.size()}};
  }
}

inline json human_validation_report(const std::vector<AnnotationItem>& items,
                                    const std::vector<RefilterRow>& refilters = {}) {
  std::size_t both = 0, one_sided = 0, neither = 0, partial = 0, synthetic = 0;
  std::map<std::string, std::size_t> pref;
  for (const auto& a : items) {
    if (a.both_acceptable())
      ++both;
    else if (a.one_sided())
      ++one_sided;
    else
      ++neither;
    partial += a.any_majority_partial();
    synthetic += a.synthetic;
    const auto m = majority_preference(a.preference);
    ++pref[m ? preference_name(*m) : "no_majority"];
  }
  const double n = static_cast<double>(items.size());
  auto rate = [&](std::size_t c) { return items.empty() ? json(nullptr) : json(c / n); };
  json rows = json::array();
  for (const auto& r : refilters) rows.push_back(r.to_json());
  return {{"n_items", items.size()},
          {"synthetic_items", synthetic},
          {"counts",
           {{"both_acceptable", both},
            {"one_sided", one_sided},
            {"neither_acceptable", neither},
            {"majority_partial", partial},
            {"preference", pref}}},
          {"rates",
           {{"both_acceptable", rate(both)},
            {"preference_tie", rate(pref["Tie"])}}},
          {"kappa",
           {{"acceptability", kappa_entry(acceptability_matrix(items), 2)},
            {"acceptability_3way", kappa_entry(acceptability_matrix(items, false), 3)},
            {"preference", kappa_entry(preference_matrix(items), 3)}}},
          {"refilters", rows}};
}

}  // namespace capaudit::humanval
