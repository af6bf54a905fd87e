#pragma once

// Invariance-calibrated scoring: per-node nuisance sensitivities, the
// subtraction S - lambda * sum_T w_T * Delta_T, lambda selection under a rank
// correlation constraint, and the before/after report.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "capaudit/error.hpp"
#include "capaudit/perturb.hpp"
#include "capaudit/rrf.hpp"
#include "capaudit/stats.hpp"
#include "capaudit/util.hpp"

namespace capaudit::calibrate {

enum class Group { kSpatial, kObject, kSocietal };
inline constexpr std::array<Group, 3> kGroups = {Group::kSpatial, Group::kObject,
                                                 Group::kSocietal};

inline std::string group_name(Group g) {
  switch (g) {
    case Group::kSpatial: return "spatial";
    case Group::kObject: return "object";
    case Group::kSocietal: return "societal";
  }
  return "?";
}

inline Group parse_group(std::string_view s) {
  for (Group g : kGroups)
    if (group_name(g) == s) return g;
  throw ConfigError("unknown calibration family '" + std::string(s) + "'");
}

inline Group group_of(perturb::Family f) {
  return f == perturb::Family::kBlur ? Group::kObject : Group::kSpatial;
}

// A scored (image variant, caption variant) pair of one item.
struct Node {
  std::string variant = "orig";
  std::string caption = "base";
  auto operator<=>(const Node&) const = default;
  bool is_root() const { return variant == "orig" && caption == "base"; }
};

inline bool is_modifier(const std::string& caption_key) {
  return caption_key.rfind("modifier:", 0) == 0;
}

// Scores of one scorer, keyed by item then node.
class ScoreTable {
 public:
  using ItemScores = std::map<Node, double>;

  void set(const std::string& item, const Node& node, double score) { items_[item][node] = score; }

  std::optional<double> get(const std::string& item, const Node& node) const {
    const auto it = items_.find(item);
    if (it == items_.end()) return std::nullopt;
    const auto jt = it->second.find(node);
    if (jt == it->second.end()) return std::nullopt;
    return jt->second;
  }

  const std::map<std::string, ItemScores>& items() const { return items_; }
  std::map<std::string, ItemScores>& items() { return items_; }

 private:
  std::map<std::string, ItemScores> items_;
};

// Candidate children of a node in a calibration family, restricted to those
// actually scored.
//  spatial: from the original image, every spatial transform; from a
//           first-order spatial variant, every spatial transform of another
//           perturbation family (so chains never collapse on canonicalization).
//  object:  from the original image, every blur level.
//  societal: every modifier caption other than the node's own, same image.
inline std::vector<Node> children(Group g, const Node& node, const ScoreTable::ItemScores& scores) {
  std::vector<Node> out;
  if (g == Group::kSocietal) {
    for (const auto& [n, s] : scores)
      if (n.variant == node.variant && is_modifier(n.caption) && n.caption != node.caption)
        out.push_back(n);
    return out;
  }
  const auto chain = perturb::parse_chain(node.variant);
  if (chain.size() > 1) return out;
  if (chain.size() == 1 && (g != Group::kSpatial || group_of(chain[0].family) != Group::kSpatial))
    return out;
  for (const auto& [n, s] : scores) {
    if (n.caption != node.caption || n.variant == node.variant) continue;
    const auto c = perturb::parse_chain(n.variant);
    if (c.size() != chain.size() + 1) continue;
    if (!std::equal(chain.begin(), chain.end(), c.begin(),
                    [](const auto& a, const auto& b) { return a.key() == b.key(); }))
      continue;
    const auto& last = c.back();
    if (group_of(last.family) != g) continue;
    if (!chain.empty() && last.family == chain[0].family) continue;
    out.push_back(n);
  }
  return out;
}

// Every node the calibration tree can use for one item: the root, each
// first-order transform, second-order spatial chains across different
// perturbation families, and the caption variants on the original image.
inline std::vector<Node> variant_tree(const std::vector<perturb::PerturbationSpec>& specs,
                                      const std::vector<std::string>& caption_keys,
                                      bool second_order = true) {
  std::vector<Node> out{Node{}};
  for (const auto& t : specs) out.push_back({t.key(), "base"});
  if (second_order)
    for (const auto& t : specs) {
      if (group_of(t.family) != Group::kSpatial) continue;
      for (const auto& s : specs)
        if (group_of(s.family) == Group::kSpatial && s.family != t.family)
          out.push_back({perturb::chain_key(perturb::canonicalize({t, s})), "base"});
    }
  for (const auto& c : caption_keys)
    if (c != "base") out.push_back({"orig", c});
  return out;
}

// Nearest ancestor: caption variants hang off the base caption of the same
// image; image variants hang off the chain one step shorter.
inline std::optional<Node> parent(const Node& node) {
  if (node.caption != "base") return Node{node.variant, "base"};
  if (node.variant == "orig") return std::nullopt;
  auto chain = perturb::parse_chain(node.variant);
  chain.pop_back();
  return Node{perturb::chain_key(chain), "base"};
}

// Median over transforms of |S(child) - S(node)|.
inline double sensitivity(double s_node, std::span<const double> child_scores) {
  if (child_scores.empty()) throw MissingVariants("no scored transforms for sensitivity");
  std::vector<double> d;
  d.reserve(child_scores.size());
  for (double c : child_scores) d.push_back(std::abs(c - s_node));
  return stats::median(d);
}

struct SensitivityProfile {
  std::string item_id;
  std::string scorer_id;
  std::map<std::string, double> per_family;

  json to_json() const {
    return {{"item_id", item_id}, {"scorer_id", scorer_id}, {"per_family", per_family}};
  }
};

using Weights = std::map<std::string, double>;

inline Weights uniform_weights() {
  Weights w;
  for (Group g : kGroups) w[group_name(g)] = 1.0;
  return w;
}

// s - lambda * sum_T w_T Delta_T; families missing from the profile add 0.
inline double calibrated_score(double s, const SensitivityProfile& profile, double lambda,
                               const Weights& weights) {
  if (lambda == 0.0) return s;
  double penalty = 0.0;
  for (const auto& [family, w] : weights) {
    const auto it = profile.per_family.find(family);
    if (it != profile.per_family.end()) penalty += w * it->second;
  }
  return s - lambda * penalty;
}

struct WeightScheme {
  Weights weights;
  std::optional<std::string> warning;
};

inline WeightScheme weight_scheme(const std::map<std::string, double>& baselines,
                                  const std::string& mode) {
  WeightScheme out;
  if (mode != "uniform" && mode != "proportional")
    throw ConfigError("weight scheme must be 'uniform' or 'proportional'");
  double total = 0.0;
  for (const auto& [f, b] : baselines) {
    if (b < 0) throw DomainError("negative sensitivity baseline for " + f);
    total += b;
  }
  if (mode == "proportional" && total <= 0) out.warning = "all baselines zero; using uniform weights";
  for (const auto& [f, b] : baselines)
    out.weights[f] = (mode == "uniform" || total <= 0)
                         ? 1.0
                         : b / total * static_cast<double>(baselines.size());
  return out;
}

// Per-node sensitivities of one raw score table. Nodes without children in
// a family inherit the nearest ancestor's value; roots without one fall back
// to the family median over the dev split.
class Calibrator {
 public:
  Calibrator(const ScoreTable& raw, const std::set<std::string>& dev_items) : raw_(raw) {
    std::map<Group, std::vector<double>> dev_values;
    for (const auto& [item, scores] : raw.items()) {
      auto& own = own_[item];
      for (const auto& [node, s] : scores)
        for (Group g : kGroups) {
          std::vector<double> cs;
          for (const auto& c : children(g, node, scores)) cs.push_back(scores.at(c));
          if (cs.empty()) continue;
          const double delta = sensitivity(s, cs);
          own[node][static_cast<std::size_t>(g)] = delta;
          if (node.is_root() && dev_items.count(item)) dev_values[g].push_back(delta);
        }
    }
    for (Group g : kGroups)
      fallback_[static_cast<std::size_t>(g)] =
          dev_values[g].empty() ? 0.0 : stats::median(dev_values[g]);
  }

  double fallback(Group g) const { return fallback_[static_cast<std::size_t>(g)]; }

  std::optional<double> own(const std::string& item, const Node& node, Group g) const {
    const auto it = own_.find(item);
    if (it == own_.end()) return std::nullopt;
    const auto jt = it->second.find(node);
    if (jt == it->second.end()) return std::nullopt;
    return jt->second[static_cast<std::size_t>(g)];
  }

  double delta(const std::string& item, Node node, Group g) const {
    while (true) {
      if (const auto d = own(item, node, g)) return *d;
      const auto p = parent(node);
      if (!p) return fallback(g);
      node = *p;
    }
  }

  SensitivityProfile profile(const std::string& item, const Node& node,
                             const std::string& scorer_id = {}) const {
    SensitivityProfile p{item, scorer_id, {}};
    for (Group g : kGroups) p.per_family[group_name(g)] = delta(item, node, g);
    return p;
  }

  ScoreTable apply(double lambda, const Weights& weights) const {
    if (lambda == 0.0) return raw_;
    ScoreTable out;
    for (const auto& [item, scores] : raw_.items())
      for (const auto& [node, s] : scores)
        out.set(item, node, calibrated_score(s, profile(item, node), lambda, weights));
    return out;
  }

  const ScoreTable& raw() const { return raw_; }

 private:
  const ScoreTable& raw_;
  std::map<std::string, std::map<Node, std::array<std::optional<double>, 3>>> own_;
  std::array<double, 3> fallback_{};
};

// Per-item root sensitivity of a (possibly calibrated) table in a family,
// or nullopt when the item has no scored transform in it.
inline std::optional<double> root_sensitivity(const ScoreTable::ItemScores& scores, Group g) {
  const auto root = scores.find(Node{});
  if (root == scores.end()) return std::nullopt;
  std::vector<double> cs;
  for (const auto& c : children(g, root->first, scores)) cs.push_back(scores.at(c));
  if (cs.empty()) return std::nullopt;
  return sensitivity(root->second, cs);
}

// Median over items of the root sensitivity; nullopt when no item has one.
inline std::optional<double> median_sensitivity(const ScoreTable& table, Group g,
                                                const std::set<std::string>& items,
                                                bool percent = false) {
  std::vector<double> v;
  for (const auto& id : items) {
    const auto it = table.items().find(id);
    if (it == table.items().end()) continue;
    if (const auto s = root_sensitivity(it->second, g)) {
      if (!percent) {
        v.push_back(*s);
      } else {
        const double base = it->second.at(Node{});
        if (std::abs(base) > stats::kMinBase) v.push_back(100.0 * *s / std::abs(base));
      }
    }
  }
  if (v.empty()) return std::nullopt;
  return stats::median(v);
}

// J(lambda): sum over families of the median root sensitivity.
inline double objective(const ScoreTable& table, const std::set<std::string>& items) {
  double j = 0.0;
  for (Group g : kGroups)
    if (const auto m = median_sensitivity(table, g, items)) j += *m;
  return j;
}

inline std::pair<std::vector<double>, std::vector<double>> root_pairs(
    const ScoreTable& a, const ScoreTable& b, const std::set<std::string>& items) {
  std::vector<double> x, y;
  for (const auto& id : items) {
    const auto sa = a.get(id, Node{});
    const auto sb = b.get(id, Node{});
    if (sa && sb) {
      x.push_back(*sa);
      y.push_back(*sb);
    }
  }
  return {x, y};
}

struct CalibrationConfig {
  std::vector<double> lambda_grid;
  Weights weights = uniform_weights();
  double epsilon = 0.01;
  std::vector<std::string> reference_scorers;
  std::set<std::string> dev_items;

  static std::vector<double> default_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 20; ++i) g.push_back(i * 0.05);
    return g;
  }

  void validate() const {
    if (lambda_grid.empty() || lambda_grid.front() != 0.0 ||
        !std::is_sorted(lambda_grid.begin(), lambda_grid.end()))
      throw ConfigError("calibration.lambda_grid must be ascending and start at 0");
    for (const auto& [f, w] : weights)
      if (!(w >= 0)) throw ConfigError("calibration.weights." + f + " must be nonnegative");
    if (!(epsilon >= 0)) throw ConfigError("calibration.epsilon must be nonnegative");
  }
};

struct LambdaPoint {
  double lambda = 0.0;
  double objective = 0.0;
  std::map<std::string, double> rho;  // reference -> Spearman on dev roots
  bool feasible = true;
  json to_json() const {
    return {{"lambda", lambda}, {"objective", objective}, {"rho", rho}, {"feasible", feasible}};
  }
};

struct Selection {
  double lambda_star = 0.0;
  std::map<std::string, double> base_rho;
  std::vector<LambdaPoint> grid;
  std::optional<std::string> warning;

  json to_json() const {
    json g = json::array();
    for (const auto& p : grid) g.push_back(p.to_json());
    json j = {{"lambda_star", lambda_star}, {"base_rho", base_rho}, {"grid", g}};
    if (warning) j["warning"] = *warning;
    return j;
  }
};

// Grid search: minimize J over lambdas whose Spearman against every
// reference stays within epsilon of the uncalibrated value; the smallest
// minimizer wins.
inline Selection select_lambda(const CalibrationConfig& config, const Calibrator& cal,
                               const std::map<std::string, const ScoreTable*>& references) {
  config.validate();
  if (config.dev_items.size() < 20)
    throw InsufficientData("lambda selection needs at least 20 dev items");
  for (const auto& r : config.reference_scorers)
    if (!references.count(r)) throw ConfigError("reference scorer '" + r + "' has no scores");

  Selection sel;
  for (const auto& r : config.reference_scorers) {
    const auto [x, y] = root_pairs(cal.raw(), *references.at(r), config.dev_items);
    if (x.size() < 20) throw InsufficientData("fewer than 20 dev items scored by " + r);
    sel.base_rho[r] = stats::spearman(x, y);
  }
  for (double lambda : config.lambda_grid) {
    const ScoreTable t = cal.apply(lambda, config.weights);
    LambdaPoint p{lambda, objective(t, config.dev_items), {}, true};
    for (const auto& r : config.reference_scorers) {
      const auto [x, y] = root_pairs(t, *references.at(r), config.dev_items);
      p.rho[r] = stats::spearman(x, y);
      if (p.rho[r] < sel.base_rho[r] - config.epsilon) p.feasible = false;
    }
    sel.grid.push_back(std::move(p));
  }
  const LambdaPoint* best = nullptr;
  for (const auto& p : sel.grid)
    if (p.feasible && (!best || p.objective < best->objective)) best = &p;
  sel.lambda_star = best ? best->lambda : 0.0;
  const bool any_positive =
      std::any_of(sel.grid.begin(), sel.grid.end(),
                  [](const LambdaPoint& p) { return p.feasible && p.lambda > 0; });
  if (!any_positive) {
    sel.lambda_star = 0.0;
    sel.warning = "FeasibilityWarning: no lambda > 0 satisfies the correlation constraint";
  }
  return sel;
}

// Deterministic dev/eval split: items ordered by a seeded hash, the first
// ceil(fraction * n) go to dev.
inline std::pair<std::set<std::string>, std::set<std::string>> split_items(
    const std::vector<std::string>& items, double dev_fraction, std::uint64_t seed) {
  if (!(dev_fraction > 0 && dev_fraction < 1)) throw ConfigError("dev_fraction must be in (0, 1)");
  std::vector<std::pair<std::string, std::string>> keyed;
  for (const auto& id : items)
    keyed.push_back({Sha256().field(std::to_string(seed)).field(id).hex(), id});
  std::sort(keyed.begin(), keyed.end());
  const auto n_dev = static_cast<std::size_t>(std::ceil(dev_fraction * items.size()));
  std::set<std::string> dev, eval;
  for (std::size_t i = 0; i < keyed.size(); ++i) (i < n_dev ? dev : eval).insert(keyed[i].second);
  return {dev, eval};
}

// ---------------------------------------------------------------------------
// Report

struct FairnessSpec {
  // modifier caption key -> (lexicon family, matched neutral caption key)
  std::map<std::string, std::pair<std::string, std::string>> pairs;
};

// Median over items and modifiers of 100 |S(mod) - S(neutral)| / S(neutral),
// per lexicon family, on the original image.
inline std::map<std::string, double> fairness_gaps(const ScoreTable& t, const FairnessSpec& spec,
                                                   const std::set<std::string>& items) {
  std::map<std::string, std::vector<double>> v;
  for (const auto& id : items)
    for (const auto& [mod, fam_neutral] : spec.pairs) {
      const auto sm = t.get(id, Node{"orig", mod});
      const auto sn = t.get(id, Node{"orig", fam_neutral.second});
      if (sm && sn && std::abs(*sn) > stats::kMinBase)
        v[fam_neutral.first].push_back(100.0 * std::abs(*sm - *sn) / std::abs(*sn));
    }
  std::map<std::string, double> out;
  for (auto& [f, xs] : v) out[f] = stats::median(xs);
  return out;
}

// Per-item shifts S(child) - S(root) for first-order transforms of one
// perturbation family, grouped by item.
inline rrf::ItemShifts family_shifts(const ScoreTable& t, perturb::Family family,
                                     const std::set<std::string>& items) {
  rrf::ItemShifts out;
  for (const auto& id : items) {
    const auto it = t.items().find(id);
    if (it == t.items().end()) continue;
    const auto root = it->second.find(Node{});
    if (root == it->second.end()) continue;
    std::vector<double> shifts;
    for (const auto& [node, s] : it->second) {
      if (node.caption != "base") continue;
      const auto chain = perturb::parse_chain(node.variant);
      if (chain.size() == 1 && chain[0].family == family) shifts.push_back(s - root->second);
    }
    if (!shifts.empty()) out.push_back(std::move(shifts));
  }
  return out;
}

struct ReportOptions {
  double rrf_gap_pct = 0.7;
  double range_width = 1.0;
  std::size_t n_boot = stats::kDefaultResamples;
  std::uint64_t seed = stats::kDefaultSeed;
};

inline json calibration_report(const std::string& scorer_id, const ScoreTable& before,
                               const ScoreTable& after, const std::set<std::string>& eval_items,
                               const std::map<std::string, const ScoreTable*>& references,
                               const FairnessSpec& fairness, const Selection& selection,
                               const CalibrationConfig& config, const ReportOptions& opt = {}) {
  json axes = json::object();
  for (Group g : kGroups) {
    const auto b = median_sensitivity(before, g, eval_items, true);
    const auto a = median_sensitivity(after, g, eval_items, true);
    const auto braw = median_sensitivity(before, g, eval_items);
    const auto araw = median_sensitivity(after, g, eval_items);
    if (!b || !a) continue;
    axes[group_name(g)] = {{"before_pct", *b},
                           {"after_pct", *a},
                           {"before_raw", *braw},
                           {"after_raw", *araw},
                           {"reduction", *braw > 0 ? 1.0 - *araw / *braw : 0.0}};
  }
  json gaps = json::object();
  const auto gb = fairness_gaps(before, fairness, eval_items);
  const auto ga = fairness_gaps(after, fairness, eval_items);
  for (const auto& [f, v] : gb) gaps[f] = {{"before_pct", v}, {"after_pct", ga.at(f)}};

  json rrf_rows = json::object();
  for (perturb::Family fam : perturb::kAllFamilies) {
    const auto sb = family_shifts(before, fam, eval_items);
    const auto sa = family_shifts(after, fam, eval_items);
    if (sb.empty() || sa.empty()) continue;
    const double d = rrf::gap_to_raw(opt.rrf_gap_pct, opt.range_width);
    try {
      const auto eb = rrf::rrf_bootstrap(sb, d, opt.n_boot, opt.seed);
      const auto ea = rrf::rrf_bootstrap(sa, d, opt.n_boot, opt.seed);
      rrf_rows[perturb::family_name(fam)] = {
          {"d", opt.rrf_gap_pct},
          {"before", eb.rrf}, {"before_ci", {eb.lo, eb.hi}}, {"before_exhaustive", eb.exhaustive},
          {"after", ea.rrf},  {"after_ci", {ea.lo, ea.hi}},  {"after_exhaustive", ea.exhaustive}};
    } catch (const InsufficientData& e) {
      rrf_rows[perturb::family_name(fam)] = {{"error", e.what()}};
    }
  }
  json corr = json::object();
  for (const auto& [r, table] : references) {
    const auto [xb, yb] = root_pairs(before, *table, eval_items);
    const auto [xa, ya] = root_pairs(after, *table, eval_items);
    if (xb.size() < 3) continue;
    try {
      const double rb = stats::spearman(xb, yb), ra = stats::spearman(xa, ya);
      corr[r] = {{"before", rb}, {"after", ra}, {"delta", ra - rb}};
    } catch (const DegenerateSample& e) {
      corr[r] = {{"error", e.what()}};
    }
  }
  return {{"scorer", scorer_id},
          {"lambda_star", selection.lambda_star},
          {"epsilon", config.epsilon},
          {"weights", config.weights},
          {"n_eval_items", eval_items.size()},
          {"n_dev_items", config.dev_items.size()},
          {"selection", selection.to_json()},
          {"sensitivity", axes},
          {"fairness_gaps", gaps},
          {"rrf", rrf_rows},
          {"correlation", corr}};
}

inline std::string calibration_csv(const std::vector<json>& reports) {
  std::string out = "scorer,section,key,before,after\n";
  for (const auto& r : reports) {
    const std::string s = csv_escape(r.at("scorer").get<std::string>());
    for (const auto& [axis, v] : r.at("sensitivity").items())
      out += s + ",sensitivity_pct," + axis + "," + fmt(v.at("before_pct")) + "," +
             fmt(v.at("after_pct")) + "\n";
    for (const auto& [fam, v] : r.at("fairness_gaps").items())
      out += s + ",fairness_gap_pct," + fam + "," + fmt(v.at("before_pct")) + "," +
             fmt(v.at("after_pct")) + "\n";
    for (const auto& [fam, v] : r.at("rrf").items())
      if (v.contains("before"))
        out += s + ",rrf," + fam + "," + fmt(v.at("before")) + "," + fmt(v.at("after")) + "\n";
    for (const auto& [ref, v] : r.at("correlation").items())
      if (v.contains("before"))
        out += s + ",spearman," + csv_escape(ref) + "," + fmt(v.at("before")) + "," +
               fmt(v.at("after")) + "\n";
  }
  return out;
}

}  // namespace capaudit::calibrate
