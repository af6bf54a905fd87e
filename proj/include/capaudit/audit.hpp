#pragma once

// End-to-end audit runs: config handling, content-hashed resumable stages
// (curate, perturb, captions, score, analyze, rrf, calibrate, humanval)
// and the report bundle.

#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "capaudit/calibrate.hpp"
#include "capaudit/captiongen.hpp"
#include "capaudit/catalog.hpp"
#include "capaudit/humanval.hpp"
#include "capaudit/perturb.hpp"
#include "capaudit/rrf.hpp"
#include "capaudit/scorebridge.hpp"
#include "capaudit/stats.hpp"
#include "capaudit/svg.hpp"
#include "capaudit/util.hpp"

#ifndef CAPAUDIT_DATA_DIR
#define CAPAUDIT_DATA_DIR "data"
#endif

namespace capaudit::audit {

inline constexpr const char* kCacheDirEnv = "CAPAUDIT_CACHE_DIR";

class FailureBudgetExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config

inline json default_config() {
  json grid = json::array();
  for (double l : calibrate::CalibrationConfig::default_grid()) grid.push_back(l);
  json families = json::array();
  for (auto f : perturb::kAllFamilies) families.push_back(perturb::family_name(f));
  return {
      {"inputs",
       {{"manifests", json::array()},
        {"category_map", std::string(CAPAUDIT_DATA_DIR) + "/category_map.json"},
        {"lexicon", std::string(CAPAUDIT_DATA_DIR) + "/lexicon.json"}}},
      {"families", families},
      {"perturb", {{"second_order", true}, {"reposition", {{"max_tries", 25}, {"feather", true}}}}},
      {"captions", {{"families", json::array()}}},
      {"scorers", json::array()},
      {"stats", {{"n_resamples", stats::kDefaultResamples}}},
      {"rrf", {{"gaps", rrf::kDefaultGaps}, {"n_boot", stats::kDefaultResamples}}},
      {"calibration",
       {{"enabled", true},
        {"scorers", json::array()},
        {"reference_scorers", json::array()},
        {"lambda_grid", grid},
        {"weights", "uniform"},
        {"epsilon", 0.01},
        {"dev_fraction", 0.5}}},
      {"artifact_filter", {{"q", 5.0}, {"mode", "either"}}},
      {"humanval", {{"annotations", nullptr}, {"synthetic", false}}},
      {"output_dir", "audit_out"},
      {"max_item_failure_rate", 0.1}};
}

// Deep merge: objects merge key by key, everything else replaces.
inline void deep_merge(json& base, const json& over) {
  if (!base.is_object() || !over.is_object()) {
    base = over;
    return;
  }
  for (const auto& [k, v] : over.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object())
      deep_merge(base[k], v);
    else
      base[k] = v;
  }
}

// Sets a dotted path ("stats.seed") from a command-line string. The value
// is parsed as JSON when possible and kept as a string otherwise.
inline void apply_override(json& cfg, const std::string& path, const std::string& value) {
  if (path.empty()) throw ConfigError("override: empty field path");
  json v;
  try {
    v = json::parse(value);
  } catch (const json::parse_error&) {
    v = value;
  }
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError(path + ": malformed field path");
    if (!node->is_object()) throw ConfigError(path + ": parent is not an object");
    if (dot == std::string::npos) {
      (*node)[key] = v;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

struct ScorerEntry {
  std::string id;
  std::string type;  // "mock" or "external"
  json spec;         // mock spec or bridge options
};

struct RunConfig {
  json resolved;  // merged document, echoed in the summary
  std::vector<fs::path> manifests;
  fs::path category_map;
  fs::path lexicon;
  std::vector<perturb::Family> families;
  bool second_order = true;
  perturb::RepositionOptions reposition;
  std::vector<std::string> caption_families;
  std::vector<ScorerEntry> scorers;
  std::size_t n_resamples = stats::kDefaultResamples;
  std::uint64_t seed = stats::kDefaultSeed;
  std::vector<double> gaps;
  std::size_t rrf_boot = stats::kDefaultResamples;
  bool calibration_enabled = true;
  std::vector<std::string> calibration_scorers;
  calibrate::CalibrationConfig calibration;
  std::string weight_mode = "uniform";
  double dev_fraction = 0.5;
  double filter_q = 5.0;
  perturb::FilterMode filter_mode = perturb::FilterMode::kEither;
  std::optional<fs::path> annotations;
  bool synthetic_annotations = false;
  fs::path output_dir;
  double max_failure_rate = 0.1;

  bool has_scorer(const std::string& id) const {
    return std::any_of(scorers.begin(), scorers.end(), [&](const auto& s) { return s.id == id; });
  }

  // `user` is merged over the defaults; relative paths resolve against
  // `base_dir`.
  static RunConfig from_json(const json& user, const fs::path& base_dir = fs::current_path()) {
    if (!user.is_object()) throw ConfigError("config: top level must be an object");
    json j = default_config();
    deep_merge(j, user);
    RunConfig c;
    c.resolved = j;
    auto path_of = [&](const json& v, const std::string& field) {
      if (!v.is_string()) throw ConfigError(field + ": expected a path string");
      fs::path p = v.get<std::string>();
      return (p.is_absolute() ? p : base_dir / p).lexically_normal();
    };
    auto get = [&](const json& node, const std::string& field, auto fallback) {
      using T = decltype(fallback);
      try {
        return node.get<T>();
      } catch (const json::exception&) {
        throw ConfigError(field + ": wrong type");
      }
    };

    const auto& in = j.at("inputs");
    if (!in.at("manifests").is_array()) throw ConfigError("inputs.manifests: expected an array");
    for (std::size_t i = 0; i < in.at("manifests").size(); ++i)
      c.manifests.push_back(path_of(in["manifests"][i], "inputs.manifests[" + std::to_string(i) + "]"));
    c.category_map = path_of(in.at("category_map"), "inputs.category_map");
    c.lexicon = path_of(in.at("lexicon"), "inputs.lexicon");

    if (!j.at("families").is_array() || j.at("families").empty())
      throw ConfigError("families: must list at least one perturbation family");
    for (const auto& f : j["families"]) {
      try {
        const auto fam = perturb::parse_family(get(f, "families", std::string()));
        if (std::find(c.families.begin(), c.families.end(), fam) == c.families.end())
          c.families.push_back(fam);
      } catch (const Error& e) {
        throw ConfigError(std::string("families: ") + e.what());
      }
    }
    std::sort(c.families.begin(), c.families.end());

    const auto& pt = j.at("perturb");
    c.second_order = get(pt.at("second_order"), "perturb.second_order", true);
    const auto& rp = pt.value("reposition", json::object());
    c.reposition.max_tries = get(rp.value("max_tries", json(25)), "perturb.reposition.max_tries", 0);
    c.reposition.feather = get(rp.value("feather", json(true)), "perturb.reposition.feather", true);
    if (c.reposition.max_tries < 1) throw ConfigError("perturb.reposition.max_tries: must be >= 1");

    c.caption_families = get(j.at("captions").at("families"), "captions.families",
                             std::vector<std::string>());

    if (!j.at("scorers").is_array()) throw ConfigError("scorers: expected an array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < j["scorers"].size(); ++i) {
      const auto& s = j["scorers"][i];
      const std::string field = "scorers[" + std::to_string(i) + "]";
      if (!s.is_object()) throw ConfigError(field + ": expected an object");
      ScorerEntry e;
      e.id = get(s.value("id", json()), field + ".id", std::string());
      e.type = get(s.value("type", json("mock")), field + ".type", std::string());
      if (e.id.empty()) throw ConfigError(field + ".id: must be nonempty");
      if (!ids.insert(e.id).second) throw ConfigError(field + ".id: duplicate scorer '" + e.id + "'");
      if (e.type == "mock") {
        const auto cat = scorebridge::mock_catalogue();
        json spec = json::object();
        if (s.contains("base")) {
          const std::string base = get(s["base"], field + ".base", std::string());
          if (!cat.count(base)) throw ConfigError(field + ".base: unknown mock '" + base + "'");
          spec = cat.at(base).to_json();
        }
        deep_merge(spec, s.value("spec", json::object()));
        spec["id"] = e.id;
        try {
          e.spec = scorebridge::MockScorerSpec::from_json(spec).to_json();
        } catch (const ConfigError& err) {
          throw ConfigError(field + ".spec: " + err.what());
        }
      } else if (e.type == "external") {
        const auto cmd = get(s.value("command", json::array()), field + ".command",
                             std::vector<std::string>());
        if (cmd.empty()) throw ConfigError(field + ".command: must be a nonempty argv array");
        e.spec = {{"command", cmd},
                  {"window", s.value("window", 32)},
                  {"timeout_s", s.value("timeout_s", 60.0)},
                  {"retries", s.value("retries", 3)},
                  {"handshake_timeout_s", s.value("handshake_timeout_s", 60.0)}};
      } else {
        throw ConfigError(field + ".type: must be 'mock' or 'external'");
      }
      c.scorers.push_back(std::move(e));
    }

    const auto& st = j.at("stats");
    if (!st.contains("seed") || !st["seed"].is_number_integer() || st["seed"].get<std::int64_t>() < 0)
      throw ConfigError("stats.seed: required nonnegative integer");
    c.seed = st["seed"].get<std::uint64_t>();
    c.n_resamples = get(st.at("n_resamples"), "stats.n_resamples", std::size_t{});
    if (c.n_resamples < 1000) throw ConfigError("stats.n_resamples: must be >= 1000");

    const auto& rr = j.at("rrf");
    c.gaps = get(rr.at("gaps"), "rrf.gaps", std::vector<double>());
    if (c.gaps.empty() || !std::is_sorted(c.gaps.begin(), c.gaps.end()))
      throw ConfigError("rrf.gaps: must be a nonempty ascending list");
    c.rrf_boot = get(rr.at("n_boot"), "rrf.n_boot", std::size_t{});
    if (c.rrf_boot < rrf::kMinResamples) throw ConfigError("rrf.n_boot: must be >= 1000");

    const auto& cal = j.at("calibration");
    c.calibration_enabled = get(cal.at("enabled"), "calibration.enabled", true);
    c.calibration_scorers = get(cal.at("scorers"), "calibration.scorers", std::vector<std::string>());
    c.calibration.reference_scorers =
        get(cal.at("reference_scorers"), "calibration.reference_scorers", std::vector<std::string>());
    c.calibration.lambda_grid = get(cal.at("lambda_grid"), "calibration.lambda_grid", std::vector<double>());
    c.calibration.epsilon = get(cal.at("epsilon"), "calibration.epsilon", 0.0);
    c.dev_fraction = get(cal.at("dev_fraction"), "calibration.dev_fraction", 0.0);
    if (cal.at("weights").is_string()) {
      c.weight_mode = cal["weights"].get<std::string>();
      if (c.weight_mode != "uniform" && c.weight_mode != "proportional")
        throw ConfigError("calibration.weights: must be uniform, proportional or an object");
    } else {
      c.weight_mode = "explicit";
      c.calibration.weights = get(cal["weights"], "calibration.weights", calibrate::Weights());
      for (const auto& [k, w] : c.calibration.weights) {
        (void)w;
        calibrate::parse_group(k);
      }
    }
    try {
      c.calibration.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("calibration: ") + e.what());
    }
    if (!(c.dev_fraction > 0 && c.dev_fraction < 1))
      throw ConfigError("calibration.dev_fraction: must lie in (0, 1)");
    for (const auto& id : c.calibration_scorers)
      if (!c.has_scorer(id)) throw ConfigError("calibration.scorers: unknown scorer '" + id + "'");
    for (const auto& id : c.calibration.reference_scorers)
      if (!c.has_scorer(id))
        throw ConfigError("calibration.reference_scorers: unknown scorer '" + id + "'");

    const auto& af = j.at("artifact_filter");
    c.filter_q = get(af.at("q"), "artifact_filter.q", 0.0);
    if (c.filter_q < 0 || c.filter_q > 100) throw ConfigError("artifact_filter.q: must lie in [0, 100]");
    try {
      c.filter_mode = perturb::parse_filter_mode(get(af.at("mode"), "artifact_filter.mode", std::string()));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("artifact_filter.mode: ") + e.what());
    }

    const auto& hv = j.at("humanval");
    if (!hv.at("annotations").is_null()) c.annotations = path_of(hv["annotations"], "humanval.annotations");
    c.synthetic_annotations = get(hv.at("synthetic"), "humanval.synthetic", false);

    c.output_dir = path_of(j.at("output_dir"), "output_dir");
    c.max_failure_rate = get(j.at("max_item_failure_rate"), "max_item_failure_rate", 0.0);
    if (!(c.max_failure_rate >= 0 && c.max_failure_rate <= 1))
      throw ConfigError("max_item_failure_rate: must lie in [0, 1]");
    return c;
  }

  static RunConfig load(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
    json j;
    try {
      j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
    for (const auto& [k, v] : overrides) apply_override(j, k, v);
    return from_json(j, fs::absolute(path).parent_path());
  }

  // Stage-relevant parts only: output location and failure budget never
  // change results.
  json section(const std::string& key) const { return resolved.value(key, json()); }
};

inline fs::path cache_dir(const RunConfig& c) {
  if (const char* env = std::getenv(kCacheDirEnv); env && *env) return fs::path(env);
  return c.output_dir / "cache";
}

// ---------------------------------------------------------------------------
// Scorers

inline std::unique_ptr<scorebridge::Scorer> make_scorer(const ScorerEntry& e) {
  if (e.type == "mock")
    return std::make_unique<scorebridge::MockScorer>(scorebridge::MockScorerSpec::from_json(e.spec));
  scorebridge::BridgeOptions o;
  o.command = e.spec.at("command").get<std::vector<std::string>>();
  o.window = e.spec.at("window").get<std::size_t>();
  o.timeout_s = e.spec.at("timeout_s").get<double>();
  o.retries = e.spec.at("retries").get<int>();
  o.handshake_timeout_s = e.spec.at("handshake_timeout_s").get<double>();
  auto s = std::make_unique<scorebridge::ExternalScorer>(o);
  if (s->id() != e.id)
    throw ScorerUnavailable("scorer '" + e.id + "' announced itself as '" + s->id() + "'");
  return s;
}

// ---------------------------------------------------------------------------
// Stage runner

enum class Stage { kCurate, kPerturb, kCaptions, kScore, kAnalyze, kRrf, kCalibrate, kHumanval, kAll };

inline Stage parse_stage(const std::string& s) {
  static const std::map<std::string, Stage> m = {
      {"curate", Stage::kCurate},   {"perturb", Stage::kPerturb}, {"captions", Stage::kCaptions},
      {"score", Stage::kScore},     {"analyze", Stage::kAnalyze}, {"rrf", Stage::kRrf},
      {"calibrate", Stage::kCalibrate}, {"humanval", Stage::kHumanval}, {"run", Stage::kAll},
      {"report", Stage::kAll}};
  const auto it = m.find(s);
  if (it == m.end()) throw ConfigError("unknown stage '" + s + "'");
  return it->second;
}

class StageRunner {
 public:
  explicit StageRunner(fs::path work) : work_(std::move(work)) {
    fs::create_directories(work_);
    if (fs::exists(state_file())) state_ = json::parse(read_file(state_file()));
    if (!state_.is_object()) state_ = json::object();
  }

  // Returns the stored output when the stage hash matches and `valid`
  // accepts it; otherwise computes, stores and returns a fresh one.
  json run(const std::string& name, const std::string& hash, const std::function<json()>& compute,
           const std::function<bool(const json&)>& valid = {}) {
    const fs::path out = work_ / (name + ".json");
    if (state_.value(name, "") == hash && fs::exists(out)) {
      json j = json::parse(read_file(out));
      if (!valid || valid(j)) {
        hits_[name] = true;
        return j;
      }
    }
    json j = compute();
    write_file(out, j.dump());
    state_[name] = hash;
    write_file(state_file(), state_.dump(1));
    hits_[name] = false;
    return j;
  }

  const std::map<std::string, bool>& hits() const { return hits_; }
  const fs::path& work() const { return work_; }

 private:
  fs::path state_file() const { return work_ / "stages.json"; }
  fs::path work_;
  json state_;
  std::map<std::string, bool> hits_;
};

inline std::string stage_hash(const std::string& name, std::initializer_list<std::string> parts) {
  Sha256 h;
  h.field(name);
  for (const auto& p : parts) h.field(p);
  return h.hex();
}

// NaN-safe numbers for JSON stage outputs.
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline double dbl(const json& j) { return j.is_number() ? j.get<double>() : std::nan(""); }

// ---------------------------------------------------------------------------
// Stage: curate

inline json stage_curate(const RunConfig& c) {
  const auto map = catalog::CategoryMap::load(c.category_map);
  std::vector<catalog::RawDetection> dets;
  for (const auto& m : c.manifests)
    for (const auto& row : read_jsonl(m)) {
      auto d = catalog::RawDetection::from_json(row);
      if (!fs::path(d.image_path).is_absolute()) d.image_path = (m.parent_path() / d.image_path).string();
      dets.push_back(std::move(d));
    }
  const auto res = catalog::curate(dets, map);
  json items = json::array(), rej = json::array();
  for (const auto& i : res.items) items.push_back(i.to_json());
  for (const auto& r : res.rejections) rej.push_back(r.to_json());
  return {{"items", items}, {"rejections", rej}};
}

inline std::string curate_inputs_hash(const RunConfig& c) {
  Sha256 h;
  h.field(sha256_file(c.category_map));
  for (const auto& m : c.manifests) {
    h.field(sha256_file(m));
    for (const auto& row : read_jsonl(m)) {
      fs::path p = row.value("image_path", "");
      if (!p.is_absolute()) p = m.parent_path() / p;
      h.field(fs::exists(p) ? sha256_file(p) : std::string("missing:") + p.string());
    }
  }
  return h.hex();
}

inline std::vector<catalog::ItemRecord> items_of(const json& curated) {
  std::vector<catalog::ItemRecord> out;
  for (const auto& j : curated.at("items")) out.push_back(catalog::ItemRecord::from_json(j));
  return out;
}

// ---------------------------------------------------------------------------
// Stage: perturb

inline std::string file_key(const std::string& variant_key) {
  std::string out;
  for (char ch : variant_key) {
    switch (ch) {
      case ':': out += '_'; break;
      case '|': out += "__"; break;
      case '+': out += 'p'; break;
      case '-': out += 'm'; break;
      default: out += ch;
    }
  }
  return out;
}

inline perturb::Scene scene_of(const catalog::ItemRecord& it) {
  perturb::Scene s;
  s.item_id = it.item_id;
  s.image = read_png(it.image_path);
  s.mask = it.object_mask;
  s.salient = it.salient_mask();
  return s;
}

inline std::vector<perturb::PerturbationSpec> first_order_specs(const RunConfig& c) {
  return perturb::expand_specs(c.families);
}

inline json stage_perturb(const RunConfig& c, const std::vector<catalog::ItemRecord>& items,
                          const fs::path& work) {
  const auto specs = first_order_specs(c);
  json rows = json::array();
  struct Pending {
    json row;
    std::optional<perturb::Diagnostics> diag;
  };
  std::vector<Pending> all;
  std::map<std::string, std::map<std::string, perturb::VariantRecord>> ok_first;

  auto record = [&](const std::string& item, const std::string& key,
                    const perturb::VariantRecord* v, const std::string& failure) {
    Pending p;
    p.row = {{"item_id", item}, {"variant_key", key}};
    if (v) {
      const std::string rel = "variants/" + item + "/" + file_key(key) + ".png";
      fs::create_directories((work / rel).parent_path());
      write_png((work / rel).string(), v->image);
      p.row["path"] = rel;
      p.row["status"] = "ok";
      p.row["tries"] = v->tries;
      if (v->diagnostics)
        p.row["diagnostics"] = {{"bg_delta", num(v->diagnostics->bg_delta)},
                                {"seam_ratio", num(v->diagnostics->seam_ratio)}};
      p.diag = v->diagnostics;
    } else {
      p.row["status"] = "failed";
      p.row["error"] = failure;
    }
    all.push_back(std::move(p));
  };

  for (const auto& it : items) {
    perturb::Scene scene;
    try {
      scene = scene_of(it);
    } catch (const Error& e) {
      for (const auto& s : specs) record(it.item_id, s.key(), nullptr, e.what());
      continue;
    }
    for (const auto& s : specs) {
      try {
        auto v = perturb::apply(scene, s, c.reposition);
        record(it.item_id, s.key(), &v, "");
        ok_first[it.item_id].emplace(s.key(), std::move(v));
      } catch (const Error& e) {
        record(it.item_id, s.key(), nullptr, e.what());
      }
    }
  }

  // Artifact filter over successful repositioning variants.
  std::vector<std::size_t> ranked;
  std::vector<perturb::Diagnostics> diags;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i].diag) {
      ranked.push_back(i);
      diags.push_back(*all[i].diag);
    }
  std::set<std::size_t> keep;
  for (auto k : perturb::artifact_keep(diags, c.filter_q, c.filter_mode)) keep.insert(ranked[k]);
  for (auto i : ranked)
    if (!keep.count(i)) {
      all[i].row["status"] = "filtered";
      ok_first[all[i].row["item_id"].get<std::string>()].erase(all[i].row["variant_key"].get<std::string>());
    }

  // Cross-family spatial chains for the calibration tree.
  if (c.calibration_enabled && c.second_order) {
    for (const auto& node : calibrate::variant_tree(specs, {"base"}, true)) {
      const auto chain = perturb::parse_chain(node.variant);
      if (chain.size() != 2) continue;
      for (const auto& it : items) {
        const auto& firsts = ok_first[it.item_id];
        const auto f = firsts.find(chain[0].key());
        if (f == firsts.end()) continue;  // first step failed or filtered
        try {
          auto v = perturb::apply(f->second.scene(), chain[1], c.reposition);
          record(it.item_id, node.variant, &v, "");
        } catch (const Error& e) {
          record(it.item_id, node.variant, nullptr, e.what());
        }
      }
    }
  }
  for (auto& p : all) rows.push_back(std::move(p.row));
  return {{"variants", rows}};
}

inline bool variants_present(const json& out, const fs::path& work) {
  for (const auto& v : out.at("variants"))
    if (v.at("status") == "ok" && !fs::exists(work / v.at("path").get<std::string>())) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Stage: captions

inline json stage_captions(const RunConfig& c, const std::vector<catalog::ItemRecord>& items) {
  const auto lex = captiongen::Lexicon::load(c.lexicon);
  json rows = json::array();
  for (const auto& it : items) {
    const auto set = captiongen::build_caption_set(lex, it.label, it.category, c.caption_families);
    json caps = json::object(), matched = json::object(), fams = json::object(), rej = json::array();
    for (const auto& v : set.variants) {
      caps[v.key] = v.text;
      if (v.length_matched_to) matched[v.key] = *v.length_matched_to;
      if (v.family) fams[v.key] = *v.family;
    }
    for (const auto& r : set.rejected) rej.push_back(r.to_json());
    rows.push_back({{"item_id", it.item_id},
                    {"captions", caps},
                    {"length_matched", matched},
                    {"families", fams},
                    {"rejected", rej}});
  }
  return {{"items", rows},
          {"valence_poles", {{"positive", lex.positive_poles}, {"negative", lex.negative_poles}}}};
}

// ---------------------------------------------------------------------------
// Stage: score

struct Scores {
  // scorer -> item -> node -> score
  std::map<std::string, calibrate::ScoreTable> tables;
  std::map<std::string, double> range_width;
  std::size_t n_queries = 0, n_missing = 0;

  static Scores from_json(const json& j) {
    Scores s;
    for (const auto& [id, v] : j.at("scorers").items()) {
      auto& t = s.tables[id];
      for (const auto& r : v.at("records"))
        t.set(r[0].get<std::string>(), {r[1].get<std::string>(), r[2].get<std::string>()},
              r[3].get<double>());
      s.range_width[id] = v.at("range_width").get<double>();
      s.n_queries += v.at("n_queries").get<std::size_t>();
      s.n_missing += v.at("missing").size();
    }
    return s;
  }
};

inline json stage_score(const RunConfig& c, std::vector<std::unique_ptr<scorebridge::Scorer>>& scorers,
                        const std::vector<catalog::ItemRecord>& items, const json& variants,
                        const json& captions, const fs::path& work) {
  std::map<std::string, const catalog::ItemRecord*> by_id;
  for (const auto& it : items) by_id[it.item_id] = &it;
  std::map<std::string, std::map<std::string, std::string>> caps;
  for (const auto& row : captions.at("items"))
    caps[row.at("item_id")] = row.at("captions").get<std::map<std::string, std::string>>();

  std::vector<scorebridge::ScoreQuery> queries;
  for (const auto& it : items) {
    const auto& cs = caps[it.item_id];
    for (const auto& [key, text] : cs) queries.push_back({it.item_id, "orig", key, text, it.image_path});
  }
  for (const auto& v : variants.at("variants")) {
    if (v.at("status") != "ok") continue;
    const std::string id = v.at("item_id");
    queries.push_back({id, v.at("variant_key"), "base", caps[id].at("base"),
                       (work / v.at("path").get<std::string>()).string()});
  }
  std::sort(queries.begin(), queries.end(), [](const auto& a, const auto& b) {
    return std::tie(a.item_id, a.variant_key, a.caption_key) <
           std::tie(b.item_id, b.variant_key, b.caption_key);
  });

  scorebridge::ScoreCache cache(cache_dir(c) / "scores.jsonl");
  json out = json::object();
  for (auto& s : scorers) {
    scorebridge::ScoreService svc(*s, cache);
    const auto res = svc.score(queries);
    json recs = json::array(), miss = json::array();
    for (const auto& r : res.records) recs.push_back({r.item_id, r.variant_key, r.caption_key, r.score});
    for (const auto& m : res.missing) miss.push_back(m.to_json());
    out[s->id()] = {{"records", recs},
                    {"missing", miss},
                    {"n_queries", queries.size()},
                    {"range_width", s->range_width()}};
  }
  return {{"scorers", out}};
}

// ---------------------------------------------------------------------------
// Stage: analyze (paired cells and factor tests)

struct CaptionInfo {
  std::map<std::string, std::string> neutral_of;  // modifier key -> neutral key
  std::map<std::string, std::string> family_of;   // modifier key -> lexicon family
};

inline CaptionInfo caption_info(const json& captions) {
  CaptionInfo ci;
  for (const auto& row : captions.at("items")) {
    for (const auto& [k, v] : row.at("length_matched").items()) ci.neutral_of[k] = v;
    for (const auto& [k, v] : row.at("families").items()) ci.family_of[k] = v;
  }
  return ci;
}

struct CellDef {
  std::string dataset;
  std::string label;     // perturbation key or modifier caption key
  std::string axis;      // spatial | object | societal
  std::string group;     // perturbation family or lexicon family
  calibrate::Node pert;  // perturbed node
  calibrate::Node base;  // matched original
};

inline std::vector<CellDef> cell_defs(const RunConfig& c, const std::vector<catalog::ItemRecord>& items,
                                      const CaptionInfo& ci) {
  std::set<std::string> datasets;
  for (const auto& it : items) datasets.insert(it.dataset);
  std::vector<CellDef> out;
  for (const auto& ds : datasets) {
    for (const auto& s : first_order_specs(c))
      out.push_back({ds, s.key(), calibrate::group_name(calibrate::group_of(s.family)),
                     perturb::family_name(s.family), {s.key(), "base"}, {}});
    for (const auto& [mod, neutral] : ci.neutral_of)
      out.push_back({ds, mod, "societal", ci.family_of.count(mod) ? ci.family_of.at(mod) : "",
                     {"orig", mod}, {"orig", neutral}});
  }
  return out;
}

inline std::vector<stats::PairedSample> samples_for(const CellDef& d, const calibrate::ScoreTable& t,
                                                    const std::vector<catalog::ItemRecord>& items) {
  std::vector<stats::PairedSample> out;
  for (const auto& it : items) {
    if (it.dataset != d.dataset) continue;
    const auto b = t.get(it.item_id, d.base), p = t.get(it.item_id, d.pert);
    if (b && p) out.push_back({it.item_id, *b, *p});
  }
  return out;
}

inline json cell_json(const CellDef& d, const stats::ReportCell& c) {
  return {{"scorer", c.scorer_id}, {"dataset", c.dataset},   {"axis", d.axis},
          {"group", d.group},      {"perturbation", c.family}, {"n", c.n},
          {"n_excluded", c.n_excluded}, {"median", num(c.median)}, {"ci_lo", num(c.ci_lo)},
          {"ci_hi", num(c.ci_hi)}, {"cliffs_delta", num(c.cliffs_delta)}, {"test", c.test},
          {"statistic", num(c.statistic)}, {"p_value", num(c.p_value)}, {"p_holm", num(c.p_holm)},
          {"normal", c.normal},    {"status", c.status},     {"detail", c.detail}};
}

inline json stage_analyze(const RunConfig& c, const std::vector<catalog::ItemRecord>& items,
                          const json& captions, const Scores& scores) {
  const auto ci = caption_info(captions);
  const auto defs = cell_defs(c, items, ci);
  stats::PipelineOptions opt;
  opt.n_resamples = c.n_resamples;
  opt.seed = c.seed;

  std::vector<stats::ReportCell> cells;
  std::vector<const CellDef*> cell_def;
  std::vector<stats::FactorTest> factors;
  std::map<std::string, const catalog::ItemRecord*> by_id;
  for (const auto& it : items) by_id[it.item_id] = &it;

  for (const auto& [scorer, table] : scores.tables) {
    for (const auto& d : defs) {
      auto samples = samples_for(d, table, items);
      cells.push_back(stats::paired_pipeline(scorer, d.dataset, d.label, samples, opt));
      cell_def.push_back(&d);
      if (d.axis == "societal") continue;
      // Size-bin and category factors on the per-item relative change.
      std::map<std::string, std::vector<double>> by_bin, by_cat;
      for (const auto& s : samples) {
        try {
          const double pct = stats::pct_delta(s.s_orig, s.s_pert);
          by_bin[by_id.at(s.item_id)->size_bin].push_back(pct);
          by_cat[catalog::category_name(by_id.at(s.item_id)->category)].push_back(pct);
        } catch (const DegenerateBase&) {
        }
      }
      for (const auto& [factor, groups] : {std::pair{"size_bin", &by_bin}, std::pair{"category", &by_cat}}) {
        std::vector<std::pair<std::string, std::vector<double>>> g(groups->begin(), groups->end());
        factors.push_back(stats::factor_test(scorer, d.dataset, d.label, factor, g));
      }
    }
  }
  stats::apply_holm(cells);
  stats::apply_holm(factors);
  json jc = json::array(), jf = json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) jc.push_back(cell_json(*cell_def[i], cells[i]));
  for (const auto& f : factors)
    jf.push_back({{"scorer", f.scorer_id},   {"dataset", f.dataset},     {"perturbation", f.family},
                  {"factor", f.factor},      {"levels", f.levels},       {"statistic", num(f.statistic)},
                  {"p_value", num(f.p_value)}, {"p_holm", num(f.p_holm)}, {"status", f.status}});
  return {{"cells", jc}, {"factors", jf}};
}

// ---------------------------------------------------------------------------
// Stage: rrf

inline json stage_rrf(const RunConfig& c, const std::vector<catalog::ItemRecord>& items,
                      const json& captions, const Scores& scores) {
  const auto ci = caption_info(captions);
  json rows = json::array();
  for (const auto& [scorer, table] : scores.tables) {
    std::map<std::string, rrf::ItemShifts> groups;
    for (perturb::Family f : c.families) {
      auto& g = groups[perturb::family_name(f)];
      for (const auto& it : items) {
        const auto o = table.get(it.item_id, {});
        if (!o) continue;
        std::vector<double> v;
        for (const auto& s : perturb::expand_specs({f}))
          if (const auto p = table.get(it.item_id, {s.key(), "base"})) v.push_back(*p - *o);
        if (!v.empty()) g.push_back(std::move(v));
      }
    }
    for (const auto& it : items) {
      std::map<std::string, std::vector<double>> per_family;
      for (const auto& [mod, neutral] : ci.neutral_of) {
        const auto m = table.get(it.item_id, {"orig", mod}), n = table.get(it.item_id, {"orig", neutral});
        if (m && n && ci.family_of.count(mod)) per_family[ci.family_of.at(mod)].push_back(*m - *n);
      }
      for (auto& [fam, v] : per_family) groups[fam].push_back(std::move(v));
    }
    for (const auto& [family, shifts] : groups) {
      try {
        if (shifts.empty()) throw InsufficientData("no scored shifts");
        for (auto e : rrf::gap_sweep(shifts, c.gaps, scores.range_width.at(scorer), c.rrf_boot, c.seed)) {
          e.scorer_id = scorer;
          e.family = family;
          rows.push_back(e.to_json());
        }
      } catch (const Error& e) {
        rows.push_back({{"scorer", scorer}, {"family", family}, {"error", e.what()}});
      }
    }
  }
  return {{"rows", rows}};
}

// ---------------------------------------------------------------------------
// Stage: calibrate

inline json stage_calibrate(const RunConfig& c, const std::vector<catalog::ItemRecord>& items,
                            const json& captions, const Scores& scores) {
  json reports = json::array();
  if (!c.calibration_enabled) return {{"reports", reports}, {"status", "disabled"}};
  std::vector<std::string> targets = c.calibration_scorers;
  if (targets.empty())
    for (const auto& [id, t] : scores.tables)
      if (std::find(c.calibration.reference_scorers.begin(), c.calibration.reference_scorers.end(), id) ==
          c.calibration.reference_scorers.end())
        targets.push_back(id);

  std::vector<std::string> ids;
  for (const auto& it : items) ids.push_back(it.item_id);
  const auto ci = caption_info(captions);
  calibrate::FairnessSpec fairness;
  for (const auto& [mod, neutral] : ci.neutral_of)
    if (ci.family_of.count(mod)) fairness.pairs[mod] = {ci.family_of.at(mod), neutral};

  for (const auto& scorer : targets) {
    try {
      if (c.calibration.reference_scorers.empty())
        throw ConfigError("calibration.reference_scorers: no reference scorer configured");
      if (ids.size() < 2) throw InsufficientData("too few items to split");
      const auto [dev, eval] = calibrate::split_items(ids, c.dev_fraction, c.seed);
      const auto& raw = scores.tables.at(scorer);
      auto cfg = c.calibration;
      cfg.dev_items = dev;
      json weight_note;
      if (c.weight_mode == "proportional") {
        std::map<std::string, double> base;
        for (auto g : calibrate::kGroups)
          base[calibrate::group_name(g)] = calibrate::median_sensitivity(raw, g, dev).value_or(0.0);
        const auto ws = calibrate::weight_scheme(base, "proportional");
        cfg.weights = ws.weights;
        if (ws.warning) weight_note = *ws.warning;
      }
      std::map<std::string, const calibrate::ScoreTable*> refs;
      for (const auto& r : cfg.reference_scorers) refs[r] = &scores.tables.at(r);
      const calibrate::Calibrator cal(raw, dev);
      const auto sel = calibrate::select_lambda(cfg, cal, refs);
      const auto after = cal.apply(sel.lambda_star, cfg.weights);
      calibrate::ReportOptions ro;
      ro.rrf_gap_pct = 0.7;
      ro.range_width = scores.range_width.at(scorer);
      ro.n_boot = c.rrf_boot;
      ro.seed = c.seed;
      auto rep = calibrate::calibration_report(scorer, raw, after, eval, refs, fairness, sel, cfg, ro);
      rep["weight_mode"] = c.weight_mode;
      if (!weight_note.is_null()) rep["weight_warning"] = weight_note;
      reports.push_back(rep);
    } catch (const Error& e) {
      reports.push_back({{"scorer", scorer}, {"error", e.what()}});
    }
  }
  return {{"reports", reports}};
}

// ---------------------------------------------------------------------------
// Stage: humanval

inline json stage_humanval(const RunConfig& c, const std::vector<catalog::ItemRecord>& items,
                           const json& captions, const Scores& scores) {
  std::vector<humanval::AnnotationItem> anns;
  if (c.annotations) {
    anns = humanval::load_annotations(*c.annotations);
  } else if (c.synthetic_annotations) {
    std::vector<std::string> ids;
    for (const auto& it : items) ids.push_back(it.item_id);
    anns = humanval::synthetic_annotations(ids, c.seed);
  } else {
    return {{"status", "no annotations configured"}};
  }
  const auto defs = cell_defs(c, items, caption_info(captions));
  std::vector<humanval::CellSamples> cells;
  for (const auto& [scorer, table] : scores.tables)
    for (const auto& d : defs)
      if (d.axis != "societal") cells.push_back({scorer, d.dataset, d.label, samples_for(d, table, items)});
  stats::PipelineOptions opt;
  opt.n_resamples = c.n_resamples;
  opt.seed = c.seed;
  std::vector<humanval::RefilterRow> rows;
  for (auto mode : {humanval::RefilterMode::kDropOneSided, humanval::RefilterMode::kDropPartials}) {
    // Refilter rows name the cell by perturbation key; annotations scope by
    // family, so map each key back to its family name.
    std::vector<humanval::CellSamples> scoped = cells;
    for (auto& cs : scoped) cs.family = perturb::family_name(perturb::PerturbationSpec::parse(cs.family).family);
    auto r = humanval::refilter_and_recompute(scoped, anns, mode, opt);
    for (std::size_t i = 0; i < r.size(); ++i) r[i].family = cells[i].family;
    rows.insert(rows.end(), r.begin(), r.end());
  }
  auto rep = humanval::human_validation_report(anns, rows);
  rep["source"] = c.annotations ? "file" : "synthetic";
  return rep;
}

// ---------------------------------------------------------------------------
// Valence (part of the analyze stage outputs)

inline json valence_reports(const RunConfig& c, std::vector<std::unique_ptr<scorebridge::Scorer>>& scorers,
                            const json& captions, const json& analyzed) {
  json out = json::object();
  const auto pos = captions.at("valence_poles").at("positive").get<std::vector<std::string>>();
  const auto neg = captions.at("valence_poles").at("negative").get<std::vector<std::string>>();
  for (auto& s : scorers) {
    if (!s->info().can("embed_text")) {
      out[s->id()] = {{"error", "Unsupported: no text embeddings"}};
      continue;
    }
    try {
      std::map<std::string, double> shifts;
      std::map<std::string, std::vector<double>> embeds;
      for (const auto& cell : analyzed.at("cells")) {
        if (cell.at("scorer") != s->id() || cell.at("axis") != "societal" || !cell.at("median").is_number())
          continue;
        const std::string word = scorebridge::modifier_of(cell.at("perturbation").get<std::string>());
        if (word.empty() || shifts.count(word)) continue;
        shifts[word] = cell.at("median").get<double>();
        embeds[word] = s->embed_text(word);
      }
      for (const auto& w : pos) embeds[w] = s->embed_text(w);
      for (const auto& w : neg) embeds[w] = s->embed_text(w);
      const auto r = scorebridge::valence_analysis(shifts, embeds, pos, neg);
      out[s->id()] = {{"modifiers", r.modifiers},
                      {"projections", r.projections},
                      {"shifts", r.shifts},
                      {"spearman_rho", num(r.spearman_rho)}};
    } catch (const Error& e) {
      out[s->id()] = {{"error", e.what()}};
    }
  }
  (void)c;
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string csv_num(const json& v) {
  if (v.is_number_float()) return fmt(v.get<double>());
  if (v.is_number()) return v.dump();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_null()) return "";
  if (v.is_string()) return csv_escape(v.get<std::string>());
  return csv_escape(v.dump());
}

inline std::string rows_csv(const std::vector<std::string>& cols, const json& rows) {
  std::string out;
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  out += "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + csv_num(r.value(cols[i], json()));
    out += "\n";
  }
  return out;
}

inline const std::vector<std::string>& cell_columns() {
  static const std::vector<std::string> cols = {
      "scorer", "dataset", "axis", "group", "perturbation", "n", "n_excluded", "median", "ci_lo",
      "ci_hi", "cliffs_delta", "test", "statistic", "p_value", "p_holm", "normal", "status"};
  return cols;
}

inline std::string safe_name(std::string s) {
  for (auto& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  return s;
}

inline void write_cell_figures(const fs::path& dir, const json& cells) {
  // scorer -> axis kind -> group -> bars
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<svg::Bar>>>> figs;
  for (const auto& c : cells) {
    if (!c.at("median").is_number()) continue;
    const std::string kind = c.at("axis") == "societal" ? "captions" : "image";
    figs[c.at("scorer")][kind][c.at("dataset").get<std::string>() + " " + c.at("group").get<std::string>()]
        .push_back({c.at("perturbation"), dbl(c.at("median")), dbl(c.at("ci_lo")), dbl(c.at("ci_hi"))});
  }
  for (const auto& [scorer, kinds] : figs)
    for (const auto& [kind, groups] : kinds) {
      std::vector<svg::Group> gs;
      for (const auto& [name, bars] : groups) gs.push_back({name, bars});
      write_file(dir / (safe_name(scorer) + "_" + kind + "_cells.svg"),
                 svg::bar_chart(scorer + ": median %change (" + kind + ")", "median %change, 95% CI", gs));
    }
}

inline void write_rrf_figures(const fs::path& dir, const json& rows) {
  std::map<std::string, std::map<std::string, std::vector<svg::Bar>>> figs;
  for (const auto& r : rows) {
    if (r.contains("error")) continue;
    figs[r.at("scorer")][r.at("family")].push_back(
        {"d=" + fmt(dbl(r.at("d"))), dbl(r.at("rrf")), dbl(r.at("ci_lo")), dbl(r.at("ci_hi"))});
  }
  for (const auto& [scorer, groups] : figs) {
    std::vector<svg::Group> gs;
    for (const auto& [name, bars] : groups) gs.push_back({name, bars});
    write_file(dir / (safe_name(scorer) + "_rrf.svg"),
               svg::bar_chart(scorer + ": risk of ranking flip", "RRF, 95% CI", gs));
  }
}

inline void write_calibration_figures(const fs::path& dir, const json& reports) {
  for (const auto& r : reports) {
    if (!r.contains("sensitivity")) continue;
    std::vector<svg::Group> gs;
    for (const auto& [axis, v] : r.at("sensitivity").items())
      gs.push_back({axis, {{"before", dbl(v.at("before_pct"))}, {"after", dbl(v.at("after_pct"))}}});
    write_file(dir / ("calibration_" + safe_name(r.at("scorer")) + ".svg"),
               svg::bar_chart(r.at("scorer").get<std::string>() + ": sensitivity before/after calibration",
                              "median |%change|", gs));
  }
}

struct StageOutputs {
  std::optional<json> curated, variants, captions, scores, analyzed, rrf, calibration, humanval, valence;
};

inline json summary_json(const RunConfig& c, const StageOutputs& o) {
  json hashed = c.resolved;
  hashed.erase("output_dir");  // location does not change results
  json s = {{"seed", c.seed}, {"n_resamples", c.n_resamples}, {"config_sha256", sha256_hex(hashed.dump())}};
  if (o.curated) {
    s["n_items"] = o.curated->at("items").size();
    s["n_rejected"] = o.curated->at("rejections").size();
  }
  if (o.variants) {
    std::map<std::string, std::size_t> st;
    for (const auto& v : o.variants->at("variants")) ++st[v.at("status").get<std::string>()];
    s["variants"] = st;
  }
  if (o.scores) {
    json per = json::object();
    for (const auto& [id, v] : o.scores->at("scorers").items())
      per[id] = {{"n_queries", v.at("n_queries")}, {"n_scored", v.at("records").size()}, {"n_missing", v.at("missing").size()}};
    s["scores"] = per;
  }
  if (o.analyzed) {
    std::size_t excluded = 0;
    for (const auto& c2 : o.analyzed->at("cells")) excluded += c2.at("n_excluded").get<std::size_t>();
    s["n_cells"] = o.analyzed->at("cells").size();
    s["n_degenerate_bases"] = excluded;
  }
  return s;
}

// Writes every artifact that the completed stages support. Empty inputs
// give header-only CSVs.
inline void emit_reports(const RunConfig& c, const StageOutputs& o, const fs::path& dir) {
  try {
    fs::create_directories(dir / "figures");
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create report directory " + dir.string() + ": " + e.what());
  }
  const json no_rows = json::array();
  if (o.curated) write_file(dir / "rejections.csv", rows_csv({"item_id", "rule", "detail"}, o.curated->at("rejections")));
  if (o.analyzed) {
    const auto& cells = o.analyzed->at("cells");
    write_file(dir / "cells.csv", rows_csv(cell_columns(), cells));
    write_file(dir / "cells.json", cells.dump(1) + "\n");
    write_file(dir / "factors.csv",
               rows_csv({"scorer", "dataset", "perturbation", "factor", "levels", "statistic", "p_value",
                         "p_holm", "status"},
                        o.analyzed->at("factors")));
    write_cell_figures(dir / "figures", cells);
  }
  if (o.valence) write_file(dir / "valence_report.json", o.valence->dump(1) + "\n");
  if (o.rrf) {
    const auto& rows = o.rrf->at("rows");
    write_file(dir / "rrf_report.csv",
               rows_csv({"scorer", "family", "d", "rrf", "ci_lo", "ci_hi"}, rows));
    write_file(dir / "rrf_report.json", rows.dump(1) + "\n");
    write_rrf_figures(dir / "figures", rows);
  }
  if (o.calibration) {
    const auto& reps = o.calibration->at("reports");
    write_file(dir / "calibration_report.json", o.calibration->dump(1) + "\n");
    std::vector<json> ok;
    for (const auto& r : reps)
      if (!r.contains("error")) ok.push_back(r);
    write_file(dir / "calibration_report.csv", calibrate::calibration_csv(ok));
    write_calibration_figures(dir / "figures", reps);
  }
  if (o.humanval) write_file(dir / "human_validation_report.json", o.humanval->dump(1) + "\n");
  write_file(dir / "summary.json", summary_json(c, o).dump(1) + "\n");
  (void)no_rows;
}

// ---------------------------------------------------------------------------
// Run

struct RunSummary {
  json summary;
  std::map<std::string, bool> cache_hits;
  double failure_rate = 0.0;
  fs::path report_dir;
  StageOutputs outputs;
};

inline double failure_rate(const StageOutputs& o, json* detail = nullptr) {
  std::size_t vf = 0, va = 0, miss = 0, q = 0, excl = 0, samples = 0;
  if (o.variants)
    for (const auto& v : o.variants->at("variants")) {
      if (v.at("variant_key").get<std::string>().find('|') != std::string::npos) continue;  // chains
      ++va;
      vf += v.at("status") == "failed";
    }
  if (o.scores)
    for (const auto& [id, v] : o.scores->at("scorers").items()) {
      q += v.at("n_queries").get<std::size_t>();
      miss += v.at("missing").size();
    }
  if (o.analyzed)
    for (const auto& c : o.analyzed->at("cells")) {
      excl += c.at("n_excluded").get<std::size_t>();
      samples += c.at("n").get<std::size_t>() + c.at("n_excluded").get<std::size_t>();
    }
  auto rate = [](std::size_t a, std::size_t b) { return b ? double(a) / double(b) : 0.0; };
  const double r = std::max({rate(vf, va), rate(miss, q), rate(excl, samples)});
  if (detail)
    *detail = {{"variant_failures", vf},   {"variants_attempted", va}, {"missing_scores", miss},
               {"score_queries", q},       {"degenerate_bases", excl}, {"paired_samples", samples},
               {"rate", r}};
  return r;
}

inline void check_budget(const RunConfig& c, const StageOutputs& o) {
  json d;
  const double r = failure_rate(o, &d);
  if (r > c.max_failure_rate)
    throw FailureBudgetExceeded("per-item failure rate " + fmt(r) + " exceeds max_item_failure_rate " +
                                fmt(c.max_failure_rate) + " (" + d.dump() + ")");
}

inline RunSummary run_audit(const RunConfig& c, Stage until = Stage::kAll) {
  // Handshakes first: an unavailable scorer aborts before any image work.
  std::vector<std::unique_ptr<scorebridge::Scorer>> scorers;
  for (const auto& e : c.scorers) scorers.push_back(make_scorer(e));

  StageRunner runner(c.output_dir / "work");
  const fs::path work = runner.work();
  StageOutputs o;
  RunSummary rs;
  auto done = [&] {
    rs.report_dir = c.output_dir / "reports";
    emit_reports(c, o, rs.report_dir);
    rs.summary = summary_json(c, o);
    rs.cache_hits = runner.hits();
    rs.failure_rate = failure_rate(o);
    rs.outputs = o;
    json status = {{"stages", rs.cache_hits}, {"failure_rate", rs.failure_rate}};
    write_file(c.output_dir / "run_summary.json", status.dump(1) + "\n");
    return rs;
  };

  const std::string h_cur = stage_hash("curate", {curate_inputs_hash(c)});
  o.curated = runner.run("curate", h_cur, [&] { return stage_curate(c); });
  const auto items = items_of(*o.curated);
  if (until == Stage::kCurate) return done();

  json pert_cfg = {{"families", c.section("families")}, {"perturb", c.section("perturb")},
                   {"filter", c.section("artifact_filter")},
                   {"chains", c.calibration_enabled && c.second_order}};
  const std::string h_pert = stage_hash("perturb", {h_cur, pert_cfg.dump()});
  o.variants = runner.run("perturb", h_pert, [&] { return stage_perturb(c, items, work); },
                          [&](const json& j) { return variants_present(j, work); });
  if (until == Stage::kPerturb) return done();

  const std::string h_cap = stage_hash("captions", {h_cur, sha256_file(c.lexicon), c.section("captions").dump()});
  o.captions = runner.run("captions", h_cap, [&] { return stage_captions(c, items); });
  if (until == Stage::kCaptions) return done();

  json scorer_cfg = json::array();
  for (const auto& e : c.scorers) scorer_cfg.push_back({{"id", e.id}, {"type", e.type}, {"spec", e.spec}});
  const std::string h_score = stage_hash("score", {h_pert, h_cap, scorer_cfg.dump()});
  o.scores = runner.run("score", h_score, [&] { return stage_score(c, scorers, items, *o.variants, *o.captions, work); });
  check_budget(c, o);
  const auto scores = Scores::from_json(*o.scores);
  if (until == Stage::kScore) return done();

  const std::string h_stats = stage_hash("analyze", {h_score, c.section("stats").dump(), c.section("families").dump()});
  o.analyzed = runner.run("analyze", h_stats, [&] { return stage_analyze(c, items, *o.captions, scores); });
  o.valence = runner.run("valence", stage_hash("valence", {h_stats}),
                         [&] { return valence_reports(c, scorers, *o.captions, *o.analyzed); });
  check_budget(c, o);
  if (until == Stage::kAnalyze) return done();

  const std::string h_rrf = stage_hash("rrf", {h_score, c.section("rrf").dump(), c.section("stats").dump()});
  o.rrf = runner.run("rrf", h_rrf, [&] { return stage_rrf(c, items, *o.captions, scores); });
  if (until == Stage::kRrf) return done();

  const std::string h_cal = stage_hash("calibrate", {h_score, c.section("calibration").dump(),
                                                     c.section("stats").dump(), c.section("rrf").dump()});
  o.calibration = runner.run("calibrate", h_cal, [&] { return stage_calibrate(c, items, *o.captions, scores); });
  if (until == Stage::kCalibrate) return done();

  std::string ann_hash = "none";
  if (c.annotations) ann_hash = sha256_file(*c.annotations);
  const std::string h_hv = stage_hash("humanval", {h_stats, c.section("humanval").dump(), ann_hash});
  o.humanval = runner.run("humanval", h_hv, [&] { return stage_humanval(c, items, *o.captions, scores); });
  return done();
}

}  // namespace capaudit::audit
