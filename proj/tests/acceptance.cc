// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <sstream>

#include "capaudit/audit.hpp"
#include "capaudit/calibrate.hpp"
#include "capaudit/humanval.hpp"
#include "capaudit/perturb.hpp"
#include "capaudit/rrf.hpp"
#include "capaudit/stats.hpp"
#include "capaudit/synth.hpp"
#include "mock_tables.hpp"
#include "oracles.hpp"
#include "scenes.hpp"

namespace {

using namespace capaudit;

// Collects failed sub-checks for one criterion.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++n_;
    if (!ok && failures_.size() < 8) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  bool ok() const { return failed_ == 0; }
  std::string summary() const {
    std::ostringstream os;
    os << (n_ - failed_) << "/" << n_ << " checks";
    for (const auto& f : failures_) os << "; " << f;
    return os.str();
  }
  std::string note;

 private:
  std::size_t n_ = 0, failed_ = 0;
  std::vector<std::string> failures_;
};

bool run_criterion(const std::string& name, double budget_s, const std::function<void(Checks&)>& body) {
  Checks c;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.expect(false, std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.expect(secs < budget_s, "runtime " + fmt(secs) + " s exceeds " + fmt(budget_s) + " s");
  std::cout << (c.ok() ? "PASS " : "FAIL ") << name << " (" << c.summary();
  if (!c.note.empty()) std::cout << "; " << c.note;
  std::cout << "; " << fixed(secs, 1) << " s)" << std::endl;
  return c.ok();
}

std::string S(double v) { return fmt(v); }

// ---------------------------------------------------------------------------

void statistics_oracle(Checks& c) {
  Rng rng(2025);
  // Wilcoxon exact p against full sign enumeration, with ties.
  for (std::size_t n = 1; n <= 12; ++n)
    for (int rep = 0; rep < 5; ++rep) {
      std::vector<double> d(n);
      for (auto& v : d) v = (rng.below(2) ? 1 : -1) * (1.0 + double(rng.below(rep % 2 ? 4 : 50)));
      const double got = stats::wilcoxon_signed_rank(d).p_value;
      const double want = oracle::wilcoxon_enumerated_p(d);
      c.expect(std::abs(got - want) < 1e-12, "wilcoxon n=" + std::to_string(n) + " " + S(got) + " vs " + S(want));
    }
  // Holm step-down.
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> p(1 + rng.below(15));
    for (auto& v : p) v = rng.uniform() * (rep % 3 ? 1.0 : 0.05);
    c.expect(stats::holm_adjust(p) == oracle::holm_hand(p), "holm vector " + std::to_string(rep));
  }
  // Cliff's delta against O(n m) counting.
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> a(1 + rng.below(30)), b(1 + rng.below(30));
    for (auto& v : a) v = double(rng.below(10));
    for (auto& v : b) v = double(rng.below(10)) + 0.5 * double(rng.below(2));
    c.expect(stats::cliffs_delta(a, b) == oracle::cliffs_brute(a, b), "cliffs pair " + std::to_string(rep));
  }
  // Kruskal-Wallis against hand ranks.
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<std::vector<double>> g(2 + rng.below(4));
    for (auto& grp : g) {
      grp.resize(2 + rng.below(8));
      for (auto& v : grp) v = double(rng.below(6));
    }
    try {
      const double got = stats::kruskal_wallis(g).statistic;
      c.expect(std::abs(got - oracle::kruskal_hand(g)) < 1e-9, "kruskal set " + std::to_string(rep));
    } catch (const DegenerateSample&) {
      // all values tied: no statistic to compare
    }
  }
  // BCa against the independently coded reference, twice for bit-reproducibility.
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> x(10 + rng.below(30));
    for (auto& v : x) v = std::exp(rng.normal());
    const auto a = stats::bca_ci(x, stats::median_statistic, 10000, 2025);
    const auto b = stats::bca_ci(x, stats::median_statistic, 10000, 2025);
    const auto ref = oracle::reference_bca_median(x, 10000, 2025, 0.95);
    c.expect(std::abs(a.lo - ref.lo) < 1e-9 && std::abs(a.hi - ref.hi) < 1e-9,
             "bca median sample " + std::to_string(rep));
    c.expect(a.lo == b.lo && a.hi == b.hi && a.point == b.point, "bca reproducible " + std::to_string(rep));
    const auto m = stats::bca_ci(x, [](std::span<const double> s) { return stats::mean(s); }, 10000, 2025);
    const auto mref = oracle::reference_bca_mean(x, 10000, 2025, 0.95);
    c.expect(std::abs(m.lo - mref.lo) < 1e-9 && std::abs(m.hi - mref.hi) < 1e-9,
             "bca mean sample " + std::to_string(rep));
  }
}

// ---------------------------------------------------------------------------

void rrf_oracle(Checks& c) {
  Rng rng(2025);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 5 + rng.below(46);
    std::vector<double> s(n);
    for (auto& v : s) v = 0.01 * rng.normal() + 0.002 * rng.uniform();
    const double ex = rrf::rrf_exhaustive(s, 0.007);
    const auto bt = rrf::rrf_bootstrap(s, 0.007, 10000, 2025);
    c.expect(std::abs(bt.rrf - ex) <= 0.01, "bootstrap set " + std::to_string(rep) + " " + S(bt.rrf) + " vs " + S(ex));

    const auto sweep = rrf::gap_sweep(rrf::singletons(s), rrf::kDefaultGaps, 1.0, 2000, 2025);
    for (std::size_t k = 1; k < sweep.size(); ++k) {
      c.expect(sweep[k].exhaustive <= sweep[k - 1].exhaustive, "sweep exhaustive monotone set " + std::to_string(rep));
      c.expect(sweep[k].rrf <= sweep[k - 1].rrf, "sweep bootstrap monotone set " + std::to_string(rep));
    }
    // Translation on a dyadic grid is exact in floating point.
    for (auto& v : s) v = std::ldexp(std::round(std::ldexp(v, 20)), -20);
    const double base = rrf::rrf_exhaustive(s, 0.007);
    for (double shift : {0.25, -0.125, 3.0}) {
      auto t = s;
      for (auto& v : t) v += shift;
      c.expect(rrf::rrf_exhaustive(t, 0.007) == base, "translation set " + std::to_string(rep));
    }
  }
}

// ---------------------------------------------------------------------------

double mean_abs_diff(const Image& a, const Image& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.px.size(); ++i) s += std::abs(a.px[i] - b.px[i]);
  return s / double(a.px.size());
}

void perturbation_suite(Checks& c) {
  using namespace perturb;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Scene s = capaudit::testing::random_scene(seed, 31, 24);
    for (Axis axis : {Axis::kVertical, Axis::kHorizontal}) {
      const auto twice = flip(flip(s, axis).scene(), axis);
      c.expect(twice.image == s.image && twice.mask == s.mask, "flip involution seed " + std::to_string(seed));
    }
    const auto r0 = rotate(s, 0.0);
    bool same = r0.mask == s.mask;
    for (std::size_t i = 0; i < s.image.px.size(); ++i) same = same && std::abs(r0.image.px[i] - s.image.px[i]) <= 1e-6;
    c.expect(same, "rotate(0) identity seed " + std::to_string(seed));
  }
  Scene g;
  g.image = capaudit::testing::gradient_image(64, 64);
  g.mask = Mask(64, 64);
  for (double a : {10.0, -10.0}) {
    const double err = mean_abs_diff(rotate(rotate(g, a).scene(), -a).image, g.image);
    c.expect(err < 0.02, "rotation round trip " + S(a) + " error " + S(err));
  }
  for (std::uint64_t seed = 100; seed < 150; ++seed) {
    const Scene s = capaudit::testing::random_scene(seed);
    // Edits confined to the excluded region leave bg_delta at zero.
    Image edited = s.image;
    const Mask u = dilate(s.mask, kBgRadius);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (u.at(x, y)) edited.at(x, y, 1) = 1.0 - edited.at(x, y, 1);
    c.expect(bg_delta(s.image, edited, s.mask, s.mask) == 0.0, "bg_delta excluded edit seed " + std::to_string(seed));
    for (Anchor a : kAllAnchors) {
      RepositionOptions hard;
      hard.feather = false;
      const auto v = reposition(s, a);
      const auto vh = reposition(s, a, hard);
      const Point ctr = centroid(v.mask), p = anchor_point(a, 64, 64);
      const std::string tag = " seed " + std::to_string(seed) + " " + anchor_name(a);
      c.expect(std::hypot(ctr.x - p.x, ctr.y - p.y) <= 1.0, "centroid" + tag);
      c.expect(std::abs(double(v.mask.area()) - double(s.mask.area())) <= 0.01 * s.mask.area(), "area" + tag);
      c.expect(v.diagnostics->seam_ratio < vh.diagnostics->seam_ratio, "seam feathered < hard" + tag);
    }
  }
  Rng rng(5);
  for (std::size_t n : {1u, 19u, 20u, 21u, 100u, 101u, 333u}) {
    std::vector<VariantRecord> vs(n);
    for (auto& v : vs) v.diagnostics = Diagnostics{rng.uniform(), rng.uniform()};
    for (FilterMode m : {FilterMode::kBgDelta, FilterMode::kSeam})
      c.expect(filter_by_artifacts(vs, 5, m).size() == static_cast<std::size_t>(std::ceil(0.95 * n)),
               "filter keeps ceil(0.95 n) at n=" + std::to_string(n));
  }
}

// ---------------------------------------------------------------------------

struct Workspace {
  fs::path root;
  Workspace() {
    root = fs::temp_directory_path() / ("capaudit_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
};

json mock_config(const fs::path& manifest, const fs::path& out, bool full, std::size_t n_resamples) {
  json scorers = {{{"id", "mock-spatial"}, {"type", "mock"}, {"base", "mock-spatial"}},
                  {{"id", "mock-invariant"}, {"type", "mock"}, {"base", "mock-invariant"}}};
  json cfg = {{"inputs", {{"manifests", {manifest.string()}}}},
              {"stats", {{"seed", 2025}, {"n_resamples", n_resamples}}},
              {"rrf", {{"n_boot", 2000}}},
              {"output_dir", out.string()}};
  if (full) {
    for (const char* id : {"mock-framing", "mock-ref-a", "mock-ref-b"})
      scorers.push_back({{"id", id}, {"type", "mock"}, {"base", id}});
    cfg["captions"] = {{"families", {"cultural", "economic"}}};
    cfg["calibration"] = {{"scorers", {"mock-spatial"}}, {"reference_scorers", {"mock-ref-a", "mock-ref-b"}}};
    cfg["humanval"] = {{"synthetic", true}};
  } else {
    cfg["captions"] = {{"families", {"cultural"}}};
    cfg["calibration"] = {{"enabled", false}};
  }
  cfg["scorers"] = scorers;
  return cfg;
}

void planted_recovery(Checks& c, const fs::path& root) {
  synth::SynthOptions so;
  so.n_items = 100;
  const auto manifest = synth::write_corpus(root / "corpus", so);
  const auto cfg = audit::RunConfig::from_json(mock_config(manifest, root / "planted", false, 10000));
  const auto rs = audit::run_audit(cfg);
  const auto& cells = rs.outputs.analyzed->at("cells");
  const double planted = 6.9;
  std::size_t n_inv = 0;
  for (const auto& cell : cells) {
    const std::string scorer = cell.at("scorer"), key = cell.at("perturbation");
    const double lo = audit::dbl(cell.at("ci_lo")), hi = audit::dbl(cell.at("ci_hi"));
    if (scorer == "mock-spatial" && (key == "vertical_flip" || key == "horizontal_flip")) {
      c.expect(cell.at("n") == 100, key + " n=" + cell.at("n").dump());
      c.expect(lo <= planted && planted <= hi, key + " CI [" + S(lo) + ", " + S(hi) + "] misses " + S(planted));
      c.expect(lo > 0, key + " CI includes 0");
      c.note += key + " median " + fixed(audit::dbl(cell.at("median")), 2) + " [" + fixed(lo, 2) + ", " + fixed(hi, 2) + "] ";
    }
    if (scorer == "mock-invariant") {
      ++n_inv;
      c.expect(lo <= 0 && 0 <= hi, "invariant " + key + " CI [" + S(lo) + ", " + S(hi) + "] excludes 0");
    }
  }
  c.expect(n_inv > 0, "no invariant cells");
}

// ---------------------------------------------------------------------------

std::map<std::string, const calibrate::ScoreTable*> refs(const calibrate::ScoreTable& a,
                                                        const calibrate::ScoreTable& b) {
  return {{"mock-ref-a", &a}, {"mock-ref-b", &b}};
}

void calibration(Checks& c) {
  using namespace calibrate;
  const auto cat = scorebridge::mock_catalogue();
  scorebridge::MockScorer sp(cat.at("mock-spatial")), ra(cat.at("mock-ref-a")), rb(cat.at("mock-ref-b"));
  const auto ids = capaudit::testing::item_ids(300);
  const auto raw = capaudit::testing::mock_table(sp, ids);
  const auto ref_a = capaudit::testing::mock_table(ra, ids, true), ref_b = capaudit::testing::mock_table(rb, ids, true);
  const auto [dev, eval_v] = split_items(ids, 0.5, 2025);
  const std::set<std::string> eval(eval_v.begin(), eval_v.end());
  CalibrationConfig cfg;
  cfg.lambda_grid = CalibrationConfig::default_grid();
  cfg.reference_scorers = {"mock-ref-a", "mock-ref-b"};
  cfg.dev_items = dev;
  const Calibrator cal(raw, dev);

  // lambda = 0 reproduces raw scores bit for bit.
  const auto id = cal.apply(0.0, cfg.weights);
  bool same = true;
  std::size_t compared = 0;
  for (const auto& [item, nodes] : raw.items())
    for (const auto& [n, v] : nodes) {
      same = same && id.get(item, n) == v;
      ++compared;
    }
  same = same && compared > 0;
  c.expect(same, "lambda=0 not bit-exact");

  const auto sel = select_lambda(cfg, cal, refs(ref_a, ref_b));
  const auto at = std::find_if(sel.grid.begin(), sel.grid.end(), [&](const LambdaPoint& p) { return p.lambda == sel.lambda_star; });
  c.expect(at != sel.grid.end() && at->feasible, "constraint infeasible at lambda*");
  c.expect(!sel.grid.back().feasible, "constraint not violated at grid max");
  c.expect(sel.lambda_star > 0, "lambda* is 0");

  ReportOptions opt;
  opt.n_boot = 2000;
  const auto rep = calibration_report("mock-spatial", raw, cal.apply(sel.lambda_star, cfg.weights), eval,
                                      refs(ref_a, ref_b), {}, sel, cfg, opt);
  const double red = rep["sensitivity"]["spatial"]["reduction"].get<double>();
  c.expect(red >= 0.40, "spatial reduction " + S(red));
  for (const auto& [r, v] : rep["correlation"].items()) {
    const double d = v["delta"].get<double>();
    c.expect(std::abs(d) <= cfg.epsilon, r + " spearman delta " + S(d));
  }
  const double before = rep["rrf"]["reposition"]["before"].get<double>(), after = rep["rrf"]["reposition"]["after"].get<double>();
  c.expect(after < before, "reposition RRF " + S(before) + " -> " + S(after));
  c.note = "lambda* " + fmt(sel.lambda_star) + ", spatial reduction " + fixed(100 * red, 1) + "%, reposition RRF " +
           fixed(before, 3) + " -> " + fixed(after, 3);
}

// ---------------------------------------------------------------------------

void human_validation(Checks& c) {
  using namespace humanval;
  const std::vector<std::vector<int>> m = {{0, 0, 0}, {0, 1, 1}, {1, 2, 2}, {0, 1, 2}};
  c.expect(std::abs(fleiss_kappa(m, 3) - 5.0 / 47.0) < 1e-9, "hand kappa");

  // Spatial mock cells with annotations at the default marginal rates.
  scorebridge::MockScorer sp(scorebridge::mock_catalogue().at("mock-spatial"));
  const auto ids = capaudit::testing::item_ids(100);
  std::vector<CellSamples> cells;
  for (const auto& spec : perturb::all_specs()) {
    CellSamples cs{"mock-spatial", "synthetic", perturb::family_name(spec.family), {}};
    for (const auto& id : ids) {
      const scorebridge::ScoreQuery q0{id, "orig", "base", "", ""}, q1{id, spec.key(), "base", "", ""};
      cs.samples.push_back({id, sp.score({&q0, 1})[0].score.value(), sp.score({&q1, 1})[0].score.value()});
    }
    cells.push_back(std::move(cs));
  }
  const auto anns = synthetic_annotations(ids, 2025);
  stats::PipelineOptions opt;
  for (auto mode : {RefilterMode::kDropOneSided, RefilterMode::kDropPartials})
    for (const auto& r : refilter_and_recompute(cells, anns, mode, opt)) {
      const bool within = std::abs(r.change) < r.half_width_before || (r.change == 0.0 && r.half_width_before == 0.0);
      c.expect(r.status == "ok" && within, std::string(refilter_mode_name(mode)) + " " + r.family + " change " +
                                               S(r.change) + " half-width " + S(r.half_width_before));
    }

  std::vector<PreferencePair> ties;
  for (int i = 0; i < 30; ++i) ties.push_back({"p" + std::to_string(i), Preference::kTie, 0.1 * (i % 7) + 0.01, 0.5});  // never a score tie
  c.expect(preference_accuracy(ties, 2000).accuracy == 0.5, "all-tie accuracy");
  std::vector<PreferencePair> exact;
  for (int i = 0; i < 30; ++i) exact.push_back({"q" + std::to_string(i), i % 2 ? Preference::kA : Preference::kB, i % 2 ? 0.9 : 0.1, 0.5});
  c.expect(preference_accuracy(exact, 2000).accuracy == 1.0, "perfect accuracy");
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> bundle(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

void determinism(Checks& c, const fs::path& root) {
  synth::SynthOptions so;
  so.n_items = 100;
  so.n_rejects = 3;
  const auto manifest = synth::write_corpus(root / "det_corpus", so);
  std::vector<std::map<std::string, std::string>> runs;
  for (const char* name : {"cold_a", "cold_b"}) {
    const auto cfg = audit::RunConfig::from_json(mock_config(manifest, root / name, true, 2000));
    audit::run_audit(cfg);
    runs.push_back(bundle(root / name / "reports"));
  }
  c.expect(runs[0].size() > 10, "bundle has " + std::to_string(runs[0].size()) + " files");
  c.expect(runs[0].size() == runs[1].size(), "file lists differ");
  for (const auto& [name, content] : runs[0]) {
    const auto it = runs[1].find(name);
    c.expect(it != runs[1].end() && it->second == content, name + " differs");
  }
  c.note = std::to_string(runs[0].size()) + " report files compared";
}

}  // namespace

int main() {
  ::unsetenv(audit::kCacheDirEnv);
  Workspace ws;
  bool ok = true;
  ok &= run_criterion("statistics-oracle-suite", 30, statistics_oracle);
  ok &= run_criterion("rrf-oracle", 60, rrf_oracle);
  ok &= run_criterion("perturbation-suite", 120, perturbation_suite);
  ok &= run_criterion("end-to-end-planted-recovery", 180, [&](Checks& c) { planted_recovery(c, ws.root); });
  ok &= run_criterion("calibration", 180, calibration);
  ok &= run_criterion("human-validation", 120, human_validation);
  ok &= run_criterion("determinism", 600, [&](Checks& c) { determinism(c, ws.root); });
  std::cout << (ok ? "ALL PASS" : "SOME FAILED") << std::endl;
  return ok ? 0 : 1;
}
