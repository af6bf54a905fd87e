#include "capaudit/calibrate.hpp"

#include "gtest/gtest.h"
#include "mock_tables.hpp"

namespace capaudit::calibrate {
namespace {

using scorebridge::MockScorer;
using scorebridge::mock_catalogue;

TEST(Sensitivity, Examples) {
  EXPECT_NEAR(sensitivity(0.50, std::vector<double>{0.53}), 0.03, 1e-15);
  EXPECT_NEAR(sensitivity(0.50, std::vector<double>{0.52, 0.45, 0.59}), 0.05, 1e-15);
  EXPECT_THROW(sensitivity(0.5, std::vector<double>{}), MissingVariants);
}

TEST(Sensitivity, InvariantMockIsExactlyZero) {
  MockScorer m(mock_catalogue().at("mock-invariant"));
  const auto ids = testing::item_ids(25);
  const auto t = testing::mock_table(m, ids);
  const Calibrator cal(t, {ids.begin(), ids.end()});
  for (const auto& id : ids)
    for (Group g : kGroups) EXPECT_EQ(cal.delta(id, Node{}, g), 0.0) << id;
}

TEST(CalibratedScore, Examples) {
  const SensitivityProfile p{"x", "s", {{"spatial", 0.04}, {"societal", 0.02}}};
  EXPECT_NEAR(calibrated_score(0.60, p, 0.5, uniform_weights()), 0.57, 1e-15);
  const double s = 0.123456789;
  EXPECT_EQ(calibrated_score(s, p, 0.0, uniform_weights()), s);
  EXPECT_EQ(calibrated_score(s, p, 0.7, {{"spatial", 0}, {"object", 0}, {"societal", 0}}), s);
}

TEST(CalibratedScore, NeverIncreasesAndKeepsOrderOfEqualProfiles) {
  Rng rng(4);
  for (int rep = 0; rep < 200; ++rep) {
    const SensitivityProfile p{"x", "s",
                               {{"spatial", 0.1 * rng.uniform()},
                                {"object", 0.1 * rng.uniform()},
                                {"societal", 0.1 * rng.uniform()}}};
    const Weights w = {{"spatial", rng.uniform()}, {"object", 0.0}, {"societal", rng.uniform()}};
    const double lambda = rng.uniform();
    const double a = rng.uniform(), b = rng.uniform();
    const double ca = calibrated_score(a, p, lambda, w), cb = calibrated_score(b, p, lambda, w);
    EXPECT_LE(ca, a);
    EXPECT_EQ(a < b, ca < cb);
  }
}

TEST(Weights, Schemes) {
  EXPECT_EQ(weight_scheme({{"a", 0.3}, {"b", 0.0}, {"c", 1.0}}, "uniform").weights,
            (Weights{{"a", 1}, {"b", 1}, {"c", 1}}));
  const auto p = weight_scheme({{"spatial", 0.06}, {"object", 0.02}, {"societal", 0.02}},
                               "proportional");
  EXPECT_NEAR(p.weights.at("spatial"), 1.8, 1e-12);
  EXPECT_NEAR(p.weights.at("object"), 0.6, 1e-12);
  EXPECT_NEAR(p.weights.at("societal"), 0.6, 1e-12);
  EXPECT_FALSE(p.warning);
  const auto z = weight_scheme({{"spatial", 0}, {"object", 0}}, "proportional");
  EXPECT_EQ(z.weights, (Weights{{"spatial", 1}, {"object", 1}}));
  EXPECT_TRUE(z.warning);
  EXPECT_THROW(weight_scheme({}, "softmax"), ConfigError);
}

TEST(Tree, ParentsAndInheritance) {
  EXPECT_FALSE(parent(Node{}));
  EXPECT_EQ(*parent(Node{"orig", "modifier:cheap"}), Node{});
  EXPECT_EQ(*parent(Node{"rotation:+5", "modifier:cheap"}), (Node{"rotation:+5", "base"}));
  EXPECT_EQ(*parent(Node{"rotation:+5|vertical_flip", "base"}), (Node{"rotation:+5", "base"}));

  // A second-order leaf has no spatial children of its own and inherits
  // its parent's value.
  ScoreTable t;
  t.set("i", {}, 0.5);
  t.set("i", {"vertical_flip", "base"}, 0.55);
  t.set("i", {"vertical_flip|rotation:+5", "base"}, 0.60);
  const Calibrator cal(t, {});
  EXPECT_NEAR(cal.delta("i", {}, Group::kSpatial), 0.05, 1e-12);
  EXPECT_NEAR(cal.delta("i", {"vertical_flip", "base"}, Group::kSpatial), 0.05, 1e-12);
  EXPECT_NEAR(cal.delta("i", {"vertical_flip|rotation:+5", "base"}, Group::kSpatial), 0.05,
              1e-12);
  // Unknown items use the dev median of root values (here none: 0).
  EXPECT_EQ(cal.delta("unseen", {}, Group::kSpatial), 0.0);
}

TEST(Tree, VariantTreeContents) {
  const auto nodes = variant_tree(perturb::all_specs(), testing::caption_keys());
  std::set<Node> s(nodes.begin(), nodes.end());
  EXPECT_EQ(s.size(), nodes.size());
  EXPECT_TRUE(s.count(Node{}));
  EXPECT_TRUE(s.count(Node{"blur:1.0", "base"}));
  EXPECT_TRUE(s.count(Node{"orig", "modifier:African"}));
  for (const auto& n : nodes) {
    const auto chain = perturb::parse_chain(n.variant);
    EXPECT_LE(chain.size(), 2u);
    if (chain.size() == 2) {
      EXPECT_NE(chain[0].family, chain[1].family);
    }
  }
}

TEST(Apply, ZeroLambdaIsIdentity) {
  MockScorer m(mock_catalogue().at("mock-spatial"));
  const auto ids = testing::item_ids(30);
  const auto t = testing::mock_table(m, ids);
  const Calibrator cal(t, {ids.begin(), ids.end()});
  const auto same = cal.apply(0.0, uniform_weights());
  for (const auto& [item, scores] : t.items())
    for (const auto& [node, s] : scores) EXPECT_EQ(same.get(item, node), s);
  const std::set<std::string> all(ids.begin(), ids.end());
  const auto sb = family_shifts(t, perturb::Family::kReposition, all);
  const auto sa = family_shifts(same, perturb::Family::kReposition, all);
  EXPECT_EQ(sb, sa);
}

TEST(Objective, ZeroLambdaEqualsRawTotal) {
  MockScorer m(mock_catalogue().at("mock-spatial"));
  const auto ids = testing::item_ids(30);
  const std::set<std::string> all(ids.begin(), ids.end());
  const auto t = testing::mock_table(m, ids);
  double total = 0;
  for (Group g : kGroups)
    if (const auto v = median_sensitivity(t, g, all)) total += *v;
  EXPECT_EQ(objective(Calibrator(t, all).apply(0.0, uniform_weights()), all), total);
}

std::map<std::string, const ScoreTable*> refs(const ScoreTable& a, const ScoreTable& b) {
  return {{"mock-ref-a", &a}, {"mock-ref-b", &b}};
}

TEST(Select, AllZeroSensitivitiesGiveZero) {
  const auto cat = mock_catalogue();
  MockScorer inv(cat.at("mock-invariant")), ra(cat.at("mock-ref-a")), rb(cat.at("mock-ref-b"));
  const auto ids = testing::item_ids(40);
  const auto t = testing::mock_table(inv, ids);
  const auto a = testing::mock_table(ra, ids, true), b = testing::mock_table(rb, ids, true);
  CalibrationConfig cfg;
  cfg.lambda_grid = CalibrationConfig::default_grid();
  cfg.reference_scorers = {"mock-ref-a", "mock-ref-b"};
  cfg.dev_items = {ids.begin(), ids.end()};
  const auto sel = select_lambda(cfg, Calibrator(t, cfg.dev_items), refs(a, b));
  EXPECT_EQ(sel.lambda_star, 0.0);
  for (const auto& p : sel.grid) EXPECT_EQ(p.objective, sel.grid[0].objective);
}

TEST(Select, Validation) {
  CalibrationConfig cfg;
  cfg.lambda_grid = {0.1, 0.2};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.lambda_grid = {0.0, 0.5};
  cfg.weights["spatial"] = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.weights = uniform_weights();
  ScoreTable t;
  cfg.dev_items = {"a", "b"};
  EXPECT_THROW(select_lambda(cfg, Calibrator(t, {}), {}), InsufficientData);
}

// End-to-end scenario on the spatial mock with two independent references.
class MockScenario : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto cat = mock_catalogue();
    MockScorer sp(cat.at("mock-spatial")), ra(cat.at("mock-ref-a")), rb(cat.at("mock-ref-b"));
    ids_ = new std::vector<std::string>(testing::item_ids(300));
    raw_ = new ScoreTable(testing::mock_table(sp, *ids_));
    ref_a_ = new ScoreTable(testing::mock_table(ra, *ids_, true));
    ref_b_ = new ScoreTable(testing::mock_table(rb, *ids_, true));
    auto [dev, eval] = split_items(*ids_, 0.5, 2025);
    cfg_ = new CalibrationConfig;
    cfg_->lambda_grid = CalibrationConfig::default_grid();
    cfg_->reference_scorers = {"mock-ref-a", "mock-ref-b"};
    cfg_->dev_items = dev;
    eval_ = new std::set<std::string>(eval);
    cal_ = new Calibrator(*raw_, dev);
  }
  static void TearDownTestSuite() {
    delete cal_;
    delete eval_;
    delete cfg_;
    delete ref_b_;
    delete ref_a_;
    delete raw_;
    delete ids_;
  }

  static inline std::vector<std::string>* ids_ = nullptr;
  static inline ScoreTable *raw_ = nullptr, *ref_a_ = nullptr, *ref_b_ = nullptr;
  static inline CalibrationConfig* cfg_ = nullptr;
  static inline std::set<std::string>* eval_ = nullptr;
  static inline Calibrator* cal_ = nullptr;
};

TEST_F(MockScenario, ConstraintBindsAndLambdaIsPositive) {
  const auto sel = select_lambda(*cfg_, *cal_, refs(*ref_a_, *ref_b_));
  EXPECT_GT(sel.lambda_star, 0.0);
  EXPECT_FALSE(sel.warning);
  const auto at = std::find_if(sel.grid.begin(), sel.grid.end(),
                               [&](const LambdaPoint& p) { return p.lambda == sel.lambda_star; });
  ASSERT_NE(at, sel.grid.end());
  EXPECT_TRUE(at->feasible);
  EXPECT_FALSE(sel.grid.back().feasible);
  // Smallest minimizer among feasible points.
  for (const auto& p : sel.grid) {
    if (p.feasible) {
      EXPECT_GE(p.objective, at->objective);
    }
  }

  // Deterministic.
  const auto again = select_lambda(*cfg_, *cal_, refs(*ref_a_, *ref_b_));
  EXPECT_EQ(again.to_json(), sel.to_json());
}

TEST_F(MockScenario, VacuousConstraintGivesUnconstrainedArgmin) {
  auto cfg = *cfg_;
  cfg.epsilon = 10;
  const auto sel = select_lambda(cfg, *cal_, refs(*ref_a_, *ref_b_));
  double best = sel.grid[0].objective, arg = 0;
  for (const auto& p : sel.grid) {
    if (p.objective < best) best = p.objective, arg = p.lambda;
  }
  EXPECT_EQ(sel.lambda_star, arg);
  for (const auto& p : sel.grid) EXPECT_TRUE(p.feasible);
}

TEST_F(MockScenario, ReportShowsReductions) {
  const auto sel = select_lambda(*cfg_, *cal_, refs(*ref_a_, *ref_b_));
  const auto after = cal_->apply(sel.lambda_star, cfg_->weights);
  ReportOptions opt;
  opt.n_boot = 2000;
  const auto rep = calibration_report("mock-spatial", *raw_, after, *eval_,
                                      refs(*ref_a_, *ref_b_), {}, sel, *cfg_, opt);
  EXPECT_GE(rep["sensitivity"]["spatial"]["reduction"].get<double>(), 0.40);
  EXPECT_LT(rep["rrf"]["reposition"]["after"].get<double>(),
            rep["rrf"]["reposition"]["before"].get<double>());
  for (const auto& [r, v] : rep["correlation"].items())
    EXPECT_GE(v["delta"].get<double>(), -cfg_->epsilon) << r;

  // The identity calibration reports before == after everywhere.
  const auto id = calibration_report("mock-spatial", *raw_, cal_->apply(0, cfg_->weights), *eval_,
                                     refs(*ref_a_, *ref_b_), {}, sel, *cfg_, opt);
  for (const auto& [axis, v] : id["sensitivity"].items())
    EXPECT_EQ(v["before_pct"], v["after_pct"]) << axis;
  for (const auto& [fam, v] : id["rrf"].items()) EXPECT_EQ(v["before"], v["after"]) << fam;
  for (const auto& [r, v] : id["correlation"].items()) EXPECT_EQ(v["delta"], 0.0) << r;
  EXPECT_FALSE(calibration_csv({rep}).empty());
}

TEST(Split, DeterministicAndDisjoint) {
  const auto ids = testing::item_ids(101);
  const auto [d1, e1] = split_items(ids, 0.5, 2025);
  const auto [d2, e2] = split_items(ids, 0.5, 2025);
  EXPECT_EQ(d1, d2);
  EXPECT_EQ(d1.size(), 51u);
  EXPECT_EQ(d1.size() + e1.size(), 101u);
  for (const auto& x : d1) EXPECT_FALSE(e1.count(x));
  EXPECT_THROW(split_items(ids, 1.0, 1), ConfigError);
}

}  // namespace
}  // namespace capaudit::calibrate
