#include "capaudit/scorebridge.hpp"

#include <cstdlib>

#include "capaudit/image.hpp"
#include "gtest/gtest.h"

namespace capaudit::scorebridge {
namespace {

class TempDir {
 public:
  TempDir() {
    char tmpl[] = "/tmp/capaudit-sb-XXXXXX";
    path_ = mkdtemp(tmpl);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string write_image(const fs::path& dir, const std::string& name, double shade) {
  Image img(8, 8);
  for (auto& v : img.px) v = shade;
  const auto p = dir / (name + ".png");
  write_png(p, img);
  return p.string();
}

std::vector<ScoreQuery> queries(const fs::path& dir, int n, const std::string& caption = "a dog") {
  std::vector<ScoreQuery> q;
  for (int i = 0; i < n; ++i) {
    const std::string id = "item" + std::to_string(i);
    q.push_back({id, "orig", "base", caption + " " + std::to_string(i),
                 write_image(dir, id, i / double(n))});
  }
  return q;
}

// ---------------------------------------------------------------------------
// Mocks

TEST(Mock, AbsolutePlantedShiftPlusBoundedNoise) {
  MockScorerSpec spec;
  spec.planted["vertical_flip"] = {0.05, 0.0};
  spec.noise_sd = 0.005;
  MockScorer m(spec);
  for (int i = 0; i < 50; ++i) {
    const std::string id = "x" + std::to_string(i);
    const ScoreQuery orig{id, "orig", "base", "There is a dog.", ""};
    const ScoreQuery flip{id, "vertical_flip", "base", "There is a dog.", ""};
    const double s0 = m.score({&orig, 1})[0].score.value();
    const double s1 = m.score({&flip, 1})[0].score.value();
    EXPECT_EQ(s0, m.expected(orig));  // originals carry no noise
    EXPECT_LE(std::abs(s1 - s0 - 0.05), 3 * spec.noise_sd + 1e-15);
  }
}

TEST(Mock, RelativeShiftAndCompounding) {
  MockScorerSpec spec;
  spec.planted["rotation"] = {0, 0.1};
  spec.planted["reposition"] = {0, 0.2};
  spec.heterogeneity = 0.5;
  spec.compounding = 1.0;
  MockScorer m(spec);
  const double b = m.item_base("it");
  const double mult = m.item_multiplier("it");
  EXPECT_GE(mult, 0.5);
  EXPECT_LE(mult, 1.5);
  EXPECT_NEAR(m.expected({"it", "rotation:+5", "base", "", ""}), b + 0.1 * b * mult, 1e-15);
  EXPECT_NEAR(m.expected({"it", "rotation:+5|reposition:TL", "base", "", ""}),
              b + 0.1 * b * mult + 2 * 0.2 * b * mult, 1e-15);
  EXPECT_NEAR(m.expected({"it", "reposition:TL|rotation:+5", "base", "", ""}),
              b + 0.2 * b * mult + 2 * 0.1 * b * mult, 1e-15);
}

TEST(Mock, FramingShiftFromCaptionKey) {
  auto cat = mock_catalogue();
  MockScorer m(cat.at("mock-framing"));
  const double b = m.item_base("a");
  const double mult = m.item_multiplier("a");
  EXPECT_NEAR(m.expected({"a", "orig", "modifier:African", "There is an African bed.", ""}),
              b * (1 - 0.07 * mult), 1e-15);
  EXPECT_EQ(m.expected({"a", "orig", "neutral:typical", "There is a typical bed.", ""}), b);
}

TEST(Mock, CatalogueAndDeterminism) {
  const auto cat = mock_catalogue();
  for (const char* id :
       {"mock-invariant", "mock-spatial", "mock-framing", "mock-ref-a", "mock-ref-b"})
    ASSERT_TRUE(cat.count(id)) << id;
  EXPECT_DOUBLE_EQ(cat.at("mock-spatial").planted.at("vertical_flip").relative, 0.069);
  EXPECT_DOUBLE_EQ(cat.at("mock-spatial").planted.at("reposition").relative, 0.084);
  EXPECT_DOUBLE_EQ(cat.at("mock-spatial").planted.at("rotation").relative, 0.051);
  EXPECT_DOUBLE_EQ(cat.at("mock-framing").framing.at("expensive").relative, -0.062);
  EXPECT_TRUE(cat.at("mock-invariant").planted.empty());

  MockScorer a(cat.at("mock-spatial")), b(cat.at("mock-spatial"));
  const ScoreQuery q{"i1", "rotation:-10", "base", "There is a cat.", ""};
  EXPECT_EQ(a.score({&q, 1})[0].score, b.score({&q, 1})[0].score);
  // Spec JSON round trip preserves behaviour.
  MockScorer c(MockScorerSpec::from_json(cat.at("mock-spatial").to_json()));
  EXPECT_EQ(a.score({&q, 1})[0].score, c.score({&q, 1})[0].score);
}

TEST(Mock, InvariantScorerHasZeroExpectedShift) {
  MockScorer m(mock_catalogue().at("mock-invariant"));
  for (const auto& spec : perturb::all_specs())
    EXPECT_EQ(m.expected({"i", spec.key(), "base", "", ""}), m.expected({"i", "orig", "base", "", ""}));
}

TEST(Mock, RejectsInvalidSpec) {
  EXPECT_THROW(MockScorerSpec::from_json({{"noise_sd", -1}}), ConfigError);
  EXPECT_THROW(MockScorerSpec::from_json({{"heterogeneity", 2}}), ConfigError);
}

TEST(Embed, DeterministicAndPoled) {
  MockScorer m(mock_catalogue().at("mock-framing"));
  EXPECT_EQ(m.embed_text("African"), m.embed_text("African"));
  EXPECT_THROW(m.embed_text(""), Unsupported);
  EXPECT_GT(m.embed_text("good")[0], 0.9);
  EXPECT_LT(m.embed_text("bad")[0], -0.9);
}

// ---------------------------------------------------------------------------
// Valence

TEST(Valence, DegenerateDirection) {
  std::map<std::string, std::vector<double>> e = {
      {"a", {1, 0}}, {"b", {0, 1}}, {"c", {1, 1}}, {"p", {1, 2}}};
  EXPECT_THROW(valence_analysis({{"a", 1}, {"b", 2}, {"c", 3}}, e, {"p"}, {"p"}),
               DegenerateDirection);
  EXPECT_THROW(valence_analysis({{"a", 1}, {"b", 2}}, e, {"p"}, {"a"}), InsufficientData);
}

TEST(Valence, MonotoneConstructionGivesRhoOne) {
  // Projection of (cos t, sin t) on the x axis is cos t: decreasing in t.
  std::map<std::string, std::vector<double>> e = {{"pos", {1, 0}}, {"neg", {-1, 0}}};
  std::map<std::string, double> shifts;
  for (int i = 0; i < 6; ++i) {
    const double t = 0.3 * i;
    const std::string w = "m" + std::to_string(i);
    e[w] = {std::cos(t), std::sin(t)};
    shifts[w] = -t * t;  // strictly increasing in cos t
  }
  const auto r = valence_analysis(shifts, e, {"pos"}, {"neg"});
  EXPECT_DOUBLE_EQ(r.spearman_rho, 1.0);
  EXPECT_EQ(r.projections.size(), 6u);
}

TEST(Valence, FramingMockRecoversPlantedOrder) {
  MockScorer m(mock_catalogue().at("mock-framing"));
  std::map<std::string, std::vector<double>> e;
  std::map<std::string, double> shifts;
  for (const auto& [w, s] : m.spec().framing) {
    e[w] = m.embed_text(w);
    shifts[w] = 100 * s.relative;
  }
  for (const auto& w : {"good", "great", "bad", "poor"}) e[w] = m.embed_text(w);
  const auto r = valence_analysis(shifts, e, {"good", "great"}, {"bad", "poor"});
  EXPECT_GT(r.spearman_rho, 0.7);
}

// ---------------------------------------------------------------------------
// Cache and service

TEST(Cache, RepeatCallIsCachedAndIdentical) {
  TempDir dir;
  MockScorer m(mock_catalogue().at("mock-spatial"));
  ScoreCache cache(dir.path() / "cache.jsonl");
  ScoreService svc(m, cache);
  auto q = queries(dir.path(), 5);
  const auto first = svc.score(q);
  ASSERT_EQ(first.records.size(), 5u);
  for (const auto& r : first.records) EXPECT_FALSE(r.cached);
  const auto second = svc.score(q);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_TRUE(second.records[i].cached);
    EXPECT_EQ(second.records[i].score, first.records[i].score);
  }
  // Survives a reload from disk.
  ScoreCache reloaded(dir.path() / "cache.jsonl");
  EXPECT_EQ(reloaded.size(), 5u);
  ScoreService svc2(m, reloaded);
  EXPECT_TRUE(svc2.score(q[0]).cached);
}

TEST(Cache, FullKeyComparisonGuardsCollisions) {
  ScoreCache cache;
  const std::string sha(64, 'a');
  // Plant another tuple's entry under the digest of (sha, "cap", "s").
  cache.inject_raw(cache_key(sha, "cap", "s"), sha, "other caption", "s", 0.9);
  EXPECT_FALSE(cache.get(sha, "cap", "s"));
  cache.inject_raw(cache_key(sha, "cap", "s"), sha, "cap", "s", 0.4);
  EXPECT_EQ(cache.get(sha, "cap", "s"), 0.4);
  EXPECT_FALSE(cache.get(sha, "cap", "t"));
}

TEST(Cache, KeyDependsOnImageBytesNotPath) {
  TempDir dir;
  MockScorer m(mock_catalogue().at("mock-invariant"));
  ScoreCache cache;
  ScoreService svc(m, cache);
  const auto p1 = write_image(dir.path(), "a", 0.5);
  const auto p2 = write_image(dir.path(), "b", 0.5);  // same bytes
  svc.score(ScoreQuery{"i", "orig", "base", "cap", p1});
  EXPECT_TRUE(svc.score(ScoreQuery{"i", "orig", "base", "cap", p2}).cached);
}

TEST(Service, UnreadableImageIsReportedMissing) {
  MockScorer m(mock_catalogue().at("mock-invariant"));
  ScoreCache cache;
  ScoreService svc(m, cache);
  const ScoreQuery q{"item-42", "orig", "base", "cap", "/nonexistent/x.png"};
  const auto r = svc.score(std::span<const ScoreQuery>(&q, 1));
  EXPECT_TRUE(r.records.empty());
  ASSERT_EQ(r.missing.size(), 1u);
  EXPECT_NE(r.missing[0].reason.find("item-42"), std::string::npos);
  EXPECT_THROW(svc.score(q), ScorerUnavailable);
}

// ---------------------------------------------------------------------------
// External bridge

BridgeOptions fake(const std::string& mode, const std::string& marker = "") {
  BridgeOptions o;
  o.command = {FAKE_SCORER_PATH, mode};
  if (!marker.empty()) o.command.push_back(marker);
  o.timeout_s = 2.0;
  o.handshake_timeout_s = 2.0;
  return o;
}

std::vector<double> scores_of(const std::vector<ScoreOutcome>& v) {
  std::vector<double> s;
  for (const auto& o : v) s.push_back(o.score.value_or(-1));
  return s;
}

TEST(Bridge, HandshakeAndScores) {
  TempDir dir;
  ExternalScorer s(fake("normal"));
  EXPECT_EQ(s.id(), "fake-normal");
  EXPECT_TRUE(s.info().can("embed_text"));
  EXPECT_EQ(s.info().metadata.at("resolution"), 64);
  const auto q = queries(dir.path(), 40);
  const auto a = s.score(q);
  for (const auto& o : a) {
    ASSERT_TRUE(o.score) << o.error;
    EXPECT_GE(*o.score, 0.0);
    EXPECT_LE(*o.score, 1.0);
  }
  EXPECT_EQ(scores_of(s.score(q)), scores_of(a));
  EXPECT_EQ(s.embed_text("African"), s.embed_text("African"));
  EXPECT_EQ(s.embed_text("x").size(), 3u);
}

TEST(Bridge, OutOfOrderResponsesAreMatchedById) {
  TempDir dir;
  const auto q = queries(dir.path(), 37);
  ExternalScorer normal(fake("normal")), reversed(fake("reverse"));
  EXPECT_EQ(scores_of(reversed.score(q)), scores_of(normal.score(q)));
}

TEST(Bridge, DroppedRequestsAreRetried) {
  TempDir dir;
  auto opt = fake("drop");
  opt.timeout_s = 0.2;
  ExternalScorer s(opt);
  ExternalScorer normal(fake("normal"));
  const auto q = queries(dir.path(), 6);
  EXPECT_EQ(scores_of(s.score(q)), scores_of(normal.score(q)));
}

TEST(Bridge, ProtocolViolationAndCrashRestartTheProcess) {
  TempDir dir;
  const auto q = queries(dir.path(), 5);
  ExternalScorer normal(fake("normal"));
  for (const std::string mode : {"garbage", "crash"}) {
    ExternalScorer s(fake(mode, (dir.path() / (mode + ".marker")).string()));
    EXPECT_EQ(scores_of(s.score(q)), scores_of(normal.score(q))) << mode;
    EXPECT_EQ(s.restarts(), 1) << mode;
  }
}

TEST(Bridge, PersistentErrorsBecomeMissingScores) {
  TempDir dir;
  const auto q = queries(dir.path(), 3);
  for (const std::string mode : {"error", "out_of_range"}) {
    ExternalScorer s(fake(mode));
    for (const auto& o : s.score(q)) {
      EXPECT_FALSE(o.score) << mode;
      EXPECT_FALSE(o.error.empty());
    }
  }
  // Through the service the run continues and items are marked missing.
  ExternalScorer s(fake("error"));
  ScoreCache cache;
  ScoreService svc(s, cache);
  const auto r = svc.score(q);
  EXPECT_TRUE(r.records.empty());
  EXPECT_EQ(r.missing.size(), 3u);
}

TEST(Bridge, BadOrMissingHandshake) {
  EXPECT_THROW(ExternalScorer(fake("bad_handshake")), ScorerUnavailable);
  auto silent = fake("silent");
  silent.handshake_timeout_s = 0.3;
  EXPECT_THROW(ExternalScorer{silent}, ScorerUnavailable);
  BridgeOptions missing;
  missing.command = {"/nonexistent/scorer"};
  missing.handshake_timeout_s = 1.0;
  EXPECT_THROW(ExternalScorer{missing}, ScorerUnavailable);
}

TEST(Bridge, EmbeddingCapabilityIsChecked) {
  ExternalScorer s(fake("noembed"));
  EXPECT_THROW(s.embed_text("African"), Unsupported);
}

TEST(Bridge, UnreadableImageGetsErrorResponse) {
  ExternalScorer s(fake("normal"));
  const ScoreQuery q{"i", "orig", "base", "cap", "/nonexistent.png"};
  const auto r = s.score({&q, 1});
  EXPECT_FALSE(r[0].score);
}

TEST(Handshake, Validation) {
  const auto h = Handshake::parse(
      R"({"scorer_id":"clipscore","range":[0,1],"capabilities":["score","embed_text"]})");
  EXPECT_EQ(h.scorer_id, "clipscore");
  EXPECT_TRUE(h.can("score"));
  EXPECT_THROW(Handshake::parse(R"({"scorer_id":"x","range":[1,0],"capabilities":[]})"),
               ScorerUnavailable);
  EXPECT_THROW(Handshake::parse(R"({"range":[0,1],"capabilities":[]})"), ScorerUnavailable);
  EXPECT_THROW(Handshake::parse("nope"), ScorerUnavailable);
}

}  // namespace
}  // namespace capaudit::scorebridge
