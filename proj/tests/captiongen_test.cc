#include "capaudit/captiongen.hpp"

#include "gtest/gtest.h"

namespace capaudit::captiongen {
namespace {

using catalog::Category;

const Lexicon& lexicon() {
  static const Lexicon lex = Lexicon::load(std::string(CAPAUDIT_DATA_DIR) + "/lexicon.json");
  return lex;
}

TEST(Render, TemplateExamples) {
  EXPECT_EQ(render(lexicon(), "base", "bed").text, "There is a bed.");
  EXPECT_EQ(render(lexicon(), "attr", "bed", "African").text, "There is an African bed.");
  EXPECT_EQ(render(lexicon(), "attr", "car", "expensive").text, "There is an expensive car.");
  EXPECT_EQ(render(lexicon(), "attr", "car", "European").text, "There is a European car.");
  EXPECT_EQ(render(lexicon(), "base", "umbrella").text, "There is an umbrella.");
  EXPECT_THROW(render(lexicon(), "missing", "bed"), ConfigError);
}

TEST(Render, KeysAndPurity) {
  const auto m = render(lexicon(), "attr", "bed", "cheap");
  EXPECT_EQ(m.key, "modifier:cheap");
  EXPECT_EQ(m.family, "economic");
  EXPECT_EQ(render(lexicon(), "attr", "bed", "plain").key, "neutral:plain");
  EXPECT_EQ(render(lexicon(), "attr", "bed", "cheap").text, m.text);
}

TEST(LengthMatch, Examples) {
  EXPECT_EQ(length_match("cheap", {"plain", "typical"}), "plain");
  EXPECT_EQ(length_match("typical", {"plain", "typical"}), "typical");
  EXPECT_EQ(length_match("cheap", {"plain", "basic"}), "basic");
  EXPECT_THROW(length_match("cheap", {}), ConfigError);
}

TEST(LengthMatch, ExhaustiveScanAgrees) {
  const std::vector<std::string> pool = {"ordinary", "plain", "typical", "basic", "usual"};
  for (const auto& fam : lexicon().families)
    for (const auto& m : fam.modifiers) {
      const std::string got = length_match(m, pool);
      for (const auto& c : pool) {
        const auto dg = std::labs(long(got.size()) - long(m.size()));
        const auto dc = std::labs(long(c.size()) - long(m.size()));
        EXPECT_TRUE(dg < dc || (dg == dc && got <= c)) << m << " " << got << " " << c;
      }
    }
}

TEST(Screen, AnimacyRules) {
  EXPECT_FALSE(compatibility_screen(lexicon(), "angry", Category::kFurniture).accept);
  EXPECT_EQ(compatibility_screen(lexicon(), "angry", Category::kFurniture).reason, "animacy");
  EXPECT_TRUE(compatibility_screen(lexicon(), "expensive", Category::kVehicle).accept);
  EXPECT_FALSE(compatibility_screen(lexicon(), "female", Category::kKitchen).accept);
  EXPECT_TRUE(compatibility_screen(lexicon(), "happy", Category::kAnimal).accept);
}

TEST(CaptionSet, EveryModifierHasItsControl) {
  for (auto cat : {Category::kFurniture, Category::kPerson}) {
    const auto set = build_caption_set(lexicon(), "bed", cat);
    const auto map = set.as_map();
    EXPECT_EQ(map.at("base"), "There is a bed.");
    for (const auto& v : set.variants) {
      if (v.key.rfind("modifier:", 0) != 0) continue;
      ASSERT_TRUE(v.length_matched_to);
      EXPECT_EQ(map.count(*v.length_matched_to), 1u) << v.key;
    }
    if (cat == Category::kFurniture) {
      EXPECT_EQ(map.count("modifier:angry"), 0u);
      EXPECT_EQ(set.rejected.size(), 7u);  // 4 gender + 3 emotion
    } else {
      EXPECT_EQ(map.count("modifier:angry"), 1u);
      EXPECT_TRUE(set.rejected.empty());
    }
  }
}

TEST(Rewrite, NeutralizeFixesArticle) {
  const auto r = rewrite_natural(lexicon(), "an expensive car parked outside");
  EXPECT_EQ(r.neutralized, "a typical car parked outside");
  EXPECT_EQ(r.alternate, "a cheap car parked outside");
  EXPECT_EQ(r.family, "economic");
}

TEST(Rewrite, CulturalSwap) {
  const auto r = rewrite_natural(lexicon(), "an African bed");
  EXPECT_EQ(r.alternate, "an American bed");
  EXPECT_EQ(r.neutralized, "a typical bed");
}

TEST(Rewrite, PreservesBytesOutsideSpan) {
  const std::string cap = "Two dogs near A cheap, red bicycle!";
  const auto r = rewrite_natural(lexicon(), cap);
  EXPECT_EQ(r.neutralized, "Two dogs near A plain, red bicycle!");
  EXPECT_EQ(r.alternate, "Two dogs near An expensive, red bicycle!");
}

TEST(Rewrite, NotApplicableCases) {
  EXPECT_THROW(rewrite_natural(lexicon(), "a dog on a couch"), NotApplicable);
  EXPECT_THROW(rewrite_natural(lexicon(), "a cheap and expensive car"), NotApplicable);
  // Whole-word only: "cheaper" and "localized" are not hits.
  EXPECT_THROW(rewrite_natural(lexicon(), "a cheaper localized map"), NotApplicable);
  EXPECT_NO_THROW(rewrite_natural(lexicon(), "A HAPPY dog"));
}

TEST(Lexicon, ValidationRejectsBadFamilies) {
  json j = {{"templates", {{"base", "x"}}},
            {"families", {{{"family", "f"}, {"modifiers", {"a"}}, {"neutrals", json::array()}}}}};
  EXPECT_THROW(Lexicon::from_json(j), ConfigError);
  j["families"][0]["neutrals"] = {"plain"};
  j["families"][0]["antonyms"] = {{"a", "zzz"}};
  EXPECT_THROW(Lexicon::from_json(j), ConfigError);
}

}  // namespace
}  // namespace capaudit::captiongen
