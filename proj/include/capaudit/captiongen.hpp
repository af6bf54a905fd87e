#pragma once

// Templated captions with socio-linguistic modifiers, neutral and
// length-matched controls, an animacy screen, and span rewrites of natural
// captions.

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "capaudit/catalog.hpp"
#include "capaudit/error.hpp"
#include "capaudit/util.hpp"

namespace capaudit::captiongen {

struct LexiconFamily {
  std::string name;
  std::vector<std::string> modifiers;
  std::vector<std::string> neutrals;
  std::map<std::string, std::string> antonyms;
  std::vector<std::string> requires_categories;  // empty: unrestricted

  bool has_modifier(std::string_view m) const {
    return std::find(modifiers.begin(), modifiers.end(), m) != modifiers.end();
  }
};

struct Lexicon {
  std::map<std::string, std::string> templates;
  std::map<std::string, std::string> article_exceptions;  // lowercase word -> "a" | "an"
  std::vector<LexiconFamily> families;
  std::vector<std::string> positive_poles, negative_poles;
  std::string source_hash;

  static Lexicon from_json(const json& j, std::string hash = {}) {
    Lexicon lex;
    lex.source_hash = std::move(hash);
    try {
      lex.templates = j.at("templates").get<std::map<std::string, std::string>>();
      lex.article_exceptions =
          j.value("article_exceptions", std::map<std::string, std::string>{});
      for (const auto& f : j.at("families")) {
        LexiconFamily fam;
        fam.name = f.at("family").get<std::string>();
        fam.modifiers = f.at("modifiers").get<std::vector<std::string>>();
        fam.neutrals = f.at("neutrals").get<std::vector<std::string>>();
        fam.antonyms = f.value("antonyms", std::map<std::string, std::string>{});
        fam.requires_categories = f.value("requires", std::vector<std::string>{});
        if (fam.neutrals.empty())
          throw ConfigError("lexicon family '" + fam.name + "' has no neutral control");
        for (const auto& [from, to] : fam.antonyms)
          if (!fam.has_modifier(from) || !fam.has_modifier(to))
            throw ConfigError("lexicon family '" + fam.name + "': antonym " + from + "->" + to +
                              " leaves the family");
        lex.families.push_back(std::move(fam));
      }
      if (j.contains("valence_poles")) {
        lex.positive_poles = j["valence_poles"].value("positive", std::vector<std::string>{});
        lex.negative_poles = j["valence_poles"].value("negative", std::vector<std::string>{});
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("lexicon: ") + e.what());
    }
    return lex;
  }

  static Lexicon load(const fs::path& path) {
    const std::string text = read_file(path);
    return from_json(json::parse(text), sha256_hex(text));
  }

  const LexiconFamily* family_of(std::string_view modifier) const {
    for (const auto& f : families)
      if (f.has_modifier(modifier)) return &f;
    return nullptr;
  }

  const LexiconFamily& family(std::string_view name) const {
    for (const auto& f : families)
      if (f.name == name) return f;
    throw ConfigError("unknown lexicon family '" + std::string(name) + "'");
  }
};

inline std::string lower(std::string_view s) { return catalog::lowercase(s); }

inline bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '\'';
}

// "a" or "an" from the initial letter, overridden by the exceptions table.
inline std::string article_for(std::string_view word, const Lexicon& lex) {
  const std::string w = lower(word);
  if (const auto it = lex.article_exceptions.find(w); it != lex.article_exceptions.end())
    return it->second;
  if (w.empty()) return "a";
  return std::string("aeiou").find(w[0]) != std::string::npos ? "an" : "a";
}

struct CaptionVariant {
  std::string key;
  std::string text;
  std::optional<std::string> family;
  std::optional<std::string> length_matched_to;
};

inline std::string fill_template(std::string tmpl, const std::map<std::string, std::string>& vars) {
  for (const auto& [name, value] : vars) {
    const std::string slot = "{" + name + "}";
    for (auto pos = tmpl.find(slot); pos != std::string::npos; pos = tmpl.find(slot, pos + value.size()))
      tmpl.replace(pos, slot.size(), value);
  }
  return tmpl;
}

inline CaptionVariant render(const Lexicon& lex, std::string_view template_id,
                             std::string_view object,
                             std::optional<std::string_view> adjective = std::nullopt) {
  const auto it = lex.templates.find(std::string(template_id));
  if (it == lex.templates.end())
    throw ConfigError("unknown caption template '" + std::string(template_id) + "'");
  CaptionVariant v;
  const std::string head = adjective ? std::string(*adjective) : std::string(object);
  v.text = fill_template(it->second, {{"article", article_for(head, lex)},
                                      {"object", std::string(object)},
                                      {"adjective", adjective ? std::string(*adjective) : ""}});
  if (!adjective) {
    v.key = "base";
  } else if (const auto* fam = lex.family_of(*adjective)) {
    v.key = "modifier:" + std::string(*adjective);
    v.family = fam->name;
  } else {
    v.key = "neutral:" + std::string(*adjective);
  }
  return v;
}

inline std::size_t token_count(std::string_view s) {
  std::size_t n = 0;
  bool in = false;
  for (char c : s) {
    const bool space = std::isspace(static_cast<unsigned char>(c));
    if (!space && !in) ++n;
    in = !space;
  }
  return n;
}

inline std::size_t char_count(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return 0;
  const auto e = s.find_last_not_of(" \t");
  return e - b + 1;
}

// Closest control by (|char diff|, |token diff|), ties alphabetical.
inline std::string length_match(std::string_view modifier, const std::vector<std::string>& pool) {
  if (pool.empty()) throw ConfigError("length_match: empty neutral pool");
  auto dist = [&](const std::string& c) {
    const auto dc = static_cast<long>(char_count(c)) - static_cast<long>(char_count(modifier));
    const auto dt = static_cast<long>(token_count(c)) - static_cast<long>(token_count(modifier));
    return std::make_tuple(std::labs(dc), std::labs(dt), c);
  };
  return *std::min_element(pool.begin(), pool.end(),
                           [&](const auto& a, const auto& b) { return dist(a) < dist(b); });
}

struct ScreenVerdict {
  bool accept = true;
  std::string reason;  // empty when accepted
};

inline ScreenVerdict compatibility_screen(const Lexicon& lex, std::string_view adjective,
                                          catalog::Category category) {
  const auto* fam = lex.family_of(adjective);
  if (!fam || fam->requires_categories.empty()) return {};
  const std::string cat = catalog::category_name(category);
  for (const auto& r : fam->requires_categories)
    if (r == cat) return {};
  return {false, "animacy"};
}

// ---------------------------------------------------------------------------
// Caption sets for an item

struct RejectedPair {
  std::string adjective;
  std::string reason;
  json to_json() const { return {{"adjective", adjective}, {"reason", reason}}; }
};

struct CaptionSet {
  std::vector<CaptionVariant> variants;  // base first, then modifiers and their controls
  std::vector<RejectedPair> rejected;

  std::map<std::string, std::string> as_map() const {
    std::map<std::string, std::string> m;
    for (const auto& v : variants) m[v.key] = v.text;
    return m;
  }
};

// Base caption plus, for every screened-in modifier, the modifier caption
// and its length-matched neutral control.
inline CaptionSet build_caption_set(const Lexicon& lex, std::string_view object,
                                    catalog::Category category,
                                    const std::vector<std::string>& families = {}) {
  CaptionSet set;
  set.variants.push_back(render(lex, "base", object));
  std::set<std::string> neutral_keys;
  for (const auto& fam : lex.families) {
    if (!families.empty() &&
        std::find(families.begin(), families.end(), fam.name) == families.end())
      continue;
    for (const auto& m : fam.modifiers) {
      const auto verdict = compatibility_screen(lex, m, category);
      if (!verdict.accept) {
        set.rejected.push_back({m, verdict.reason});
        continue;
      }
      auto mv = render(lex, "attr", object, m);
      const std::string neutral = length_match(m, fam.neutrals);
      mv.length_matched_to = "neutral:" + neutral;
      set.variants.push_back(mv);
      if (neutral_keys.insert(neutral).second) set.variants.push_back(render(lex, "attr", object, neutral));
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Natural-caption rewrites

struct Span {
  std::size_t begin = 0, end = 0;
};

struct Rewrite {
  std::string modifier;
  std::string family;
  std::string neutralized;
  std::optional<std::string> alternate;
};

inline std::vector<std::pair<Span, std::string>> find_modifiers(const Lexicon& lex,
                                                                std::string_view caption) {
  std::vector<std::pair<Span, std::string>> hits;
  const std::string lc = lower(caption);
  for (const auto& fam : lex.families)
    for (const auto& m : fam.modifiers) {
      const std::string lm = lower(m);
      for (auto pos = lc.find(lm); pos != std::string::npos; pos = lc.find(lm, pos + 1)) {
        const std::size_t end = pos + lm.size();
        const bool left_ok = pos == 0 || !is_word_char(lc[pos - 1]);
        const bool right_ok = end == lc.size() || !is_word_char(lc[end]);
        if (left_ok && right_ok) hits.push_back({{pos, end}, m});
      }
    }
  return hits;
}

// Carries capitalization over only when the caption capitalized a word that
// the lexicon spells in lowercase; proper adjectives like "African" do not
// pass their capital on to a common replacement.
inline std::string match_case(std::string_view original, std::string_view canonical,
                              std::string replacement) {
  const auto up = [](char c) { return std::isupper(static_cast<unsigned char>(c)) != 0; };
  if (!original.empty() && !canonical.empty() && !replacement.empty() && up(original[0]) &&
      !up(canonical[0]))
    replacement[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(replacement[0])));
  return replacement;
}

// Replaces the span and re-derives a preceding indefinite article.
inline std::string substitute(const Lexicon& lex, std::string_view caption, Span span,
                              std::string_view canonical, const std::string& word) {
  std::string out(caption);
  const std::string replacement =
      match_case(caption.substr(span.begin, span.end - span.begin), canonical, word);
  out.replace(span.begin, span.end - span.begin, replacement);
  std::size_t e = span.begin;
  while (e > 0 && out[e - 1] == ' ') --e;
  std::size_t b = e;
  while (b > 0 && is_word_char(out[b - 1])) --b;
  const std::string prev = lower(std::string_view(out).substr(b, e - b));
  if (e < span.begin && (prev == "a" || prev == "an")) {
    std::string art = article_for(replacement, lex);
    if (std::isupper(static_cast<unsigned char>(out[b])))
      art[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(art[0])));
    out.replace(b, e - b, art);
  }
  return out;
}

inline Rewrite rewrite_natural(const Lexicon& lex, std::string_view caption) {
  const auto hits = find_modifiers(lex, caption);
  if (hits.empty()) throw NotApplicable("no lexicon modifier in caption");
  if (hits.size() > 1) throw NotApplicable("caption contains several lexicon modifiers");
  const auto& [span, modifier] = hits.front();
  const auto* fam = lex.family_of(modifier);
  Rewrite r;
  r.modifier = modifier;
  r.family = fam->name;
  r.neutralized = substitute(lex, caption, span, modifier, length_match(modifier, fam->neutrals));
  if (const auto it = fam->antonyms.find(modifier); it != fam->antonyms.end())
    r.alternate = substitute(lex, caption, span, modifier, it->second);
  return r;
}

}  // namespace capaudit::captiongen
