#include <algorithm>
#include <memory>
#include <mutex>

#include <fmt/format.h>
#include <unicode/normalizer2.h>
#include <unicode/regex.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include "indiclm/common/error.hpp"
#include "indiclm/common/utf8.hpp"
#include "indiclm/corpus/corpus.hpp"

namespace indiclm::corpus {
namespace {

constexpr std::pair<CleanRule, std::string_view> kRuleNames[] = {
    {CleanRule::sentence_split, "sentence_split"},   {CleanRule::unicode_normalize, "unicode_normalize"},
    {CleanRule::whitespace, "whitespace"},           {CleanRule::foreign_literals, "foreign_literals"},
    {CleanRule::emoji_symbols, "emoji_symbols"},     {CleanRule::links_pii, "links_pii"},
};

// PII and markup patterns. All are replaced by a single space. Address
// removal is keyword-driven and lossy: a house/plot/PIN keyword followed by a
// number is dropped, everything else about an address survives.
constexpr const char* kPiiPatterns[] = {
    // HTML/XML comments, tags and entities
    R"(<!--[\s\S]*?-->)",
    R"(<[^<>]{0,256}>)",
    R"(&(?:#[0-9]{1,7}|#[xX][0-9A-Fa-f]{1,6}|[A-Za-z]{2,10});)",
    // URLs
    R"((?i)\b(?:https?|ftp)://[^\s<>"]+)",
    R"((?i)\bwww\.[^\s<>"]+)",
    // e-mail addresses
    R"([A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,})",
    // PAN and voter-ID style identifiers
    R"(\b[A-Z]{5}[0-9]{4}[A-Z]\b)",
    R"(\b[A-Z]{3}[0-9]{7}\b)",
    // address keywords followed by a number
    R"((?i)(?:house\s*no|flat\s*no|plot\s*no|pin\s*code|pincode|मकान\s*(?:नं|नंबर)|गली\s*(?:नं|नंबर)|पिन\s*कोड|পিন\s*কোড|বাড়ি\s*নং|அஞ்சல்\s*குறியீடு|கதவு\s*எண்|పిన్\s*కోడ్|ఇంటి\s*నం)\s*[:.\-]?\s*\p{Nd}[\p{Nd}/\-]*)",
    // phone numbers, PIN codes, Aadhaar-like ids: six or more digits in any
    // script, optionally separated by single spaces, dots or dashes
    R"(\+?\p{Nd}(?:[ .\-]?\p{Nd}){5,})",
};

constexpr const char* kEmojiPattern =
    R"([\p{Extended_Pictographic}\p{Emoji_Presentation}\p{So}\p{Sk}\x{1F1E6}-\x{1F1FF}\x{1F3FB}-\x{1F3FF}\x{FE0E}\x{FE0F}\x{20E3}\x{E0020}-\x{E007F}])";

struct CompiledPatterns {
  std::vector<std::unique_ptr<icu::RegexPattern>> pii;
  std::unique_ptr<icu::RegexPattern> emoji;
};

std::unique_ptr<icu::RegexPattern> compile(const char* pattern) {
  UErrorCode status = U_ZERO_ERROR;
  UParseError perr;
  std::unique_ptr<icu::RegexPattern> p(
      icu::RegexPattern::compile(icu::UnicodeString::fromUTF8(pattern), perr, status));
  if (U_FAILURE(status)) throw ConfigError(fmt::format("bad cleaning pattern {}: {}", pattern, u_errorName(status)));
  return p;
}

const CompiledPatterns& patterns() {
  static const CompiledPatterns compiled = [] {
    CompiledPatterns c;
    for (const char* p : kPiiPatterns) c.pii.push_back(compile(p));
    c.emoji = compile(kEmojiPattern);
    return c;
  }();
  return compiled;
}

icu::UnicodeString replace_all(const icu::UnicodeString& text, const icu::RegexPattern& pattern,
                               const icu::UnicodeString& replacement) {
  UErrorCode status = U_ZERO_ERROR;
  std::unique_ptr<icu::RegexMatcher> m(pattern.matcher(text, status));
  icu::UnicodeString out = m->replaceAll(replacement, status);
  if (U_FAILURE(status)) throw std::runtime_error(fmt::format("regex replace failed: {}", u_errorName(status)));
  return out;
}

std::string nfc(const std::string& text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* n = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFC normalizer unavailable");
  icu::UnicodeString out = n->normalize(icu::UnicodeString::fromUTF8(text), status);
  if (U_FAILURE(status)) throw std::runtime_error("NFC normalization failed");
  std::string r;
  out.toUTF8String(r);
  return r;
}

std::string remove_links_pii(const std::string& text) {
  icu::UnicodeString us = icu::UnicodeString::fromUTF8(text);
  const icu::UnicodeString space(u" ");
  for (const auto& p : patterns().pii) us = replace_all(us, *p, space);
  std::string r;
  us.toUTF8String(r);
  return r;
}

std::string remove_emoji_symbols(const std::string& text) {
  icu::UnicodeString us = replace_all(icu::UnicodeString::fromUTF8(text), *patterns().emoji, icu::UnicodeString());
  std::string r;
  us.toUTF8String(r);
  return r;
}

bool in_ranges(char32_t cp, const std::vector<CodepointRange>& ranges) {
  return std::any_of(ranges.begin(), ranges.end(), [cp](const CodepointRange& r) { return r.contains(cp); });
}

std::u32string remove_foreign(const std::u32string& text, const CleanConfig& config) {
  const auto& retained = config.retained_punctuation;
  auto is_retained = [&](char32_t cp) { return retained.find(cp) != std::u32string::npos; };
  std::u32string out;
  out.reserve(text.size());
  for (char32_t cp : text) {
    if (is_unicode_space(cp)) {
      out.push_back(cp);
      continue;
    }
    if (cp < 0x80 && is_retained(cp)) {
      // keep only when attached to preceding allowed text (possibly through
      // other retained marks)
      std::size_t i = out.size();
      while (i > 0 && out[i - 1] < 0x80 && is_retained(out[i - 1])) --i;
      if (i > 0 && !is_unicode_space(out[i - 1])) out.push_back(cp);
      continue;
    }
    if (is_retained(cp) || in_ranges(cp, config.allowed_script_ranges)) out.push_back(cp);
  }
  return out;
}

std::u32string normalize_whitespace(const std::u32string& text) {
  std::u32string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char32_t cp : text) {
    if (is_unicode_space(cp)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(U' ');
    pending_space = false;
    out.push_back(cp);
  }
  return out;
}

std::u32string to_u32(const std::string& s) {
  const auto cps = utf8::decode(s);
  return {cps.begin(), cps.end()};
}

std::string clean_pass(const std::string& input, const CleanConfig& config) {
  std::string text = input;
  if (config.enabled(CleanRule::unicode_normalize)) text = nfc(text);
  if (config.enabled(CleanRule::links_pii)) text = remove_links_pii(text);
  if (config.enabled(CleanRule::emoji_symbols)) text = remove_emoji_symbols(text);
  if (config.enabled(CleanRule::foreign_literals) || config.enabled(CleanRule::whitespace)) {
    std::u32string cps = to_u32(text);
    if (config.enabled(CleanRule::foreign_literals)) cps = remove_foreign(cps, config);
    if (config.enabled(CleanRule::whitespace)) cps = normalize_whitespace(cps);
    text = utf8::encode(cps);
  }
  return text;
}

}  // namespace

std::string_view to_string(CleanRule rule) {
  for (const auto& [r, name] : kRuleNames)
    if (r == rule) return name;
  return "unknown";
}

CleanRule parse_clean_rule(std::string_view name) {
  for (const auto& [r, n] : kRuleNames)
    if (n == name) return r;
  throw ConfigError(fmt::format("unknown cleaning rule '{}'", name));
}

bool CleanConfig::enabled(CleanRule rule) const {
  return std::find(enabled_rules.begin(), enabled_rules.end(), rule) != enabled_rules.end();
}

CleanConfig CleanConfig::for_scripts(const std::vector<std::string>& scripts) {
  CleanConfig c;
  for (const auto& [rule, name] : kRuleNames) c.enabled_rules.push_back(rule);
  c.retained_punctuation = U"।॥.,?!";
  const std::u32string danda = U"।॥";
  const std::u32string latin_stops = U".?!";
  for (const auto& name : std::vector<std::string>{"Bengali", "Devanagari", "Odia"})
    c.sentence_terminators.emplace(name, danda);
  for (const auto& name : std::vector<std::string>{"Tamil", "Telugu", "Roman", "Other"})
    c.sentence_terminators.emplace(name, latin_stops);
  for (const auto& s : scripts) {
    auto profile = find_script_profile(s);
    if (!profile) throw ConfigError(fmt::format("unknown script '{}'", s));
    c.allowed_script_ranges.insert(c.allowed_script_ranges.end(), profile->ranges.begin(), profile->ranges.end());
  }
  for (char32_t cp : c.retained_punctuation) c.allowed_script_ranges.push_back({cp, cp});
  c.allowed_script_ranges.push_back({0x200C, 0x200D});
  return c;
}

CleanConfig CleanConfig::for_script(std::string_view script) { return for_scripts({std::string(script)}); }

CleanConfig CleanConfig::from_json(const nlohmann::json& j) {
  std::vector<std::string> scripts = j.value("scripts", std::vector<std::string>{});
  CleanConfig c = for_scripts(scripts);
  if (j.contains("rules")) {
    c.enabled_rules.clear();
    for (const auto& r : j.at("rules")) c.enabled_rules.push_back(parse_clean_rule(r.get<std::string>()));
  }
  if (j.contains("retained_punctuation")) {
    const auto cps = utf8::decode(j.at("retained_punctuation").get<std::string>());
    c.retained_punctuation.assign(cps.begin(), cps.end());
    for (char32_t cp : c.retained_punctuation) c.allowed_script_ranges.push_back({cp, cp});
  }
  if (j.contains("extra_ranges")) {
    auto extra = parse_ranges(j.at("extra_ranges").get<std::string>());
    c.allowed_script_ranges.insert(c.allowed_script_ranges.end(), extra.begin(), extra.end());
  }
  if (j.contains("terminators")) {
    for (const auto& [script, terms] : j.at("terminators").items()) {
      const auto cps = utf8::decode(terms.get<std::string>());
      if (cps.empty()) throw ConfigError(fmt::format("script '{}' has no sentence terminators", script));
      c.sentence_terminators[script] = std::u32string(cps.begin(), cps.end());
    }
  }
  return c;
}

std::vector<std::string> split_sentences(std::string_view text, std::string_view script, const CleanConfig& config) {
  const auto it = config.sentence_terminators.find(script);
  if (it == config.sentence_terminators.end() || it->second.empty())
    throw ConfigError(fmt::format("no sentence terminators configured for script '{}'", script));
  const std::u32string& terms = it->second;
  auto is_term = [&](char32_t cp) { return terms.find(cp) != std::u32string::npos; };

  std::vector<std::string> out;
  std::u32string current;
  auto flush = [&] {
    std::size_t b = 0, e = current.size();
    while (b < e && is_unicode_space(current[b])) ++b;
    while (e > b && is_unicode_space(current[e - 1])) --e;
    if (e > b) out.push_back(utf8::encode(current.substr(b, e - b)));
    current.clear();
  };
  const auto cps = utf8::decode(text);
  for (std::size_t i = 0; i < cps.size(); ++i) {
    current.push_back(cps[i]);
    if (is_term(cps[i]) && (i + 1 == cps.size() || !is_term(cps[i + 1]))) flush();
  }
  flush();
  return out;
}

std::string clean_text(std::string_view text, const CleanConfig& config) {
  std::string current = utf8::repair(text);
  // Removing characters can expose new matches (a tag nested in a tag, digit
  // groups joined by a removed word), so iterate to a fixed point. Every pass
  // only deletes or collapses, so this terminates.
  for (int pass = 0; pass < 16; ++pass) {
    std::string next = clean_pass(current, config);
    if (next == current) break;
    current = std::move(next);
  }
  return current;
}

std::string clean_document(std::string_view text, std::string_view script, const CleanConfig& config) {
  std::vector<std::string> pieces;
  if (config.enabled(CleanRule::sentence_split))
    pieces = split_sentences(text, script, config);
  else
    pieces.emplace_back(text);
  std::string out;
  for (const auto& piece : pieces) {
    std::string cleaned = clean_text(piece, config);
    if (cleaned.empty()) continue;
    if (!out.empty()) out += '\n';
    out += cleaned;
  }
  return out;
}

}  // namespace indiclm::corpus
