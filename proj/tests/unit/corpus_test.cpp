#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "indiclm/common/error.hpp"
#include "indiclm/common/rng.hpp"
#include "indiclm/common/utf8.hpp"
#include "indiclm/corpus/corpus.hpp"

using namespace indiclm;
using namespace indiclm::corpus;

namespace {

bool in_allowed(char32_t cp, const CleanConfig& c) {
  for (const auto& r : c.allowed_script_ranges)
    if (r.contains(cp)) return true;
  return false;
}

std::string random_mixed_text(Rng& rng, std::size_t n) {
  static const std::vector<std::string> pieces = {
      "नमस्ते", "ভালো", "தமிழ்", "తెలుగు", "ଓଡ଼ିଆ", "hello", "123", "  ", "\n", "।", "॥", ".", "?", "!", ",",
      "😀", "👍🏽", "<b>", "</b>", "a@b.com", "https://x.org/p?q=1", "www.site.in", "+91 98765 43210",
      "&amp;", "<!-- c -->", "ABCDE1234F", "\t", "\xE2\x80\x8B", "€", "©", "\xE0\xA4", "क\xCC\x81", "e\xCC\x81",
      "पिन कोड 110001", "१२३४५६७", "‍", " "};
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += pieces[rng.uniform_index(pieces.size())];
  return s;
}

}  // namespace

TEST(SplitSentences, DandaSplitsDevanagari) {
  const auto c = CleanConfig::for_script("Devanagari");
  EXPECT_EQ(split_sentences("राम। श्याम।", "Devanagari", c), (std::vector<std::string>{"राम।", "श्याम।"}));
}

TEST(SplitSentences, EmptyAndUnterminated) {
  const auto c = CleanConfig::for_script("Devanagari");
  EXPECT_TRUE(split_sentences("", "Devanagari", c).empty());
  EXPECT_EQ(split_sentences("राम और श्याम", "Devanagari", c), (std::vector<std::string>{"राम और श्याम"}));
}

TEST(SplitSentences, TerminatorRunsStayTogether) {
  const auto c = CleanConfig::for_script("Tamil");
  EXPECT_EQ(split_sentences("வா!? போ.", "Tamil", c), (std::vector<std::string>{"வா!?", "போ."}));
  const auto d = CleanConfig::for_script("Bengali");
  EXPECT_EQ(split_sentences("আমি।। তুমি", "Bengali", d), (std::vector<std::string>{"আমি।।", "তুমি"}));
}

TEST(SplitSentences, UnknownScriptIsConfigError) {
  const auto c = CleanConfig::for_script("Devanagari");
  EXPECT_THROW(split_sentences("x", "Klingon", c), ConfigError);
}

TEST(SplitSentences, IsAPartition) {
  const auto c = CleanConfig::for_script("Devanagari");
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::string text = utf8::repair(random_mixed_text(rng, 12));
    const auto parts = split_sentences(text, "Devanagari", c);
    std::string joined;
    for (const auto& p : parts) {
      EXPECT_FALSE(p.empty());
      joined += (joined.empty() ? "" : " ") + p;
    }
    EXPECT_EQ(split_sentences(joined, "Devanagari", c), parts);
    // concatenation equals input with whitespace between sentences stripped
    std::string stripped_in, stripped_out;
    for (char32_t cp : utf8::decode(text))
      if (!is_unicode_space(cp)) utf8::append(stripped_in, cp);
    for (char32_t cp : utf8::decode(joined))
      if (!is_unicode_space(cp)) utf8::append(stripped_out, cp);
    EXPECT_EQ(stripped_in, stripped_out);
  }
}

TEST(CleanText, DropsEnglishLiteralsAndDigits) {
  EXPECT_EQ(clean_text("नमस्ते hello 123", CleanConfig::for_script("Devanagari")), "नमस्ते");
}

TEST(CleanText, NormalizesWhitespace) {
  EXPECT_EQ(clean_text("क  \n  ख", CleanConfig::for_script("Devanagari")), "क ख");
}

TEST(CleanText, DropsEmojiTagsAndEmail) {
  EXPECT_EQ(clean_text("ভালো 😀 <b>x</b> a@b.com", CleanConfig::for_script("Bengali")), "ভালো");
}

TEST(CleanText, RemovesPiiInsideScriptText) {
  const auto c = CleanConfig::for_script("Devanagari");
  EXPECT_EQ(clean_text("फ़ोन +91 98765-43210 करें", c), "फ़ोन करें");
  EXPECT_EQ(clean_text("आधार १२३४ ५६७८ ९०१२ है", c), "आधार है");
  EXPECT_EQ(clean_text("पता: मकान नं 42 दिल्ली पिन कोड ११०००१", c), "पता दिल्ली");
  EXPECT_EQ(clean_text("देखें https://example.org/a?b=1 और www.x.in/y", c), "देखें और");
}

TEST(CleanText, KeepsDandaAndAttachedPunctuation) {
  const auto c = CleanConfig::for_script("Devanagari");
  EXPECT_EQ(clean_text("क्या? हाँ, ठीक है। hello!", c), "क्या? हाँ, ठीक है।");
}

TEST(CleanText, NormalizesToNfc) {
  // BENGALI VOWEL SIGN E + AU LENGTH MARK composes to VOWEL SIGN AU
  const auto c = CleanConfig::for_script("Bengali");
  EXPECT_EQ(clean_text("ক\u09C7\u09D7", c), "ক\u09CC");
}

TEST(CleanText, EmptyResultIsAllowed) {
  EXPECT_EQ(clean_text("hello world 😀", CleanConfig::for_script("Tamil")), "");
  EXPECT_EQ(clean_text("", CleanConfig::for_script("Tamil")), "");
}

TEST(CleanText, IdempotentAndScriptPure) {
  const std::vector<std::string> scripts = {"Bengali", "Devanagari", "Odia", "Tamil", "Telugu"};
  Rng rng(5);
  for (const auto& script : scripts) {
    const auto c = CleanConfig::for_script(script);
    for (int trial = 0; trial < 300; ++trial) {
      const std::string x = random_mixed_text(rng, 1 + rng.uniform_index(20));
      const std::string once = clean_text(x, c);
      ASSERT_EQ(clean_text(once, c), once) << x;
      ASSERT_TRUE(utf8::is_valid(once));
      EXPECT_EQ(once.find("  "), std::string::npos);
      if (!once.empty()) {
        EXPECT_NE(once.front(), ' ');
        EXPECT_NE(once.back(), ' ');
      }
      for (char32_t cp : utf8::decode(once)) {
        if (cp == U' ') continue;
        ASSERT_TRUE(in_allowed(cp, c)) << std::hex << static_cast<std::uint32_t>(cp) << " in " << once;
      }
    }
  }
}

TEST(CleanConfig, FromJsonRespectsRules) {
  const auto j = nlohmann::json::parse(R"({"rules": ["whitespace"], "scripts": ["Devanagari"]})");
  const auto c = CleanConfig::from_json(j);
  EXPECT_EQ(clean_text("a  b 😀", c), "a b 😀");
  EXPECT_THROW(CleanConfig::from_json(nlohmann::json::parse(R"({"rules": ["bogus"]})")), ConfigError);
  EXPECT_THROW(CleanConfig::from_json(nlohmann::json::parse(R"({"scripts": ["Klingon"]})")), ConfigError);
}

TEST(CleanDocument, SplitsThenCleans) {
  const auto c = CleanConfig::for_script("Devanagari");
  EXPECT_EQ(clean_document("राम आया। ok. श्याम   गया।", "Devanagari", c), "राम आया।\nश्याम गया।");
}

TEST(Deduplicate, FirstOccurrenceWins) {
  std::vector<RawDocument> d = {{"A", "hi", "Devanagari", "x"}, {"B", "hi", "Devanagari", "x"}, {"C", "hi", "Devanagari", "y"}};
  const auto out = deduplicate(d);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].id, "A");
  EXPECT_EQ(out[1].id, "C");
  EXPECT_TRUE(deduplicate({}).empty());
}

TEST(Deduplicate, MatchesSetOfTextsOracle) {
  Rng rng(9);
  std::vector<RawDocument> docs;
  for (int i = 0; i < 1000; ++i)
    docs.push_back({"d" + std::to_string(i), "hi", "Devanagari", "text " + std::to_string(i < 100 ? i : rng.uniform_index(100))});
  std::set<std::string> texts;
  for (const auto& d : docs) texts.insert(d.text);
  const auto out = deduplicate(docs);
  EXPECT_EQ(out.size(), texts.size());
  EXPECT_EQ(out.size(), 100u);
  EXPECT_EQ(deduplicate(out), out);
}

TEST(Deduplicate, LineLevelFlag) {
  std::vector<RawDocument> d = {{"A", "", "", "a\nb"}, {"B", "", "", "b\nc"}, {"C", "", "", "a"}};
  const auto out = deduplicate(d, {.line_level = true});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].text, "c");
  EXPECT_EQ(deduplicate(out, {.line_level = true}), out);
}

TEST(SplitTrainVal, ExactCardinality) {
  std::vector<RawDocument> docs;
  for (int i = 0; i < 100; ++i) docs.push_back({std::to_string(i), "", "", std::to_string(i)});
  const auto s = split_train_val(docs, {0.95, 1});
  EXPECT_EQ(s.train.size(), 95u);
  EXPECT_EQ(s.val.size(), 5u);
  std::set<std::string> ids;
  for (const auto& d : s.train) ids.insert(d.id);
  for (const auto& d : s.val) EXPECT_TRUE(ids.insert(d.id).second);
  EXPECT_EQ(ids.size(), 100u);
}

TEST(SplitTrainVal, SingleDocAndDeterminism) {
  std::vector<RawDocument> one = {{"a", "", "", "x"}};
  const auto s = split_train_val(one, {0.95, 3});
  EXPECT_EQ(s.train.size(), 1u);
  EXPECT_EQ(s.val.size(), 0u);
  std::vector<RawDocument> docs;
  for (int i = 0; i < 50; ++i) docs.push_back({std::to_string(i), "", "", ""});
  const auto a = split_train_val(docs, {0.8, 77});
  const auto b = split_train_val(docs, {0.8, 77});
  const auto c = split_train_val(docs, {0.8, 78});
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_NE(a.val, c.val);
  EXPECT_THROW(split_train_val({}, {0.95, 1}), std::invalid_argument);
}

TEST(Stats, CountsScriptsAndDedupRatio) {
  std::vector<RawDocument> docs = {{"a", "", "", "নমো ab"}};
  const auto s = compute_stats(docs, 4, 2);
  EXPECT_EQ(s.total_codepoints, 5u);
  EXPECT_EQ(s.codepoints_by_script.at("Bengali"), 3u);
  EXPECT_EQ(s.codepoints_by_script.at("Roman"), 2u);
  EXPECT_DOUBLE_EQ(s.dedup_ratio, 0.5);
  EXPECT_EQ(s.to_json()["output_documents"], 1);
}

TEST(CorpusIo, JsonlRoundTripAndValidation) {
  const auto path = std::filesystem::temp_directory_path() / "indiclm_corpus_test.jsonl";
  std::vector<RawDocument> docs = {{"a", "bn", "Bengali", "ভালো\nথাকো"}, {"b", "hi", "Devanagari", "राम"}};
  write_jsonl(path, docs);
  EXPECT_EQ(read_jsonl(path), docs);
  std::filesystem::remove(path);
  EXPECT_THROW(validate_corpus({{"a", "", "", "x"}, {"a", "", "", "y"}}), FormatError);
  EXPECT_THROW(validate_corpus({{"", "", "", "x"}}), FormatError);
  EXPECT_THROW(validate_corpus({{"a", "", "", "\xFF"}}), FormatError);
}

TEST(CorpusIo, BundledTamilCorpusLoads) {
  const auto docs = read_jsonl(std::filesystem::path(INDICLM_DATA_DIR) / "corpus" / "thirukkural_ta.jsonl");
  EXPECT_EQ(docs.size(), 1330u);
  EXPECT_NO_THROW(validate_corpus(docs));
}
