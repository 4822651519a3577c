#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "indiclm/common/error.hpp"
#include "indiclm/common/rng.hpp"
#include "indiclm/common/utf8.hpp"
#include "indiclm/instruct/instruct.hpp"
#include "support/mock_records.hpp"

using namespace indiclm;
using namespace indiclm::instruct;

namespace {

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

std::string random_text(Rng& rng, std::size_t max_words) {
  static const char32_t bases[] = {0x0985, 0x0915, 0x0B95, 0x0C15, 0x0061};
  std::u32string s;
  const std::size_t words = 1 + rng.uniform_index(max_words);
  for (std::size_t w = 0; w < words; ++w) {
    if (w) s.push_back(U' ');
    const char32_t base = bases[rng.uniform_index(5)];
    const std::size_t len = 1 + rng.uniform_index(6);
    for (std::size_t k = 0; k < len; ++k) s.push_back(base + static_cast<char32_t>(rng.uniform_index(20)));
  }
  return utf8::encode(s);
}

InstructionExample figure_example() {
  InstructionExample ex;
  ex.instruction = "বাক্যটা ঠিক কর।";
  ex.input = "কিছুক্ষণ আগে আমি নাস্তা খেয়ে লিখতে বসেছি।";
  ex.response = "আমি নাস্তা খেয়ে লিখতে বসেছি।";
  ex.language = "bn";
  return ex;
}

}  // namespace

TEST(Render, SpansAreExactOnRandomFixtures) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    InstructionExample ex;
    ex.instruction = random_text(rng, 8);
    if (i % 2) ex.input = random_text(rng, 12);
    ex.response = random_text(rng, 20);
    ex.language = "bn";
    for (const auto& t : builtin_templates()) {
      const auto r = render_prompt(ex, t, true);
      EXPECT_EQ(r.text.substr(r.response.begin, r.response.size()), ex.response);
      EXPECT_EQ(r.response.end, r.text.size());
      EXPECT_EQ(r.text.substr(r.instruction.begin, r.instruction.size()), ex.instruction);
      if (ex.input) EXPECT_EQ(r.text.substr(r.input.begin, r.input.size()), *ex.input);
      EXPECT_EQ(count_of(r.text, t.header_instruction), 1u);
      EXPECT_EQ(count_of(r.text, t.header_response), 1u);
      EXPECT_EQ(count_of(r.text, t.header_input), ex.input ? 1u : 0u);
      const auto back = parse_rendered(std::string_view(r.text).substr(t.header_instruction.size()), t, "bn");
      ASSERT_TRUE(back);
      EXPECT_EQ(back->instruction, ex.instruction);
      EXPECT_EQ(back->input, ex.input);
      EXPECT_EQ(back->response, ex.response);
    }
  }
}

TEST(Render, NoInputAndNoResponse) {
  auto ex = figure_example();
  ex.input.reset();
  const auto& t = find_template("bn");
  const auto r = render_prompt(ex, t, false);
  EXPECT_EQ(r.text.find("ইনপুট"), std::string::npos);
  EXPECT_TRUE(r.response.empty());
  EXPECT_TRUE(r.text.ends_with(t.header_response));
  EXPECT_EQ(r.response.begin, r.text.size());
}

TEST(Render, BanglaGrammarCorrectionLayout) {
  const auto r = render_prompt(figure_example(), find_template("bn"), true);
  EXPECT_TRUE(r.text.starts_with("### নির্দেশ: বাক্যটা ঠিক কর।"));
  const auto a = r.text.find("নির্দেশ:"), b = r.text.find("ইনপুট:"), c = r.text.find("উত্তর:");
  ASSERT_NE(b, std::string::npos);
  ASSERT_NE(c, std::string::npos);
  EXPECT_LT(a, b);
  EXPECT_LT(b, c);
  EXPECT_LT(r.text.find("কিছুক্ষণ আগে"), c);
  EXPECT_GT(r.response.begin, c);
}

TEST(Render, TemplatesAreValidAndLookupFails) {
  for (const auto& t : builtin_templates()) EXPECT_NO_THROW(t.validate());
  EXPECT_EQ(find_template("hi").header_instruction, "### अनुदेश: ");
  EXPECT_THROW(find_template("xx"), ConfigError);
}

namespace {

tokenizer::TokenizerModel bengali_tokenizer() {
  tokenizer::TrainOptions o;
  o.vocab_size = 320;
  return tokenizer::train_bpe({render_prompt(figure_example(), find_template("bn"), true).text}, o);
}

}  // namespace

TEST(EncodeSft, MaskCoversResponseAndEos) {
  const auto tok = bengali_tokenizer();
  const auto ex = figure_example();
  const auto e = encode_sft(tok, ex, find_template("bn"), 512);
  ASSERT_TRUE(e);
  EXPECT_EQ(e->tokens.front(), tokenizer::kBosId);
  EXPECT_EQ(e->tokens.back(), tokenizer::kEosId);
  std::vector<lm::TokenId> masked, prompt;
  for (std::size_t i = 0; i < e->tokens.size(); ++i) (e->mask[i] ? masked : prompt).push_back(e->tokens[i]);
  EXPECT_EQ(masked.back(), tokenizer::kEosId);
  masked.pop_back();
  EXPECT_EQ(tok.decode(masked), ex.response);
  prompt.erase(prompt.begin());
  EXPECT_EQ(tok.decode(prompt), render_prompt(ex, find_template("bn"), false).text);
}

TEST(EncodeSft, TruncatesInputFromLeftThenInstruction) {
  const auto tok = bengali_tokenizer();
  auto ex = figure_example();
  const auto full = encode_sft(tok, ex, find_template("bn"), 512);
  ASSERT_TRUE(full);
  const std::size_t n = full->tokens.size();
  const auto input_tokens = tok.encode(*ex.input).size();
  SftEncodeStats st;
  const auto cut = encode_sft(tok, ex, find_template("bn"), n - 1 - 3, &st);
  ASSERT_TRUE(cut);
  EXPECT_EQ(cut->tokens.size(), n - 3);
  EXPECT_EQ(st.truncated_input, 1u);
  EXPECT_EQ(st.truncated_instruction, 0u);
  // Exactly the first three input tokens are gone.
  const auto& t = find_template("bn");
  const std::size_t input_at = 1 + tok.encode(t.header_instruction).size() + tok.encode(ex.instruction).size() +
                               tok.encode(t.separator + t.header_input).size();
  auto expect = full->tokens;
  expect.erase(expect.begin() + static_cast<std::ptrdiff_t>(input_at),
               expect.begin() + static_cast<std::ptrdiff_t>(input_at + 3));
  EXPECT_EQ(cut->tokens, expect);
  const auto deeper = encode_sft(tok, ex, find_template("bn"), n - 1 - input_tokens - 2, &st);
  ASSERT_TRUE(deeper);
  EXPECT_EQ(st.truncated_instruction, 1u);
  const std::size_t resp = tok.encode(ex.response).size();
  EXPECT_FALSE(encode_sft(tok, ex, find_template("bn"), resp, &st));
  EXPECT_EQ(st.skipped, 1u);
}

TEST(Records, JsonRoundTripAndValidation) {
  const auto dir = std::filesystem::temp_directory_path() / "indiclm_instruct_test";
  std::filesystem::create_directories(dir);
  auto recs = fixtures::mock_records(Source::translated, 7, "x");
  write_instructions(dir / "a.jsonl", recs);
  EXPECT_EQ(read_instructions(dir / "a.jsonl"), recs);
  EXPECT_THROW(InstructionExample::from_json({{"instruction", ""}, {"output", "x"}, {"lang", "bn"}}), FormatError);
  EXPECT_THROW(InstructionExample::from_json({{"instruction", "a"}, {"output", "x"}, {"lang", "Bengali"}}),
               FormatError);
  EXPECT_THROW(InstructionExample::from_json({{"instruction", "a"}, {"output", "x"}, {"lang", "bn"}, {"source", "web"}}),
               FormatError);
  EXPECT_TRUE(valid_language_tag("kok"));
  EXPECT_TRUE(valid_language_tag("hi-Latn"));
  EXPECT_FALSE(valid_language_tag("H"));
}

TEST(Translate, IdentityClientFlipsSourceOnly) {
  auto recs = fixtures::mock_records(Source::human, 10, "id");
  MockTranslationClient client;
  TranslateOptions opt;
  opt.sleep = [](Clock::duration) {};
  const auto res = translate_dataset(recs, client, "bn", opt);
  ASSERT_EQ(res.examples.size(), 10u);
  EXPECT_TRUE(res.failures.empty());
  for (std::size_t i = 0; i < 10; ++i) {
    auto expect = recs[i];
    expect.source = Source::translated;
    EXPECT_EQ(res.examples[i], expect);
  }
}

TEST(Translate, OneFailingRecordOfTen) {
  auto recs = fixtures::mock_records(Source::human, 10, "pf");
  const std::string bad = recs[6].response;
  MockTranslationClient client(1e9, {}, [&](std::size_t, const std::string& t) { return t == bad; });
  TranslateOptions opt;
  std::vector<Clock::duration> sleeps;
  opt.sleep = [&](Clock::duration d) { sleeps.push_back(d); };
  const auto res = translate_dataset(recs, client, "hi", opt);
  EXPECT_EQ(res.examples.size(), 9u);
  ASSERT_EQ(res.failures.size(), 1u);
  EXPECT_EQ(res.failures[0].index, 6u);
  EXPECT_EQ(res.failures[0].field, "response");
  EXPECT_EQ(res.failures[0].attempts, opt.max_attempts);
  for (const auto& e : res.examples) EXPECT_NE(e.instruction, recs[6].instruction);
  // Backoff doubles: 200, 400, 800 ms.
  std::vector<Clock::duration> backoffs;
  for (auto d : sleeps)
    if (d >= std::chrono::milliseconds(200)) backoffs.push_back(d);
  EXPECT_EQ(backoffs, (std::vector<Clock::duration>{std::chrono::milliseconds(200), std::chrono::milliseconds(400),
                                                    std::chrono::milliseconds(800)}));
}

TEST(Translate, TransientFailureIsRetried) {
  auto recs = fixtures::mock_records(Source::human, 1, "tr");
  MockTranslationClient client(1e9, [](const std::string& t, auto&, auto&) { return "T:" + t; },
                               [](std::size_t call, const std::string&) { return call < 2; });
  TranslateOptions opt;
  opt.sleep = [](Clock::duration) {};
  const auto res = translate_dataset(recs, client, "ta", opt);
  ASSERT_EQ(res.examples.size(), 1u);
  EXPECT_EQ(res.examples[0].instruction, "T:" + recs[0].instruction);
  EXPECT_EQ(res.examples[0].language, "ta");
}

TEST(Translate, AllFailedReportsEveryRecord) {
  auto recs = fixtures::mock_records(Source::human, 3, "af");
  MockTranslationClient client(1e9, {}, [](std::size_t, const std::string&) { return true; });
  TranslateOptions opt;
  opt.max_attempts = 2;
  opt.sleep = [](Clock::duration) {};
  try {
    translate_dataset(recs, client, "bn", opt);
    FAIL();
  } catch (const TranslationError& e) {
    const std::string m = e.what();
    for (int i = 0; i < 3; ++i) EXPECT_NE(m.find(fmt::format("record {}", i)), std::string::npos) << m;
  }
}

TEST(Translate, RespectsRateLimitOnLargeBatch) {
  auto recs = fixtures::mock_records(Source::human, 15000, "rl");
  Clock::time_point fake{};
  std::vector<Clock::time_point> stamps;
  const double rate = 50;
  MockTranslationClient client(rate, [&](const std::string& t, auto&, auto&) {
    stamps.push_back(fake);
    return t;
  });
  TranslateOptions opt;
  opt.now = [&] { return fake; };
  opt.sleep = [&](Clock::duration d) { fake += d; };
  const auto res = translate_dataset(recs, client, "bn", opt);
  EXPECT_EQ(res.examples.size(), 15000u);
  ASSERT_EQ(stamps.size(), client.calls());
  std::size_t lo = 0, worst = 0;
  for (std::size_t hi = 0; hi < stamps.size(); ++hi) {
    while (stamps[hi] - stamps[lo] >= std::chrono::seconds(1)) ++lo;
    worst = std::max(worst, hi - lo + 1);
  }
  EXPECT_LE(worst, static_cast<std::size_t>(rate));
}

TEST(Translate, HttpClientSpeaksJsonSchema) {
  httplib::Server srv;
  std::string seen_key;
  srv.Post("/translate", [&](const httplib::Request& req, httplib::Response& res) {
    const auto j = nlohmann::json::parse(req.body);
    seen_key = j.value("api_key", "");
    if (j["q"] == "boom") {
      res.status = 500;
      return;
    }
    res.set_content(nlohmann::json{{"translatedText", j["target"].get<std::string>() + ":" + j["q"].get<std::string>()}}.dump(),
                    "application/json");
  });
  const int port = srv.bind_to_any_port("127.0.0.1");
  std::thread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  ::setenv("INDICLM_TEST_TRANSLATE_KEY", "secret", 1);
  HttpTranslationClient client(fmt::format("http://127.0.0.1:{}/translate", port), 100, "INDICLM_TEST_TRANSLATE_KEY");
  EXPECT_EQ(client.translate("hello", "en", "bn"), "bn:hello");
  EXPECT_EQ(seen_key, "secret");
  EXPECT_THROW(client.translate("boom", "en", "bn"), TranslationError);
  srv.stop();
  th.join();
  EXPECT_THROW(HttpTranslationClient("ftp://x"), ConfigError);
}

TEST(Similarity, TrigramJaccard) {
  EXPECT_DOUBLE_EQ(ngram_jaccard("a b c d", "a b c d"), 1.0);
  EXPECT_DOUBLE_EQ(ngram_jaccard("a b c d", "a b c e"), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(ngram_jaccard("Name a fruit.", "name a fruit"), 1.0);
  EXPECT_DOUBLE_EQ(ngram_jaccard("two words", "two words"), 1.0);
  EXPECT_DOUBLE_EQ(ngram_jaccard("two words", "two birds"), 0.0);
  EXPECT_EQ(word_ngrams("কখ গঘ। ঙচ ছজ").size(), 2u);
}

namespace {

std::vector<InstructionExample> seeds() {
  std::vector<InstructionExample> s;
  for (const char* q : {"name three rivers of india", "write a short poem about rain", "explain how plants make food"}) {
    InstructionExample ex;
    ex.instruction = q;
    ex.response = "ok";
    ex.language = "en";
    s.push_back(ex);
  }
  return s;
}

}  // namespace

TEST(SelfInstruct, RejectsCopiesOfSeeds) {
  const auto& t = find_template("default");
  SelfInstructOptions opt;
  opt.count = 5;
  opt.language = "en";
  const TextGenerator copy = [&](const std::string&, std::size_t a) {
    return seeds()[a % 3].instruction + t.separator + t.header_response + "ok";
  };
  try {
    self_instruct(copy, seeds(), t, opt);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("50 attempts"), std::string::npos) << e.what();
  }
}

TEST(SelfInstruct, AcceptsNovelAndKeepsPairwiseBelowThreshold) {
  const auto& t = find_template("default");
  SelfInstructOptions opt;
  opt.count = 6;
  opt.language = "en";
  const char* cands[] = {"list four colours of the sky", "list four colours of the sky today",
                         "describe a busy market morning", "garbage without response header",
                         "translate a proverb into hindi", "count the stars tonight please",
                         "describe a busy market morning", "suggest a name for a cat", "plan a small garden"};
  const TextGenerator gen = [&](const std::string& prompt, std::size_t a) {
    EXPECT_TRUE(prompt.ends_with(t.header_instruction));
    const std::string c = cands[a % 9];
    if (c.starts_with("garbage")) return c;
    return c + t.separator + t.header_response + "answer";
  };
  const auto res = self_instruct(gen, seeds(), t, opt);
  EXPECT_EQ(res.examples.size(), 6u);
  EXPECT_EQ(res.stats.unparseable, 1u);
  EXPECT_EQ(res.stats.too_similar, 2u);
  auto all = seeds();
  all.insert(all.end(), res.examples.begin(), res.examples.end());
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j)
      EXPECT_LT(ngram_jaccard(all[i].instruction, all[j].instruction), opt.similarity_threshold);
  for (const auto& e : res.examples) EXPECT_EQ(e.source, Source::self_instruct);
}

TEST(SelfInstruct, ThresholdOneRejectsOnlyExactDuplicates) {
  const auto& t = find_template("default");
  SelfInstructOptions opt;
  opt.count = 2;
  opt.language = "en";
  opt.similarity_threshold = 1.0;
  opt.max_attempts = 2;
  const char* cands[] = {"name three rivers of india", "name three rivers of nepal"};
  const TextGenerator gen = [&](const std::string&, std::size_t a) {
    return std::string(cands[a]) + t.separator + t.header_response + "x";
  };
  const auto res = self_instruct(gen, seeds(), t, opt);
  ASSERT_EQ(res.examples.size(), 1u);
  EXPECT_EQ(res.examples[0].instruction, "name three rivers of nepal");
  EXPECT_EQ(res.stats.too_similar, 1u);
}

TEST(SelfInstruct, OverfitModelEchoesSeedsAndIsRejected) {
  const auto& t = find_template("default");
  InstructionExample seed;
  seed.instruction = "name a fruit";
  seed.response = "mango";
  seed.language = "en";
  const std::string doc = render_prompt(seed, t, true).text + t.separator;
  tokenizer::TrainOptions to;
  to.vocab_size = 290;
  const auto tok = tokenizer::train_bpe({doc}, to);
  std::vector<std::vector<lm::TokenId>> docs(60, tok.encode(doc));
  const auto stream = train::build_stream(docs, tokenizer::kBosId);
  lm::ModelConfig mc;
  mc.vocab_size = tok.vocab_size();
  mc.d_model = 32;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.context_len = 96;
  mc.seed = 1;
  train::TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.warmup_steps = 10;
  tc.max_steps = 250;
  tc.batch_size = 4;
  tc.seq_len = 48;
  tc.eval_interval_k = 250;
  tc.checkpoint_every = 250;
  const auto trained = train::pretrain(lm::init_model(mc), {stream, {}}, tc);
  lm::Fp32Predictor model(trained.params);
  decode::SamplerConfig sc;
  sc.temperature = 0;
  sc.max_new_tokens = 30;
  SelfInstructOptions opt;
  opt.count = 3;
  opt.max_attempts = 5;
  opt.language = "en";
  opt.examples_per_prompt = 1;
  try {
    self_instruct_generate(model, tok, {seed}, t, sc, opt);
    FAIL() << "an echoing model should get nothing accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("5 attempts"), std::string::npos) << e.what();
  }
}

TEST(BuildDataset, ReferenceCompositionAndManifest) {
  const auto h = fixtures::mock_records(Source::human, 5000, "h");
  const auto tr = fixtures::mock_records(Source::translated, 15000, "t");
  const auto s = fixtures::mock_records(Source::self_instruct, 3000, "s");
  const auto d = build_dataset(h, tr, s, 42);
  EXPECT_EQ(d.examples.size(), 23000u);
  EXPECT_EQ(d.manifest.total, 23000u);
  EXPECT_EQ(d.manifest.kept_counts.at("human"), 5000u);
  EXPECT_EQ(d.manifest.kept_counts.at("translated"), 15000u);
  EXPECT_EQ(d.manifest.kept_counts.at("self_instruct"), 3000u);
  for (const auto& [k, v] : d.manifest.dropped_duplicates) EXPECT_EQ(v, 0u) << k;
  EXPECT_EQ(build_dataset(h, tr, s, 42).examples, d.examples);
  EXPECT_NE(build_dataset(h, tr, s, 43).examples, d.examples);
  EXPECT_FALSE(std::equal(d.examples.begin(), d.examples.begin() + 100, h.begin()));
}

TEST(BuildDataset, DuplicateAcrossSourcesDropped) {
  const auto h = fixtures::mock_records(Source::human, 5000, "h");
  auto tr = fixtures::mock_records(Source::translated, 15000, "t");
  const auto s = fixtures::mock_records(Source::self_instruct, 3000, "s");
  tr[123] = h[77];
  tr[123].source = Source::translated;
  const auto d = build_dataset(h, tr, s, 1);
  EXPECT_EQ(d.examples.size(), 22999u);
  EXPECT_EQ(d.manifest.dropped_duplicates.at("translated"), 1u);
  std::size_t in = 0, kept = 0, dropped = 0;
  for (const auto& [k, v] : d.manifest.input_counts) in += v;
  for (const auto& [k, v] : d.manifest.kept_counts) kept += v;
  for (const auto& [k, v] : d.manifest.dropped_duplicates) dropped += v;
  EXPECT_EQ(in, d.examples.size() + dropped);
  EXPECT_EQ(kept, d.examples.size());
  const auto j = d.manifest.to_json();
  EXPECT_EQ(j["total"], 22999);
}
