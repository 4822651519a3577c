#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiclm/decode/decode.hpp"
#include "indiclm/lm/inference.hpp"
#include "indiclm/tokenizer/tokenizer.hpp"
#include "indiclm/train/train.hpp"

namespace indiclm::instruct {

enum class Source { human, translated, self_instruct };

std::string to_string(Source s);
// Throws FormatError.
Source parse_source(std::string_view s);

// Lowercase ISO 639 code with optional subtags, e.g. "bn", "kok", "hi-Latn".
bool valid_language_tag(std::string_view tag);

struct InstructionExample {
  std::string instruction;
  std::optional<std::string> input;
  std::string response;
  std::string language;
  Source source = Source::human;

  // Throws FormatError naming the broken field.
  void validate() const;
  // {instruction, input, output, lang, source}; input is "" when absent.
  nlohmann::json to_json() const;
  static InstructionExample from_json(const nlohmann::json& j);

  friend bool operator==(const InstructionExample&, const InstructionExample&) = default;
};

std::vector<InstructionExample> read_instructions(const std::filesystem::path& path);
void write_instructions(const std::filesystem::path& path, const std::vector<InstructionExample>& examples);

// Headers carry their own trailing whitespace; sections are joined by
// separator.
struct PromptTemplate {
  std::string name;
  std::string header_instruction;
  std::string header_input;
  std::string header_response;
  std::string separator;

  void validate() const;  // throws ConfigError
};

// Templates: "bn", "hi", "ta", "te" and "default".
const std::vector<PromptTemplate>& builtin_templates();
// Throws ConfigError for an unknown name.
const PromptTemplate& find_template(std::string_view name);

// Byte offsets into the rendered text.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
};

struct RenderedPrompt {
  std::string text;
  Span instruction;
  Span input;  // empty when the example has no input
  Span response;
};

// header_instruction + instruction + separator + [header_input + input +
// separator] + header_response + [response]
RenderedPrompt render_prompt(const InstructionExample& ex, const PromptTemplate& tmpl, bool include_response);

// Splits model text continuing a header_instruction back into an example.
// Returns nullopt when the instruction or response is missing.
std::optional<InstructionExample> parse_rendered(std::string_view text, const PromptTemplate& tmpl,
                                                 const std::string& language);

struct SftEncodeStats {
  std::size_t truncated_input = 0;
  std::size_t truncated_instruction = 0;
  std::size_t skipped = 0;  // response alone does not fit
};

// bos + prompt tokens + response tokens + eos, with the mask set on the
// response and eos. The prompt is the render without response, so generation
// from the same render sees the same tokens. Over-long examples lose input
// tokens from the left first, then instruction tokens from the left; the
// response is never cut, and nullopt is returned when it cannot fit.
std::optional<train::SftExample> encode_sft(const tokenizer::TokenizerModel& tok, const InstructionExample& ex,
                                            const PromptTemplate& tmpl, std::size_t context_len,
                                            SftEncodeStats* stats = nullptr);

// Translation backend. Implementations declare their rate limit.
class TranslationClient {
 public:
  virtual ~TranslationClient() = default;
  virtual std::string translate(const std::string& text, const std::string& source_lang,
                                const std::string& target_lang) = 0;
  virtual double max_calls_per_second() const = 0;
};

class TranslationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Deterministic client for tests and dry runs: applies fn (identity by
// default) and throws TranslationError when fail(call_index, text) is true.
class MockTranslationClient final : public TranslationClient {
 public:
  using Fn = std::function<std::string(const std::string&, const std::string&, const std::string&)>;
  using FailFn = std::function<bool(std::size_t call_index, const std::string& text)>;

  explicit MockTranslationClient(double calls_per_second = 1e9, Fn fn = {}, FailFn fail = {});
  std::string translate(const std::string& text, const std::string& source_lang,
                        const std::string& target_lang) override;
  double max_calls_per_second() const override { return rate_; }
  std::size_t calls() const { return calls_; }

 private:
  double rate_;
  Fn fn_;
  FailFn fail_;
  std::size_t calls_ = 0;
};

// POST {q, source, target[, api_key]} as JSON to url and read
// {translatedText}. The key comes from the named environment variable when it
// is set. Plain http only.
class HttpTranslationClient final : public TranslationClient {
 public:
  HttpTranslationClient(std::string url, double calls_per_second = 5.0,
                        std::string api_key_env = "INDICLM_TRANSLATE_API_KEY",
                        std::chrono::milliseconds timeout = std::chrono::seconds(30));
  std::string translate(const std::string& text, const std::string& source_lang,
                        const std::string& target_lang) override;
  double max_calls_per_second() const override { return rate_; }

 private:
  std::string host_;
  std::string path_;
  double rate_;
  std::string api_key_;
  std::chrono::milliseconds timeout_;
};

using Clock = std::chrono::steady_clock;

struct TranslateOptions {
  std::string source_lang = "en";
  std::size_t max_attempts = 4;  // per field, including the first try
  std::chrono::milliseconds base_backoff{200};
  std::chrono::milliseconds max_backoff{5000};
  std::function<Clock::time_point()> now = [] { return Clock::now(); };
  std::function<void(Clock::duration)> sleep;  // std::this_thread::sleep_for when empty
};

struct TranslateFailure {
  std::size_t index = 0;
  std::string field;
  std::string error;
  std::size_t attempts = 0;
};

struct TranslateResult {
  std::vector<InstructionExample> examples;  // successes, input order
  std::vector<TranslateFailure> failures;
};

// Translates instruction, input and response of each record. A failed record
// is reported and skipped. Calls are spaced at least 1/rate apart. Throws
// TranslationError listing every failure when no record succeeds.
TranslateResult translate_dataset(const std::vector<InstructionExample>& examples, TranslationClient& client,
                                  const std::string& target_lang, const TranslateOptions& options = {});

// Word n-grams (n = 3, or the whole text when shorter) after dropping
// sentence punctuation.
std::vector<std::string> word_ngrams(std::string_view text, std::size_t n = 3);
double ngram_jaccard(std::string_view a, std::string_view b, std::size_t n = 3);

struct SelfInstructOptions {
  std::size_t count = 10;
  double similarity_threshold = 0.7;
  std::size_t max_attempts = 0;  // 0: 10 * count
  std::size_t examples_per_prompt = 3;
  std::string language = "hi";
  std::uint64_t seed = 0;
};

struct SelfInstructStats {
  std::size_t attempts = 0;
  std::size_t accepted = 0;
  std::size_t unparseable = 0;
  std::size_t too_similar = 0;
};

struct SelfInstructResult {
  std::vector<InstructionExample> examples;
  SelfInstructStats stats;
};

// Model continuation of `prompt`; attempt selects the sampling substream.
using TextGenerator = std::function<std::string(const std::string& prompt, std::size_t attempt)>;

// Prompts with sampled seed or accepted tasks followed by a bare instruction
// header, parses the continuation and keeps candidates whose instruction
// overlap with every seed and accepted instruction stays below the
// threshold. Throws std::runtime_error with the statistics when nothing is
// accepted.
SelfInstructResult self_instruct(const TextGenerator& generate, const std::vector<InstructionExample>& seed_tasks,
                                 const PromptTemplate& tmpl, const SelfInstructOptions& options);

SelfInstructResult self_instruct_generate(const lm::TokenPredictor& model, const tokenizer::TokenizerModel& tok,
                                          const std::vector<InstructionExample>& seed_tasks,
                                          const PromptTemplate& tmpl, const decode::SamplerConfig& sampler,
                                          const SelfInstructOptions& options);

struct DatasetManifest {
  std::map<std::string, std::size_t> input_counts;
  std::map<std::string, std::size_t> kept_counts;
  std::map<std::string, std::size_t> dropped_duplicates;
  std::size_t total = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct BuiltDataset {
  std::vector<InstructionExample> examples;
  DatasetManifest manifest;
};

// Concatenates human, translated and self-generated records, drops repeated
// (instruction, input, response) triples keeping the first, then shuffles
// with seed.
BuiltDataset build_dataset(const std::vector<InstructionExample>& human,
                           const std::vector<InstructionExample>& translated,
                           const std::vector<InstructionExample>& self_gen, std::uint64_t seed = 0);

}  // namespace indiclm::instruct
