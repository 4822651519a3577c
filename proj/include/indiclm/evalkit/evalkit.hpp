#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiclm/lm/model.hpp"

namespace indiclm::evalkit {

using lm::TokenId;

inline constexpr std::array<const char*, 4> kMetrics = {"grammar", "coherence", "creativity", "factuality"};
inline constexpr double kMinScore = 0.0;
inline constexpr double kMaxScore = 5.0;

struct RecordRef {
  std::string prompt_id;
  std::string model_id;
  std::size_t sample_index = 0;

  friend auto operator<=>(const RecordRef&, const RecordRef&) = default;
};

struct GenerationRecord {
  RecordRef ref;
  std::string prompt;
  std::string text;
  nlohmann::json sampler = nlohmann::json::object();

  nlohmann::json to_json() const;
  static GenerationRecord from_json(const nlohmann::json& j);
};

struct HumanScore {
  RecordRef ref;
  std::array<double, 4> metrics{};  // in kMetrics order
  std::string evaluator_id;
  std::optional<std::string> note;

  // "evaluator/model/prompt/sample"; unique per stored score.
  std::string id() const;
  // Throws std::invalid_argument naming the field out of [0, 5].
  void validate() const;
  nlohmann::json to_json() const;
  // Reads "grammar", "coherence", ... as top-level keys. Throws
  // std::invalid_argument on missing or out-of-range fields.
  static HumanScore from_json(const nlohmann::json& j);
};

struct EvalRow {
  std::string model;
  std::array<double, 4> values{};

  friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

struct EvalTable {
  std::vector<EvalRow> rows;  // sorted by model
  std::map<std::string, std::vector<std::string>> provenance;  // model -> score ids

  const EvalRow* find(std::string_view model) const;
};

// Per model and metric: mean over prompts of the per-prompt score, where the
// per-prompt score is the mean over evaluators of that evaluator's mean over
// the n samples. Each (model, prompt, evaluator) must score samples 0..n-1
// exactly once; otherwise std::invalid_argument lists every gap.
EvalTable aggregate_scores(std::span<const HumanScore> scores, std::size_t n = 3);

// (a - a_min) / (a_max - a_min). Throws std::invalid_argument unless
// a_max > a_min and a lies in [a_min, a_max].
double normalize_score(double a, double a_min, double a_max);

// Header "model,grammar,coherence,creativity,factuality". Values use five
// decimals, or more when five would not read back to the same double.
std::string export_csv(const EvalTable& table);
EvalTable import_csv(std::string_view csv);
void export_eval(const EvalTable& table, const std::filesystem::path& path);
std::string format_score(double v);

// Append-only JSONL store of scores. Appends are serialized; a score whose id
// is already stored replaces the earlier one when aggregating.
class ScoreStore {
 public:
  explicit ScoreStore(std::filesystem::path path);

  void append(const HumanScore& score);
  std::vector<HumanScore> all() const;
  // Latest score per id.
  std::vector<HumanScore> latest() const;

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::vector<HumanScore> scores_;
};

struct PerplexityReport {
  std::string model_id;
  double mean_nll = 0;
  double perplexity = 0;
  std::size_t tokens = 0;
  double elapsed_s = 0;

  nlohmann::json to_json() const;
};

// Scores every token after the first: the stream is cut into consecutive
// windows of window + 1 tokens overlapping by one, so each target is
// predicted once from the preceding tokens of its window.
PerplexityReport perplexity_report(const lm::Parameters& params, std::span<const TokenId> stream,
                                   std::size_t window, const std::string& model_id = "");

// Add-one smoothed unigram model fitted on train and scored on the same
// targets perplexity_report uses (eval[1..]).
PerplexityReport unigram_baseline(std::span<const TokenId> train, std::span<const TokenId> eval,
                                  std::size_t vocab_size);

struct ReferenceTable {
  std::string id;
  int table_number = 0;
  std::string title;
  std::string key_column;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;  // cells verbatim

  const std::vector<std::string>* row(std::string_view key) const;
  nlohmann::json to_json() const;
};

// Reads manifest.json and its TSV files. Throws FormatError.
std::vector<ReferenceTable> load_reference_tables(const std::filesystem::path& dir);

}  // namespace indiclm::evalkit
