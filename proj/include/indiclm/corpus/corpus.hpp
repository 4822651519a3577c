#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiclm/common/script.hpp"

namespace indiclm::corpus {

struct RawDocument {
  std::string id;
  std::string language;
  std::string script;  // Bengali, Devanagari, Odia, Tamil, Telugu or Other
  std::string text;

  friend bool operator==(const RawDocument&, const RawDocument&) = default;
};

enum class CleanRule { sentence_split, unicode_normalize, whitespace, foreign_literals, emoji_symbols, links_pii };

std::string_view to_string(CleanRule rule);
CleanRule parse_clean_rule(std::string_view name);

// Rules run in a fixed order regardless of how they are listed:
//   unicode_normalize -> links_pii -> emoji_symbols -> foreign_literals -> whitespace
// and the whole pass repeats until the text stops changing. sentence_split is
// applied per document by clean_document(), before the other rules.
struct CleanConfig {
  std::vector<CleanRule> enabled_rules;
  std::vector<CodepointRange> allowed_script_ranges;
  std::map<std::string, std::u32string, std::less<>> sentence_terminators;
  // Punctuation that survives foreign-literal removal. ASCII marks among them
  // are dropped when they do not follow text of an allowed script.
  std::u32string retained_punctuation;

  bool enabled(CleanRule rule) const;

  // All rules enabled; allowed ranges are the script's blocks plus the
  // retained punctuation and ZWJ/ZWNJ.
  static CleanConfig for_script(std::string_view script);
  static CleanConfig for_scripts(const std::vector<std::string>& scripts);

  // {"rules": [...], "scripts": [...], "extra_ranges": "0964..0965",
  //  "terminators": {"Devanagari": "।॥"}, "retained_punctuation": "।॥.,?!"}
  static CleanConfig from_json(const nlohmann::json& j);
};

// Throws ConfigError if `script` has no terminators in the config.
std::vector<std::string> split_sentences(std::string_view text, std::string_view script, const CleanConfig& config);

std::string clean_text(std::string_view text, const CleanConfig& config);

// Splits (when enabled) and cleans; empty sentences are dropped and the rest
// joined with '\n'.
std::string clean_document(std::string_view text, std::string_view script, const CleanConfig& config);

struct DedupOptions {
  bool line_level = false;  // also drop lines already seen earlier in the corpus
};

// First occurrence wins; relative order is preserved.
std::vector<RawDocument> deduplicate(const std::vector<RawDocument>& docs, const DedupOptions& options = {});

struct SplitSpec {
  double train_fraction = 0.95;
  std::uint64_t seed = 0;
};

struct TrainValSplit {
  std::vector<RawDocument> train;
  std::vector<RawDocument> val;
};

// Documents are shuffled with the seeded PRNG, then cut at
// round(train_fraction * n). Each side keeps the original relative order.
TrainValSplit split_train_val(const std::vector<RawDocument>& docs, const SplitSpec& spec);

struct CorpusStats {
  std::size_t input_documents = 0;
  std::size_t output_documents = 0;
  std::size_t total_codepoints = 0;
  std::map<std::string, std::size_t> codepoints_by_script;
  double dedup_ratio = 0.0;  // fraction of documents removed by dedup

  nlohmann::json to_json() const;
};

CorpusStats compute_stats(const std::vector<RawDocument>& docs, std::size_t input_documents,
                          std::size_t before_dedup);

// Throws FormatError on empty/duplicate ids or invalid UTF-8.
void validate_corpus(const std::vector<RawDocument>& docs);

std::vector<RawDocument> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<RawDocument>& docs);
// One document per *.txt file; ids are the file stems.
std::vector<RawDocument> read_text_dir(const std::filesystem::path& dir, const std::string& language,
                                       const std::string& script);

}  // namespace indiclm::corpus
