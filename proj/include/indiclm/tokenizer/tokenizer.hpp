#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "indiclm/common/script.hpp"

namespace indiclm::tokenizer {

using TokenId = std::int32_t;

inline constexpr int kFormatVersion = 1;

// Reserved ids 0..3. Their strings live in their own namespace: ordinary text
// that happens to read "<s>" never encodes to a special id.
struct SpecialTokens {
  std::string pad = "<pad>";
  std::string unk = "<unk>";
  std::string bos = "<s>";
  std::string eos = "</s>";

  friend bool operator==(const SpecialTokens&, const SpecialTokens&) = default;
};

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kBosId = 2;
inline constexpr TokenId kEosId = 3;
inline constexpr TokenId kNumSpecials = 4;

struct Merge {
  TokenId left = 0;
  TokenId right = 0;
  TokenId output = 0;
};

class TokenizerModel {
 public:
  TokenizerModel() = default;
  // With byte fallback the base is the specials and the 256 single bytes
  // (id 4 + b); otherwise `alphabet` (distinct codepoints, UTF-8) follows the
  // specials.
  TokenizerModel(bool byte_fallback, SpecialTokens specials, std::vector<ScriptProfile> scripts,
                 const std::vector<std::string>& alphabet = {});

  bool byte_fallback() const { return byte_fallback_; }
  const SpecialTokens& specials() const { return specials_; }
  const std::vector<ScriptProfile>& scripts() const { return scripts_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  std::size_t base_size() const { return base_size_; }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& vocab() const { return vocab_; }
  const std::vector<Merge>& merges() const { return merges_; }
  bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecials; }

  // Id of a non-special token string, or -1.
  TokenId find(std::string_view token) const;

  // Records the merge; appends the concatenation to the vocabulary unless an
  // identical token already exists. Returns the output id. Throws
  // std::invalid_argument if the pair was already merged.
  TokenId add_merge(TokenId left, TokenId right);

  std::vector<TokenId> encode(std::string_view text) const;
  // Specials decode to nothing, unk to U+FFFD; invalid byte sequences are
  // replaced by U+FFFD. Throws std::out_of_range for unknown ids.
  std::string decode(const std::vector<TokenId>& ids) const;

  void encode_unit(std::string_view unit, std::vector<TokenId>& out) const;

  void save(const std::filesystem::path& path) const;
  std::string serialize() const;
  // Throws FormatError.
  static TokenizerModel load(const std::filesystem::path& path);
  static TokenizerModel deserialize(std::string_view text);

  friend bool operator==(const TokenizerModel& a, const TokenizerModel& b) { return a.serialize() == b.serialize(); }

 private:
  static std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

  bool byte_fallback_ = true;
  SpecialTokens specials_;
  std::vector<ScriptProfile> scripts_;
  std::vector<std::string> vocab_;
  std::size_t base_size_ = 0;
  std::vector<Merge> merges_;
  std::unordered_map<std::string, TokenId> index_;
  std::unordered_map<std::uint64_t, std::size_t> merge_rank_;
};

// Splits text into pre-tokenization units: maximal runs of one class, where
// the class is "whitespace" or the script of the codepoint under `profiles`
// (unmatched codepoints form the "Other" class; ZWJ/ZWNJ join the run they
// follow). A single U+0020 immediately before a non-whitespace run is moved
// onto that run. A unit therefore never mixes two scripts.
std::vector<std::string> pretokenize(std::string_view text, const std::vector<ScriptProfile>& profiles);

struct TrainOptions {
  std::size_t vocab_size = 0;
  bool byte_fallback = true;
  std::vector<ScriptProfile> profiles = default_script_profiles();
  SpecialTokens specials;
  std::int64_t min_pair_count = 2;
};

// Byte-level BPE. Each step merges the most frequent adjacent pair; ties go
// to the lexicographically smaller (left bytes, right bytes). Stops at
// vocab_size entries or when no pair reaches min_pair_count. Throws
// std::invalid_argument when vocab_size is below the base alphabet or the
// corpus is empty.
TokenizerModel train_bpe(const std::vector<std::string>& corpus, const TrainOptions& options);

// Fraction of non-whitespace codepoints per script; unmatched ones count as
// "Other". Empty map for input without non-whitespace codepoints.
std::map<std::string, double> detect_script(std::string_view text, const std::vector<ScriptProfile>& profiles);

// Vocabulary union of a and b with merges interleaved by rank (a's merge i,
// then b's merge i), duplicates skipped, stopping once vocab_size entries
// exist. Throws ConfigError when specials or byte_fallback differ.
TokenizerModel merge_tokenizers(const TokenizerModel& a, const TokenizerModel& b, std::size_t vocab_size);

// Tokens per whitespace-delimited word. Throws std::invalid_argument for text
// without words.
double fertility(const TokenizerModel& model, std::string_view text);

std::size_t count_words(std::string_view text);

}  // namespace indiclm::tokenizer
