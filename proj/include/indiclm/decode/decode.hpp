#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiclm/common/rng.hpp"
#include "indiclm/lm/inference.hpp"
#include "indiclm/tokenizer/tokenizer.hpp"

namespace indiclm::decode {

using lm::TokenId;

struct SamplerConfig {
  double temperature = 1.0;  // 0 selects greedy decoding
  std::optional<std::size_t> top_k;
  std::optional<double> top_p = 0.9;
  std::size_t max_new_tokens = 64;
  std::size_t n_samples = 3;
  std::vector<TokenId> stop_tokens{tokenizer::kEosId};
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; "top_k"/"top_p" may be null to disable.
  static SamplerConfig from_json(const nlohmann::json& j);
};

// softmax(logits / tau) in double. Throws std::invalid_argument for tau <= 0
// or non-finite logits.
std::vector<double> apply_temperature(std::span<const float> logits, double tau);
std::vector<double> apply_temperature(std::span<const double> logits, double tau);

// Keeps the k most probable entries (ties to the smaller id) and
// renormalizes. Throws std::invalid_argument for k < 1.
std::vector<double> top_k_filter(std::span<const double> probs, std::size_t k);

// Keeps the shortest probability-descending prefix whose mass reaches p,
// including the token that crosses p, and renormalizes. Ties go to the
// smaller id. Throws std::invalid_argument unless 0 < p <= 1.
std::vector<double> top_p_filter(std::span<const double> probs, double p);

// Inverse CDF over ascending ids using one rng.uniform() draw. Throws
// std::invalid_argument when no entry is positive.
TokenId sample_next(std::span<const double> probs, Rng& rng);

// Smallest id among the maxima.
TokenId argmax(std::span<const float> logits);

double entropy(std::span<const double> probs);

// Seed of sample i's private stream.
std::uint64_t substream_seed(std::uint64_t seed, std::size_t sample_index);

// Continues prompt_ids for one sample. Stops at a stop token (not included),
// max_new_tokens or once the session has consumed context_len tokens (the
// token predicted from the last position is still emitted).
std::vector<TokenId> generate_ids(const lm::TokenPredictor& model, std::span<const TokenId> prompt_ids,
                                  const SamplerConfig& config, std::size_t sample_index);

struct Sample {
  std::string prompt;
  std::size_t sample_index = 0;
  std::string text;
  std::size_t token_count = 0;
  double seconds = 0;
  std::vector<TokenId> tokens;

  nlohmann::json to_json() const;
};

// The prompt is encoded after a bos token. Throws std::invalid_argument when
// that is already context_len tokens or more, or when the tokenizer and model
// vocabulary sizes differ.
std::vector<Sample> generate(const lm::TokenPredictor& model, const tokenizer::TokenizerModel& tok,
                             const std::string& prompt, const SamplerConfig& config);

}  // namespace indiclm::decode
