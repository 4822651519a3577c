#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiclm/lm/inference.hpp"
#include "indiclm/tokenizer/tokenizer.hpp"

namespace indiclm::serve {

struct BenchResult {
  std::string model_id;
  std::string precision;  // "fp32" or "int8"
  std::size_t prompt_tokens = 0;
  std::size_t generated_tokens = 0;
  double elapsed_seconds = 0;
  double tokens_per_second = 0;
  int threads = 1;

  nlohmann::json to_json() const;
};

// Fills tokens_per_second = generated / elapsed. Throws std::invalid_argument
// unless elapsed > 0.
BenchResult make_bench_result(std::string model_id, std::string precision, std::size_t prompt_tokens,
                              std::size_t generated_tokens, double elapsed_seconds, int threads);

struct BenchOptions {
  std::size_t n_tokens = 128;
  int threads = 1;  // 0 keeps the current OpenMP setting
  std::vector<lm::TokenId> stop_tokens{tokenizer::kEosId};
};

// Greedy decoding of up to n_tokens after bos + encode(prompt). The clock
// covers prompt prefill and the token loop, not encoding or model load.
// Stops early at a stop token (not counted, as in generate) or the context
// end and reports the real count.
BenchResult bench_inference(const lm::TokenPredictor& model, const tokenizer::TokenizerModel& tok,
                            const std::string& prompt, const BenchOptions& opt, const std::string& model_id);

}  // namespace indiclm::serve
