#include "indiclm/serve/bench.hpp"

#include <algorithm>
#include <chrono>
#include <stdexcept>

#include <fmt/format.h>

#include "indiclm/decode/decode.hpp"
#include "indiclm/kernels/linalg.hpp"

namespace indiclm::serve {

nlohmann::json BenchResult::to_json() const {
  return {{"model_id", model_id},
          {"precision", precision},
          {"prompt_tokens", prompt_tokens},
          {"generated_tokens", generated_tokens},
          {"elapsed_seconds", elapsed_seconds},
          {"tokens_per_second", tokens_per_second},
          {"threads", threads}};
}

BenchResult make_bench_result(std::string model_id, std::string precision, std::size_t prompt_tokens,
                              std::size_t generated_tokens, double elapsed_seconds, int threads) {
  if (!(elapsed_seconds > 0)) throw std::invalid_argument(fmt::format("elapsed time {} is not positive", elapsed_seconds));
  BenchResult r;
  r.model_id = std::move(model_id);
  r.precision = std::move(precision);
  r.prompt_tokens = prompt_tokens;
  r.generated_tokens = generated_tokens;
  r.elapsed_seconds = elapsed_seconds;
  r.tokens_per_second = static_cast<double>(generated_tokens) / elapsed_seconds;
  r.threads = threads;
  return r;
}

BenchResult bench_inference(const lm::TokenPredictor& model, const tokenizer::TokenizerModel& tok,
                            const std::string& prompt, const BenchOptions& opt, const std::string& model_id) {
  if (opt.n_tokens == 0) throw std::invalid_argument("n_tokens must be at least 1");
  if (opt.threads > 0) kernels::set_threads(opt.threads);
  const std::size_t ctx = model.config().context_len;
  std::vector<lm::TokenId> ids{tokenizer::kBosId};
  const auto body = tok.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  if (ids.size() >= ctx)
    throw std::invalid_argument(fmt::format("prompt of {} tokens leaves no room in context {}", ids.size(), ctx));

  auto session = model.start();
  std::size_t generated = 0;
  const auto t0 = std::chrono::steady_clock::now();
  std::span<const float> logits;
  for (lm::TokenId id : ids) logits = session->step(id);
  while (generated < opt.n_tokens) {
    const auto next = static_cast<lm::TokenId>(decode::argmax(logits));
    if (std::find(opt.stop_tokens.begin(), opt.stop_tokens.end(), next) != opt.stop_tokens.end()) break;
    ++generated;
    if (session->position() >= ctx) break;
    logits = session->step(next);
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return make_bench_result(model_id, model.precision(), ids.size(), generated, std::max(elapsed, 1e-9),
                           kernels::max_threads());
}

}  // namespace indiclm::serve
