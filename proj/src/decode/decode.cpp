#include "indiclm/decode/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"

namespace indiclm::decode {
namespace {

template <typename Real>
std::vector<double> softmax_scaled(std::span<const Real> logits, double tau) {
  if (!(tau > 0) || !std::isfinite(tau)) throw std::invalid_argument(fmt::format("temperature must be > 0, got {}", tau));
  if (logits.empty()) throw std::invalid_argument("empty logits");
  double mx = -INFINITY;
  for (Real l : logits) {
    if (!std::isfinite(static_cast<double>(l))) throw std::invalid_argument("non-finite logit");
    mx = std::max(mx, static_cast<double>(l));
  }
  std::vector<double> p(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((static_cast<double>(logits[i]) - mx) / tau);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return p;
}

// Ids by descending probability, ties by ascending id.
std::vector<std::size_t> ranked(std::span<const double> probs) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return idx;
}

std::vector<double> keep(std::span<const double> probs, std::span<const std::size_t> ids) {
  std::vector<double> out(probs.size(), 0.0);
  double z = 0;
  for (std::size_t i : ids) z += probs[i];
  if (!(z > 0)) throw std::invalid_argument("filter kept no probability mass");
  for (std::size_t i : ids) out[i] = probs[i] / z;
  return out;
}

}  // namespace

void SamplerConfig::validate() const {
  if (!(temperature >= 0) || !std::isfinite(temperature)) throw ConfigError("temperature must be finite and >= 0");
  if (top_k && *top_k < 1) throw ConfigError("top_k must be >= 1");
  if (top_p && !(*top_p > 0 && *top_p <= 1)) throw ConfigError("top_p must be in (0, 1]");
  if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be positive");
  if (n_samples == 0) throw ConfigError("n_samples must be positive");
}

nlohmann::json SamplerConfig::to_json() const {
  nlohmann::json j = {{"temperature", temperature},
                      {"max_new_tokens", max_new_tokens},
                      {"n_samples", n_samples},
                      {"stop_tokens", stop_tokens},
                      {"seed", seed}};
  j["top_k"] = top_k ? nlohmann::json(*top_k) : nlohmann::json();
  j["top_p"] = top_p ? nlohmann::json(*top_p) : nlohmann::json();
  return j;
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
  SamplerConfig c;
  try {
    if (!j.is_object()) throw ConfigError("sampler config must be an object");
    if (j.contains("temperature")) c.temperature = j["temperature"].get<double>();
    if (j.contains("top_k")) c.top_k = j["top_k"].is_null() ? std::nullopt : std::optional(j["top_k"].get<std::size_t>());
    if (j.contains("top_p")) c.top_p = j["top_p"].is_null() ? std::nullopt : std::optional(j["top_p"].get<double>());
    if (j.contains("max_new_tokens")) c.max_new_tokens = j["max_new_tokens"].get<std::size_t>();
    if (j.contains("n_samples")) c.n_samples = j["n_samples"].get<std::size_t>();
    if (j.contains("stop_tokens")) c.stop_tokens = j["stop_tokens"].get<std::vector<TokenId>>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("sampler config: {}", e.what()));
  }
  c.validate();
  return c;
}

std::vector<double> apply_temperature(std::span<const float> logits, double tau) { return softmax_scaled(logits, tau); }
std::vector<double> apply_temperature(std::span<const double> logits, double tau) {
  return softmax_scaled(logits, tau);
}

std::vector<double> top_k_filter(std::span<const double> probs, std::size_t k) {
  if (k < 1) throw std::invalid_argument("top_k must be >= 1");
  auto idx = ranked(probs);
  idx.resize(std::min(k, idx.size()));
  return keep(probs, idx);
}

std::vector<double> top_p_filter(std::span<const double> probs, double p) {
  if (!(p > 0 && p <= 1)) throw std::invalid_argument(fmt::format("top_p must be in (0, 1], got {}", p));
  auto idx = ranked(probs);
  double mass = 0;
  std::size_t n = 0;
  while (n < idx.size() && mass < p) mass += probs[idx[n++]];
  idx.resize(n);
  return keep(probs, idx);
}

TokenId sample_next(std::span<const double> probs, Rng& rng) {
  double total = 0;
  std::size_t last = probs.size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] < 0 || !std::isfinite(probs[i])) throw std::invalid_argument("invalid probability");
    if (probs[i] > 0) {
      total += probs[i];
      last = i;
    }
  }
  if (last == probs.size()) throw std::invalid_argument("cannot sample from an all-zero distribution");
  const double u = rng.uniform() * total;
  double cum = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    cum += probs[i];
    if (u < cum) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last);
}

TokenId argmax(std::span<const float> logits) {
  if (logits.empty()) throw std::invalid_argument("empty logits");
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double entropy(std::span<const double> probs) {
  double h = 0;
  for (double p : probs)
    if (p > 0) h -= p * std::log(p);
  return h;
}

std::uint64_t substream_seed(std::uint64_t seed, std::size_t sample_index) {
  return seed ^ splitmix64(static_cast<std::uint64_t>(sample_index));
}

std::vector<TokenId> generate_ids(const lm::TokenPredictor& model, std::span<const TokenId> prompt_ids,
                                  const SamplerConfig& config, std::size_t sample_index) {
  config.validate();
  const std::size_t ctx = model.config().context_len;
  if (prompt_ids.empty()) throw std::invalid_argument("empty prompt");
  if (prompt_ids.size() >= ctx)
    throw std::invalid_argument(fmt::format("prompt of {} tokens leaves no room in context {}", prompt_ids.size(), ctx));
  Rng rng(substream_seed(config.seed, sample_index));
  auto session = model.start();
  std::span<const float> logits;
  for (TokenId id : prompt_ids) logits = session->step(id);

  std::vector<TokenId> out;
  while (out.size() < config.max_new_tokens) {
    TokenId next;
    if (config.temperature == 0) {
      next = argmax(logits);
    } else {
      auto probs = apply_temperature(logits, config.temperature);
      if (config.top_k) probs = top_k_filter(probs, *config.top_k);
      if (config.top_p) probs = top_p_filter(probs, *config.top_p);
      next = sample_next(probs, rng);
    }
    if (std::find(config.stop_tokens.begin(), config.stop_tokens.end(), next) != config.stop_tokens.end()) break;
    out.push_back(next);
    if (session->position() >= ctx) break;
    logits = session->step(next);
  }
  return out;
}

nlohmann::json Sample::to_json() const {
  return {{"prompt", prompt}, {"sample_index", sample_index}, {"text", text}, {"token_count", token_count},
          {"seconds", seconds}};
}

std::vector<Sample> generate(const lm::TokenPredictor& model, const tokenizer::TokenizerModel& tok,
                             const std::string& prompt, const SamplerConfig& config) {
  config.validate();
  if (tok.vocab_size() != model.config().vocab_size)
    throw std::invalid_argument(fmt::format("tokenizer vocabulary {} differs from model vocabulary {}", tok.vocab_size(),
                                            model.config().vocab_size));
  std::vector<TokenId> ids{tokenizer::kBosId};
  const auto body = tok.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  if (ids.size() >= model.config().context_len)
    throw std::invalid_argument(
        fmt::format("prompt encodes to {} tokens; context length is {}", ids.size(), model.config().context_len));
  std::vector<Sample> out;
  for (std::size_t i = 0; i < config.n_samples; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Sample s;
    s.prompt = prompt;
    s.sample_index = i;
    s.tokens = generate_ids(model, ids, config, i);
    s.text = tok.decode(s.tokens);
    s.token_count = s.tokens.size();
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace indiclm::decode
