#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "indiclm/lm/model.hpp"

namespace indiclm::lm {

// A projection y = W x with W [out x in], either FP32 or int8 with one FP32
// scale per output row.
struct LinearView {
  const float* w = nullptr;
  const std::int8_t* q = nullptr;
  const float* scale = nullptr;
  std::size_t out = 0;
  std::size_t in = 0;

  void apply(const float* x, float* y) const;
};

struct LayerView {
  const float* attn_norm = nullptr;
  LinearView wq, wk, wv, wo;
  const float* ffn_norm = nullptr;
  LinearView w1, w2;
};

// Non-owning view of everything a decoder step reads.
struct DecoderWeights {
  ModelConfig config;
  const float* tok_emb = nullptr;
  std::vector<LayerView> layers;
  const float* final_norm = nullptr;
  LinearView head;
};

DecoderWeights view_of(const Parameters& params);

// Incremental decoding with a key/value cache. Each session owns its cache;
// the weights it reads are shared and must stay alive.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  // Feeds one token at the next position and returns the logits predicting
  // the token after it. The span is valid until the next call. Throws
  // std::length_error past the context length.
  virtual std::span<const float> step(TokenId id) = 0;
  virtual std::size_t position() const = 0;
};

// A loaded model that can start decode sessions. Implementations are
// immutable after construction, so sessions may run concurrently.
class TokenPredictor {
 public:
  virtual ~TokenPredictor() = default;
  virtual const ModelConfig& config() const = 0;
  virtual std::string precision() const = 0;
  virtual std::unique_ptr<DecodeSession> start() const = 0;
};

// Session over `weights`; `owner` keeps the underlying storage alive.
std::unique_ptr<DecodeSession> make_session(std::shared_ptr<const void> owner, const DecoderWeights& weights);

class Fp32Predictor final : public TokenPredictor {
 public:
  explicit Fp32Predictor(Parameters params);
  const ModelConfig& config() const override { return params_->config; }
  std::string precision() const override { return "fp32"; }
  std::unique_ptr<DecodeSession> start() const override;
  const Parameters& parameters() const { return *params_; }

 private:
  std::shared_ptr<const Parameters> params_;
  DecoderWeights weights_;
};

// Logits for every position of ids, computed step by step through a session.
std::vector<float> incremental_logits(const TokenPredictor& model, std::span<const TokenId> ids);

}  // namespace indiclm::lm
