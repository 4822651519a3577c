#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "indiclm/lm/checkpoint.hpp"
#include "indiclm/lm/inference.hpp"
#include "indiclm/lm/model.hpp"

namespace indiclm::serve {

using lm::TokenId;

// A tensor kept in FP32 or stored as int8 with one scale per row.
struct QuantizedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  lm::Precision precision = lm::Precision::f32;
  std::vector<float> f32;
  std::vector<std::int8_t> q;
  std::vector<float> scale;

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const;
  float value(std::size_t i) const;
  std::vector<float> dequantize() const;
};

// Tensors in the canonical lm order. Projection matrices (and an untied
// head) are int8; the token embedding and norm gains stay FP32.
struct QuantizedParameters {
  lm::ModelConfig config;
  std::vector<QuantizedTensor> tensors;

  const QuantizedTensor* find(std::string_view name) const;
  lm::Parameters dequantize() const;
};

bool quantized_by_default(std::string_view name);

// Symmetric per-row: scale = max|row| / 127, q = nearbyint(x / scale).
// An all-zero row gets scale 0 and payload 0.
QuantizedTensor quantize_rows(const lm::Tensor& t);
QuantizedParameters quantize_int8(const lm::Parameters& params);

lm::DecoderWeights view_of(const QuantizedParameters& q);

class QuantizedPredictor final : public lm::TokenPredictor {
 public:
  explicit QuantizedPredictor(QuantizedParameters params);
  const lm::ModelConfig& config() const override { return params_->config; }
  std::string precision() const override { return "int8"; }
  std::unique_ptr<lm::DecodeSession> start() const override;
  const QuantizedParameters& parameters() const { return *params_; }

 private:
  std::shared_ptr<const QuantizedParameters> params_;
  lm::DecoderWeights weights_;
};

// Logits [T x V] for ids, causal, through the int8 projections.
std::vector<float> forward_quantized(const QuantizedParameters& q, std::span<const TokenId> ids);

lm::CheckpointFile to_checkpoint(const QuantizedParameters& q);
// Accepts FP32 and mixed checkpoints; FP32 tensors of quantizable names are
// left in FP32.
QuantizedParameters quantized_from_checkpoint(const lm::CheckpointFile& file);
void save_quantized(const std::filesystem::path& path, const QuantizedParameters& q);
QuantizedParameters load_quantized(const std::filesystem::path& path);

// Loads either checkpoint flavour: all-FP32 files give an Fp32Predictor,
// files with int8 tensors a QuantizedPredictor.
std::shared_ptr<const lm::TokenPredictor> load_predictor(const std::filesystem::path& path);

}  // namespace indiclm::serve
