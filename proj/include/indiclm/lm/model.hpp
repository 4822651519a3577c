#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace indiclm::lm {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t context_len = 1024;
  std::size_t ff_mult = 4;
  bool tied_head = true;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t ff_dim() const { return ff_mult * d_model; }

  // Throws ConfigError.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Closed form over the tensor inventory:
//   V*d                                   token embedding
//   + L * (d + 4*d*d + d + 2*d*F)         attn_norm, wq/wk/wv/wo, ffn_norm, w1, w2
//   + d                                   final_norm
//   + (tied ? 0 : V*d)                    output head
std::size_t count_params(const ModelConfig& config);

template <typename Real>
struct BasicTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<Real> data;

  std::size_t numel() const { return data.size(); }
  Real* ptr() { return data.data(); }
  const Real* ptr() const { return data.data(); }
};

// Per-layer tensor slots, in canonical order.
enum LayerSlot : std::size_t { kAttnNorm, kWq, kWk, kWv, kWo, kFfnNorm, kW1, kW2, kLayerSlots };

// Tensors in canonical order: tok_emb, then per layer the eight slots above
// ("layers.<i>.<slot>"), then final_norm, then head when untied. Gradients
// share this type and layout.
template <typename Real>
struct BasicParameters {
  ModelConfig config;
  std::vector<BasicTensor<Real>> tensors;

  BasicTensor<Real>& tok_emb() { return tensors[0]; }
  const BasicTensor<Real>& tok_emb() const { return tensors[0]; }
  BasicTensor<Real>& layer(std::size_t l, LayerSlot s) { return tensors[1 + l * kLayerSlots + s]; }
  const BasicTensor<Real>& layer(std::size_t l, LayerSlot s) const { return tensors[1 + l * kLayerSlots + s]; }
  BasicTensor<Real>& final_norm() { return tensors[1 + config.n_layers * kLayerSlots]; }
  const BasicTensor<Real>& final_norm() const { return tensors[1 + config.n_layers * kLayerSlots]; }
  // The output projection: tok_emb when tied.
  BasicTensor<Real>& head() { return config.tied_head ? tensors[0] : tensors.back(); }
  const BasicTensor<Real>& head() const { return config.tied_head ? tensors[0] : tensors.back(); }

  std::size_t numel() const;
  const BasicTensor<Real>* find(std::string_view name) const;
  BasicTensor<Real>* find(std::string_view name);
  void zero();
  // Name of the first tensor holding a NaN/Inf, or empty.
  std::string first_non_finite() const;
};

using Tensor = BasicTensor<float>;
using Parameters = BasicParameters<float>;

// Zero-filled tensors with the canonical names and shapes.
template <typename Real>
BasicParameters<Real> allocate_parameters(const ModelConfig& config);

const char* layer_slot_name(LayerSlot s);
// True for 2-D weight matrices (decayed by the optimizer, quantized by int8).
bool is_matrix_name(std::string_view name);

// Normal(0, init_std) weights; wo and w2 additionally scaled by
// 1/sqrt(2*n_layers); norm gains 1. Deterministic in config.seed.
Parameters init_model(const ModelConfig& config, float init_std = 0.02f);

template <typename To, typename From>
BasicParameters<To> cast_parameters(const BasicParameters<From>& p);

template <typename Real>
struct ForwardOutput {
  std::vector<Real> logits;  // [T x vocab]
  std::size_t seq_len = 0;
  std::size_t vocab = 0;
  Real loss = 0;  // weighted mean NLL; 0 when no targets were given
  double weight_sum = 0;

  std::span<const Real> row(std::size_t t) const { return {logits.data() + t * vocab, vocab}; }
};

// Loss = sum_t w_t * nll_t / sum_t w_t, with w_t = 1 when weights is empty.
// Throws std::invalid_argument on length/id errors.
template <typename Real>
ForwardOutput<Real> forward(const BasicParameters<Real>& params, std::span<const TokenId> ids,
                            std::span<const TokenId> targets = {}, std::span<const float> weights = {});

// Accumulates grad_scale * d(sum_t w_t * nll_t)/dparams into grads and
// returns sum_t w_t * nll_t. grads must come from allocate_parameters.
template <typename Real>
Real accumulate_gradients(const BasicParameters<Real>& params, std::span<const TokenId> ids,
                          std::span<const TokenId> targets, std::span<const float> weights,
                          BasicParameters<Real>& grads, Real grad_scale);

// Gradient of the (weighted mean) loss for one sequence.
template <typename Real>
BasicParameters<Real> backward(const BasicParameters<Real>& params, std::span<const TokenId> ids,
                               std::span<const TokenId> targets, std::span<const float> weights = {});

// Softmax cross-entropy over [T x V] logits. Returns sum_t w_t * nll_t; when
// dlogits is non-null it receives scale * d/dlogits of that sum.
template <typename Real>
Real cross_entropy(std::span<const Real> logits, std::size_t vocab, std::span<const TokenId> targets,
                   std::span<const float> weights, Real scale, Real* dlogits);

// exp(avg_loss); throws std::invalid_argument for negative or non-finite input.
double perplexity(double avg_loss);

}  // namespace indiclm::lm
