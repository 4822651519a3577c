#include "indiclm/serve/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"

namespace indiclm::serve {
namespace {

lm::LinearView linear_view(const QuantizedTensor& t) {
  if (t.precision == lm::Precision::i8) return {nullptr, t.q.data(), t.scale.data(), t.shape[0], t.shape[1]};
  return {t.f32.data(), nullptr, nullptr, t.shape[0], t.shape[1]};
}

const QuantizedTensor& fp32_only(const QuantizedTensor& t) {
  if (t.precision != lm::Precision::f32) throw FormatError(fmt::format("tensor {} must be FP32", t.name));
  return t;
}

}  // namespace

std::size_t QuantizedTensor::cols() const {
  std::size_t n = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) n *= shape[i];
  return n;
}

float QuantizedTensor::value(std::size_t i) const {
  if (precision == lm::Precision::f32) return f32[i];
  return static_cast<float>(q[i]) * scale[i / cols()];
}

std::vector<float> QuantizedTensor::dequantize() const {
  if (precision == lm::Precision::f32) return f32;
  std::vector<float> out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = value(i);
  return out;
}

const QuantizedTensor* QuantizedParameters::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

lm::Parameters QuantizedParameters::dequantize() const {
  auto p = lm::allocate_parameters<float>(config);
  for (auto& t : p.tensors) {
    const auto* src = find(t.name);
    if (!src) throw FormatError("missing tensor " + t.name);
    t.data = src->dequantize();
  }
  return p;
}

bool quantized_by_default(std::string_view name) { return lm::is_matrix_name(name) && name != "tok_emb"; }

QuantizedTensor quantize_rows(const lm::Tensor& t) {
  QuantizedTensor out;
  out.name = t.name;
  out.shape = t.shape;
  out.precision = lm::Precision::i8;
  const std::size_t rows = out.rows(), cols = out.cols();
  out.q.resize(t.numel());
  out.scale.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = t.ptr() + r * cols;
    float maxabs = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!std::isfinite(x[c])) throw std::invalid_argument(fmt::format("non-finite value in {}", t.name));
      maxabs = std::max(maxabs, std::fabs(x[c]));
    }
    const float scale = maxabs / 127.0f;
    out.scale[r] = scale;
    if (scale == 0.0f) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const float v = std::nearbyint(x[c] / scale);
      out.q[r * cols + c] = static_cast<std::int8_t>(std::clamp(v, -127.0f, 127.0f));
    }
  }
  return out;
}

QuantizedParameters quantize_int8(const lm::Parameters& params) {
  QuantizedParameters out;
  out.config = params.config;
  for (const auto& t : params.tensors) {
    if (quantized_by_default(t.name)) {
      out.tensors.push_back(quantize_rows(t));
    } else {
      QuantizedTensor f;
      f.name = t.name;
      f.shape = t.shape;
      f.f32 = t.data;
      for (float v : f.f32)
        if (!std::isfinite(v)) throw std::invalid_argument(fmt::format("non-finite value in {}", t.name));
      out.tensors.push_back(std::move(f));
    }
  }
  return out;
}

lm::DecoderWeights view_of(const QuantizedParameters& q) {
  const auto& c = q.config;
  auto get = [&](const std::string& name) -> const QuantizedTensor& {
    const auto* t = q.find(name);
    if (!t) throw FormatError("missing tensor " + name);
    return *t;
  };
  lm::DecoderWeights w;
  w.config = c;
  w.tok_emb = fp32_only(get("tok_emb")).f32.data();
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto name = [&](lm::LayerSlot s) { return fmt::format("layers.{}.{}", l, lm::layer_slot_name(s)); };
    lm::LayerView L;
    L.attn_norm = fp32_only(get(name(lm::kAttnNorm))).f32.data();
    L.wq = linear_view(get(name(lm::kWq)));
    L.wk = linear_view(get(name(lm::kWk)));
    L.wv = linear_view(get(name(lm::kWv)));
    L.wo = linear_view(get(name(lm::kWo)));
    L.ffn_norm = fp32_only(get(name(lm::kFfnNorm))).f32.data();
    L.w1 = linear_view(get(name(lm::kW1)));
    L.w2 = linear_view(get(name(lm::kW2)));
    w.layers.push_back(L);
  }
  w.final_norm = fp32_only(get("final_norm")).f32.data();
  w.head = linear_view(get(c.tied_head ? "tok_emb" : "head"));
  return w;
}

QuantizedPredictor::QuantizedPredictor(QuantizedParameters params)
    : params_(std::make_shared<const QuantizedParameters>(std::move(params))) {
  params_->config.validate();
  weights_ = view_of(*params_);
}

std::unique_ptr<lm::DecodeSession> QuantizedPredictor::start() const { return lm::make_session(params_, weights_); }

std::vector<float> forward_quantized(const QuantizedParameters& q, std::span<const TokenId> ids) {
  if (ids.size() > q.config.context_len)
    throw std::invalid_argument(fmt::format("sequence length {} exceeds context {}", ids.size(), q.config.context_len));
  const auto w = view_of(q);
  auto session = lm::make_session(nullptr, w);
  std::vector<float> out;
  out.reserve(ids.size() * q.config.vocab_size);
  for (TokenId id : ids) {
    const auto row = session->step(id);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

lm::CheckpointFile to_checkpoint(const QuantizedParameters& q) {
  lm::CheckpointFile f;
  f.meta["config"] = q.config.to_json();
  for (const auto& t : q.tensors) {
    lm::TensorRecord r;
    r.name = t.name;
    r.dims.assign(t.shape.begin(), t.shape.end());
    r.precision = t.precision;
    r.f32 = t.f32;
    r.i8 = t.q;
    r.scales = t.scale;
    f.tensors.push_back(std::move(r));
  }
  return f;
}

QuantizedParameters quantized_from_checkpoint(const lm::CheckpointFile& file) {
  QuantizedParameters q;
  try {
    q.config = lm::ModelConfig::from_json(file.meta.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("checkpoint config: {}", e.what()));
  }
  q.config.validate();
  const auto expected = lm::allocate_parameters<float>(q.config);
  for (const auto& want : expected.tensors) {
    const auto* r = file.find(want.name);
    if (!r) throw FormatError("checkpoint is missing tensor " + want.name);
    if (!std::equal(r->dims.begin(), r->dims.end(), want.shape.begin(), want.shape.end()))
      throw FormatError("checkpoint tensor " + want.name + " has the wrong shape");
    QuantizedTensor t;
    t.name = want.name;
    t.shape = want.shape;
    t.precision = r->precision;
    t.f32 = r->f32;
    t.q = r->i8;
    t.scale = r->scales;
    if (t.precision == lm::Precision::i8 && !quantized_by_default(t.name))
      throw FormatError("tensor " + t.name + " cannot be int8");
    q.tensors.push_back(std::move(t));
  }
  return q;
}

void save_quantized(const std::filesystem::path& path, const QuantizedParameters& q) {
  lm::write_checkpoint_file(path, to_checkpoint(q));
}

QuantizedParameters load_quantized(const std::filesystem::path& path) {
  return quantized_from_checkpoint(lm::read_checkpoint_file(path));
}

std::shared_ptr<const lm::TokenPredictor> load_predictor(const std::filesystem::path& path) {
  const auto file = lm::read_checkpoint_file(path);
  const bool any_i8 = std::any_of(file.tensors.begin(), file.tensors.end(),
                                  [](const auto& t) { return t.precision == lm::Precision::i8; });
  if (any_i8) return std::make_shared<QuantizedPredictor>(quantized_from_checkpoint(file));
  return std::make_shared<lm::Fp32Predictor>(lm::parameters_from_checkpoint(file));
}

}  // namespace indiclm::serve
