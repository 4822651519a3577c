#include "indiclm/lm/inference.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "indiclm/kernels/linalg.hpp"

namespace indiclm::lm {
namespace {

constexpr float kNormEps = 1e-5f;
constexpr double kRopeBase = 10000.0;
constexpr float kGeluC = 0.7978845608028654f;
constexpr float kGeluA = 0.044715f;

void rmsnorm(const float* x, const float* g, float* y, std::size_t d) {
  float ss = 0;
  for (std::size_t k = 0; k < d; ++k) ss += x[k] * x[k];
  const float r = 1.0f / std::sqrt(ss / static_cast<float>(d) + kNormEps);
  for (std::size_t k = 0; k < d; ++k) y[k] = x[k] * r * g[k];
}

class KvSession final : public DecodeSession {
 public:
  KvSession(std::shared_ptr<const void> owner, const DecoderWeights& w) : owner_(std::move(owner)), w_(w) {
    const auto& c = w_.config;
    const std::size_t d = c.d_model;
    keys_.resize(c.n_layers);
    values_.resize(c.n_layers);
    x_.resize(d);
    h_.resize(d);
    q_.resize(d);
    att_.resize(d);
    tmp_.resize(d);
    u_.resize(c.ff_dim());
    scores_.resize(c.context_len);
    logits_.resize(c.vocab_size);
    const std::size_t half = c.head_dim() / 2;
    theta_.resize(half);
    for (std::size_t i = 0; i < half; ++i)
      theta_[i] = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(c.head_dim()));
  }

  std::size_t position() const override { return pos_; }

  std::span<const float> step(TokenId id) override {
    const auto& c = w_.config;
    if (pos_ >= c.context_len)
      throw std::length_error(fmt::format("context length {} exhausted", c.context_len));
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size)
      throw std::invalid_argument(fmt::format("token id {} outside vocabulary of {}", id, c.vocab_size));
    const std::size_t d = c.d_model, hd = c.head_dim(), F = c.ff_dim();
    std::copy_n(w_.tok_emb + static_cast<std::size_t>(id) * d, d, x_.data());

    const std::size_t half = hd / 2;
    std::vector<float> cs(half), sn(half);
    for (std::size_t i = 0; i < half; ++i) {
      const double a = static_cast<double>(pos_) * theta_[i];
      cs[i] = static_cast<float>(std::cos(a));
      sn[i] = static_cast<float>(std::sin(a));
    }
    auto rope = [&](float* v) {
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        float* p = v + h * hd;
        for (std::size_t i = 0; i < half; ++i) {
          const float a = p[2 * i], b = p[2 * i + 1];
          p[2 * i] = a * cs[i] - b * sn[i];
          p[2 * i + 1] = a * sn[i] + b * cs[i];
        }
      }
    };

    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const LayerView& L = w_.layers[l];
      auto& K = keys_[l];
      auto& V = values_[l];
      K.resize((pos_ + 1) * d);
      V.resize((pos_ + 1) * d);
      rmsnorm(x_.data(), L.attn_norm, h_.data(), d);
      L.wq.apply(h_.data(), q_.data());
      L.wk.apply(h_.data(), K.data() + pos_ * d);
      L.wv.apply(h_.data(), V.data() + pos_ * d);
      rope(q_.data());
      rope(K.data() + pos_ * d);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const float* qh = q_.data() + h * hd;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j <= pos_; ++j) {
          const float* kj = K.data() + j * d + h * hd;
          float s = 0;
          for (std::size_t e = 0; e < hd; ++e) s += qh[e] * kj[e];
          scores_[j] = s * scale;
          mx = std::max(mx, scores_[j]);
        }
        float sum = 0;
        for (std::size_t j = 0; j <= pos_; ++j) {
          scores_[j] = std::exp(scores_[j] - mx);
          sum += scores_[j];
        }
        float* oh = att_.data() + h * hd;
        std::fill(oh, oh + hd, 0.0f);
        for (std::size_t j = 0; j <= pos_; ++j) {
          const float p = scores_[j] / sum;
          const float* vj = V.data() + j * d + h * hd;
          for (std::size_t e = 0; e < hd; ++e) oh[e] += p * vj[e];
        }
      }
      L.wo.apply(att_.data(), tmp_.data());
      for (std::size_t k = 0; k < d; ++k) x_[k] += tmp_[k];
      rmsnorm(x_.data(), L.ffn_norm, h_.data(), d);
      L.w1.apply(h_.data(), u_.data());
      for (std::size_t k = 0; k < F; ++k) {
        const float uk = u_[k];
        u_[k] = 0.5f * uk * (1.0f + std::tanh(kGeluC * (uk + kGeluA * uk * uk * uk)));
      }
      L.w2.apply(u_.data(), tmp_.data());
      for (std::size_t k = 0; k < d; ++k) x_[k] += tmp_[k];
    }
    rmsnorm(x_.data(), w_.final_norm, h_.data(), d);
    w_.head.apply(h_.data(), logits_.data());
    ++pos_;
    return logits_;
  }

 private:
  std::shared_ptr<const void> owner_;
  DecoderWeights w_;
  std::size_t pos_ = 0;
  std::vector<std::vector<float>> keys_, values_;
  std::vector<float> x_, h_, q_, att_, tmp_, u_, scores_, logits_;
  std::vector<double> theta_;
};

LinearView fp32_view(const Tensor& t) { return {t.ptr(), nullptr, nullptr, t.shape[0], t.shape[1]}; }

}  // namespace

void LinearView::apply(const float* x, float* y) const {
  if (q)
    kernels::par::matmul_wt_q8(x, q, scale, y, 1, in, out);
  else
    kernels::par::matmul_wt(x, w, y, 1, in, out);
}

DecoderWeights view_of(const Parameters& p) {
  DecoderWeights w;
  w.config = p.config;
  w.tok_emb = p.tok_emb().ptr();
  for (std::size_t l = 0; l < p.config.n_layers; ++l) {
    LayerView L;
    L.attn_norm = p.layer(l, kAttnNorm).ptr();
    L.wq = fp32_view(p.layer(l, kWq));
    L.wk = fp32_view(p.layer(l, kWk));
    L.wv = fp32_view(p.layer(l, kWv));
    L.wo = fp32_view(p.layer(l, kWo));
    L.ffn_norm = p.layer(l, kFfnNorm).ptr();
    L.w1 = fp32_view(p.layer(l, kW1));
    L.w2 = fp32_view(p.layer(l, kW2));
    w.layers.push_back(L);
  }
  w.final_norm = p.final_norm().ptr();
  w.head = fp32_view(p.head());
  return w;
}

std::unique_ptr<DecodeSession> make_session(std::shared_ptr<const void> owner, const DecoderWeights& weights) {
  return std::make_unique<KvSession>(std::move(owner), weights);
}

Fp32Predictor::Fp32Predictor(Parameters params) : params_(std::make_shared<const Parameters>(std::move(params))) {
  params_->config.validate();
  weights_ = view_of(*params_);
}

std::unique_ptr<DecodeSession> Fp32Predictor::start() const { return make_session(params_, weights_); }

std::vector<float> incremental_logits(const TokenPredictor& model, std::span<const TokenId> ids) {
  auto session = model.start();
  std::vector<float> out;
  out.reserve(ids.size() * model.config().vocab_size);
  for (TokenId id : ids) {
    const auto row = session->step(id);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

}  // namespace indiclm::lm
