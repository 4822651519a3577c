#include "indiclm/lm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"
#include "indiclm/common/rng.hpp"
#include "indiclm/kernels/linalg.hpp"

namespace indiclm::lm {
namespace {

constexpr double kNormEps = 1e-5;
constexpr double kRopeBase = 10000.0;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

constexpr const char* kSlotNames[kLayerSlots] = {"attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2"};

template <typename Real>
void rmsnorm_forward(const Real* x, const Real* g, Real* y, Real* rinv, std::size_t rows, std::size_t d) {
  for (std::size_t t = 0; t < rows; ++t) {
    const Real* xt = x + t * d;
    Real ss = 0;
    for (std::size_t k = 0; k < d; ++k) ss += xt[k] * xt[k];
    const Real r = Real(1) / std::sqrt(ss / static_cast<Real>(d) + static_cast<Real>(kNormEps));
    rinv[t] = r;
    for (std::size_t k = 0; k < d; ++k) y[t * d + k] = xt[k] * r * g[k];
  }
}

// dx += d/dx, dg += d/dg for y = g * x * rinv(x).
template <typename Real>
void rmsnorm_backward(const Real* x, const Real* g, const Real* rinv, const Real* dy, Real* dx, Real* dg,
                      std::size_t rows, std::size_t d) {
  for (std::size_t t = 0; t < rows; ++t) {
    const Real* xt = x + t * d;
    const Real* dyt = dy + t * d;
    const Real r = rinv[t];
    Real dot = 0;
    for (std::size_t k = 0; k < d; ++k) dot += dyt[k] * g[k] * xt[k];
    const Real c = r * r * r * dot / static_cast<Real>(d);
    for (std::size_t k = 0; k < d; ++k) {
      dg[k] += dyt[k] * xt[k] * r;
      dx[t * d + k] += r * g[k] * dyt[k] - xt[k] * c;
    }
  }
}

template <typename Real>
struct RopeTable {
  std::vector<Real> cos, sin;  // [T x half]
  std::size_t half = 0;

  RopeTable(std::size_t rows, std::size_t head_dim) : half(head_dim / 2) {
    cos.resize(rows * half);
    sin.resize(rows * half);
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t i = 0; i < half; ++i) {
        const double theta = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double a = static_cast<double>(t) * theta;
        cos[t * half + i] = static_cast<Real>(std::cos(a));
        sin[t * half + i] = static_cast<Real>(std::sin(a));
      }
  }
};

// Rotates consecutive pairs within each head; with inverse=true applies the
// transpose, which is the backward pass of the rotation.
template <typename Real>
void apply_rope(Real* v, std::size_t rows, std::size_t n_heads, std::size_t head_dim, const RopeTable<Real>& rope,
                std::size_t pos0, bool inverse) {
  const std::size_t d = n_heads * head_dim;
  for (std::size_t t = 0; t < rows; ++t) {
    const Real* c = rope.cos.data() + (pos0 + t) * rope.half;
    const Real* s = rope.sin.data() + (pos0 + t) * rope.half;
    for (std::size_t h = 0; h < n_heads; ++h) {
      Real* p = v + t * d + h * head_dim;
      for (std::size_t i = 0; i < rope.half; ++i) {
        const Real a = p[2 * i], b = p[2 * i + 1];
        const Real sn = inverse ? -s[i] : s[i];
        p[2 * i] = a * c[i] - b * sn;
        p[2 * i + 1] = a * sn + b * c[i];
      }
    }
  }
}

template <typename Real>
Real gelu(Real u) {
  const Real th = std::tanh(static_cast<Real>(kGeluC) * (u + static_cast<Real>(kGeluA) * u * u * u));
  return Real(0.5) * u * (Real(1) + th);
}

template <typename Real>
Real gelu_grad(Real u) {
  const Real c = static_cast<Real>(kGeluC), a = static_cast<Real>(kGeluA);
  const Real th = std::tanh(c * (u + a * u * u * u));
  return Real(0.5) * (Real(1) + th) + Real(0.5) * u * (Real(1) - th * th) * c * (Real(1) + Real(3) * a * u * u);
}

template <typename Real>
struct LayerCache {
  std::vector<Real> x_in, r1, h1, q, k, v, p, att, x_mid, r2, h2, u, ga;
};

template <typename Real>
struct Activations {
  std::vector<LayerCache<Real>> layers;
  std::vector<Real> x_final, rf, hf;
};

void check_inputs(const ModelConfig& c, std::span<const TokenId> ids, std::span<const TokenId> targets,
                  std::span<const float> weights) {
  if (ids.size() > c.context_len)
    throw std::invalid_argument(fmt::format("sequence length {} exceeds context {}", ids.size(), c.context_len));
  for (TokenId id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size)
      throw std::invalid_argument(fmt::format("token id {} outside vocabulary of {}", id, c.vocab_size));
  if (!targets.empty() && targets.size() != ids.size())
    throw std::invalid_argument(fmt::format("{} targets for {} inputs", targets.size(), ids.size()));
  for (TokenId id : targets)
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size)
      throw std::invalid_argument(fmt::format("target id {} outside vocabulary of {}", id, c.vocab_size));
  if (!weights.empty() && weights.size() != ids.size())
    throw std::invalid_argument(fmt::format("{} loss weights for {} inputs", weights.size(), ids.size()));
}

template <typename Real>
void attention_forward(const ModelConfig& c, const Real* q, const Real* k, const Real* v, Real* p, Real* out,
                       std::size_t rows) {
  const std::size_t d = c.d_model, hd = c.head_dim();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
  const std::ptrdiff_t heads = static_cast<std::ptrdiff_t>(c.n_heads);
#pragma omp parallel for schedule(static) if (rows * rows * d > 65536)
  for (std::ptrdiff_t hh = 0; hh < heads; ++hh) {
    const std::size_t h = static_cast<std::size_t>(hh);
    for (std::size_t i = 0; i < rows; ++i) {
      Real* pi = p + (h * rows + i) * rows;
      const Real* qi = q + i * d + h * hd;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const Real* kj = k + j * d + h * hd;
        Real s = 0;
        for (std::size_t e = 0; e < hd; ++e) s += qi[e] * kj[e];
        pi[j] = s * scale;
        mx = std::max(mx, pi[j]);
      }
      Real sum = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        sum += pi[j];
      }
      Real* oi = out + i * d + h * hd;
      std::fill(oi, oi + hd, Real(0));
      for (std::size_t j = 0; j <= i; ++j) {
        pi[j] /= sum;
        const Real* vj = v + j * d + h * hd;
        for (std::size_t e = 0; e < hd; ++e) oi[e] += pi[j] * vj[e];
      }
      std::fill(pi + i + 1, pi + rows, Real(0));
    }
  }
}

template <typename Real>
void attention_backward(const ModelConfig& c, const Real* q, const Real* k, const Real* v, const Real* p,
                        const Real* dout, Real* dq, Real* dk, Real* dv, std::size_t rows) {
  const std::size_t d = c.d_model, hd = c.head_dim();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
  const std::ptrdiff_t heads = static_cast<std::ptrdiff_t>(c.n_heads);
#pragma omp parallel for schedule(static) if (rows * rows * d > 65536)
  for (std::ptrdiff_t hh = 0; hh < heads; ++hh) {
    const std::size_t h = static_cast<std::size_t>(hh);
    std::vector<Real> dp(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      const Real* pi = p + (h * rows + i) * rows;
      const Real* doi = dout + i * d + h * hd;
      Real dot = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        const Real* vj = v + j * d + h * hd;
        Real* dvj = dv + j * d + h * hd;
        Real s = 0;
        for (std::size_t e = 0; e < hd; ++e) {
          s += doi[e] * vj[e];
          dvj[e] += pi[j] * doi[e];
        }
        dp[j] = s;
        dot += pi[j] * s;
      }
      const Real* qi = q + i * d + h * hd;
      Real* dqi = dq + i * d + h * hd;
      for (std::size_t j = 0; j <= i; ++j) {
        const Real ds = pi[j] * (dp[j] - dot) * scale;
        const Real* kj = k + j * d + h * hd;
        Real* dkj = dk + j * d + h * hd;
        for (std::size_t e = 0; e < hd; ++e) {
          dqi[e] += ds * kj[e];
          dkj[e] += ds * qi[e];
        }
      }
    }
  }
}

template <typename Real>
void run_forward(const BasicParameters<Real>& P, std::span<const TokenId> ids, Activations<Real>& A,
                 std::vector<Real>& logits) {
  const ModelConfig& c = P.config;
  const std::size_t T = ids.size(), d = c.d_model, F = c.ff_dim(), V = c.vocab_size;
  const RopeTable<Real> rope(T, c.head_dim());
  std::vector<Real> x(T * d), tmp(T * d);
  for (std::size_t t = 0; t < T; ++t)
    std::copy_n(P.tok_emb().ptr() + static_cast<std::size_t>(ids[t]) * d, d, x.data() + t * d);

  A.layers.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerCache<Real>& L = A.layers[l];
    L.x_in = x;
    L.r1.resize(T);
    L.h1.resize(T * d);
    rmsnorm_forward(x.data(), P.layer(l, kAttnNorm).ptr(), L.h1.data(), L.r1.data(), T, d);
    L.q.resize(T * d);
    L.k.resize(T * d);
    L.v.resize(T * d);
    kernels::par::matmul_wt(L.h1.data(), P.layer(l, kWq).ptr(), L.q.data(), T, d, d);
    kernels::par::matmul_wt(L.h1.data(), P.layer(l, kWk).ptr(), L.k.data(), T, d, d);
    kernels::par::matmul_wt(L.h1.data(), P.layer(l, kWv).ptr(), L.v.data(), T, d, d);
    apply_rope(L.q.data(), T, c.n_heads, c.head_dim(), rope, 0, false);
    apply_rope(L.k.data(), T, c.n_heads, c.head_dim(), rope, 0, false);
    L.p.assign(c.n_heads * T * T, Real(0));
    L.att.resize(T * d);
    attention_forward(c, L.q.data(), L.k.data(), L.v.data(), L.p.data(), L.att.data(), T);
    kernels::par::matmul_wt(L.att.data(), P.layer(l, kWo).ptr(), tmp.data(), T, d, d);
    for (std::size_t i = 0; i < T * d; ++i) x[i] += tmp[i];

    L.x_mid = x;
    L.r2.resize(T);
    L.h2.resize(T * d);
    rmsnorm_forward(x.data(), P.layer(l, kFfnNorm).ptr(), L.h2.data(), L.r2.data(), T, d);
    L.u.resize(T * F);
    L.ga.resize(T * F);
    kernels::par::matmul_wt(L.h2.data(), P.layer(l, kW1).ptr(), L.u.data(), T, d, F);
    for (std::size_t i = 0; i < T * F; ++i) L.ga[i] = gelu(L.u[i]);
    kernels::par::matmul_wt(L.ga.data(), P.layer(l, kW2).ptr(), tmp.data(), T, F, d);
    for (std::size_t i = 0; i < T * d; ++i) x[i] += tmp[i];
  }
  A.x_final = x;
  A.rf.resize(T);
  A.hf.resize(T * d);
  rmsnorm_forward(x.data(), P.final_norm().ptr(), A.hf.data(), A.rf.data(), T, d);
  logits.resize(T * V);
  kernels::par::matmul_wt(A.hf.data(), P.head().ptr(), logits.data(), T, d, V);
}

template <typename Real>
void run_backward(const BasicParameters<Real>& P, std::span<const TokenId> ids, const Activations<Real>& A,
                  const std::vector<Real>& dlogits, BasicParameters<Real>& G) {
  const ModelConfig& c = P.config;
  const std::size_t T = ids.size(), d = c.d_model, F = c.ff_dim(), V = c.vocab_size;
  const RopeTable<Real> rope(T, c.head_dim());
  using kernels::par::matmul_dw;
  using kernels::par::matmul_dx;

  std::vector<Real> dh(T * d, Real(0)), dx(T * d, Real(0));
  matmul_dx(dlogits.data(), P.head().ptr(), dh.data(), T, d, V);
  matmul_dw(dlogits.data(), A.hf.data(), G.head().ptr(), T, d, V);
  rmsnorm_backward(A.x_final.data(), P.final_norm().ptr(), A.rf.data(), dh.data(), dx.data(), G.final_norm().ptr(),
                   T, d);

  std::vector<Real> dga(T * F), dq(T * d), dk(T * d), dv(T * d);
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const LayerCache<Real>& L = A.layers[li];
    // feed-forward residual branch
    std::fill(dga.begin(), dga.end(), Real(0));
    matmul_dx(dx.data(), P.layer(li, kW2).ptr(), dga.data(), T, F, d);
    matmul_dw(dx.data(), L.ga.data(), G.layer(li, kW2).ptr(), T, F, d);
    for (std::size_t i = 0; i < T * F; ++i) dga[i] *= gelu_grad(L.u[i]);
    std::fill(dh.begin(), dh.end(), Real(0));
    matmul_dx(dga.data(), P.layer(li, kW1).ptr(), dh.data(), T, d, F);
    matmul_dw(dga.data(), L.h2.data(), G.layer(li, kW1).ptr(), T, d, F);
    rmsnorm_backward(L.x_mid.data(), P.layer(li, kFfnNorm).ptr(), L.r2.data(), dh.data(), dx.data(),
                     G.layer(li, kFfnNorm).ptr(), T, d);

    // attention residual branch
    std::fill(dh.begin(), dh.end(), Real(0));
    matmul_dx(dx.data(), P.layer(li, kWo).ptr(), dh.data(), T, d, d);
    matmul_dw(dx.data(), L.att.data(), G.layer(li, kWo).ptr(), T, d, d);
    std::fill(dq.begin(), dq.end(), Real(0));
    std::fill(dk.begin(), dk.end(), Real(0));
    std::fill(dv.begin(), dv.end(), Real(0));
    attention_backward(c, L.q.data(), L.k.data(), L.v.data(), L.p.data(), dh.data(), dq.data(), dk.data(),
                       dv.data(), T);
    apply_rope(dq.data(), T, c.n_heads, c.head_dim(), rope, 0, true);
    apply_rope(dk.data(), T, c.n_heads, c.head_dim(), rope, 0, true);
    std::fill(dh.begin(), dh.end(), Real(0));
    matmul_dx(dq.data(), P.layer(li, kWq).ptr(), dh.data(), T, d, d);
    matmul_dx(dk.data(), P.layer(li, kWk).ptr(), dh.data(), T, d, d);
    matmul_dx(dv.data(), P.layer(li, kWv).ptr(), dh.data(), T, d, d);
    matmul_dw(dq.data(), L.h1.data(), G.layer(li, kWq).ptr(), T, d, d);
    matmul_dw(dk.data(), L.h1.data(), G.layer(li, kWk).ptr(), T, d, d);
    matmul_dw(dv.data(), L.h1.data(), G.layer(li, kWv).ptr(), T, d, d);
    rmsnorm_backward(L.x_in.data(), P.layer(li, kAttnNorm).ptr(), L.r1.data(), dh.data(), dx.data(),
                     G.layer(li, kAttnNorm).ptr(), T, d);
  }
  Real* demb = G.tok_emb().ptr();
  for (std::size_t t = 0; t < T; ++t) {
    Real* row = demb + static_cast<std::size_t>(ids[t]) * d;
    for (std::size_t k = 0; k < d; ++k) row[k] += dx[t * d + k];
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || context_len == 0 || ff_mult == 0)
    throw ConfigError("model dimensions must all be positive");
  if (d_model % n_heads != 0)
    throw ConfigError(fmt::format("d_model {} is not divisible by n_heads {}", d_model, n_heads));
  if (vocab_size > static_cast<std::size_t>(std::numeric_limits<TokenId>::max()))
    throw ConfigError("vocab_size too large");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_model", d_model},         {"n_layers", n_layers},
          {"n_heads", n_heads},       {"context_len", context_len}, {"ff_mult", ff_mult},
          {"tied_head", tied_head},   {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", std::size_t{0});
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.context_len = j.value("context_len", std::size_t{1024});
    c.ff_mult = j.value("ff_mult", std::size_t{4});
    c.tied_head = j.value("tied_head", true);
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("bad model config: {}", e.what()));
  }
  return c;
}

std::size_t count_params(const ModelConfig& c) {
  const std::size_t V = c.vocab_size, d = c.d_model, F = c.ff_dim();
  return V * d + c.n_layers * (d + 4 * d * d + d + 2 * d * F) + d + (c.tied_head ? 0 : V * d);
}

const char* layer_slot_name(LayerSlot s) { return kSlotNames[s]; }

bool is_matrix_name(std::string_view name) {
  return name == "tok_emb" || name == "head" || name.ends_with(".wq") || name.ends_with(".wk") ||
         name.ends_with(".wv") || name.ends_with(".wo") || name.ends_with(".w1") || name.ends_with(".w2");
}

template <typename Real>
std::size_t BasicParameters<Real>::numel() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

template <typename Real>
const BasicTensor<Real>* BasicParameters<Real>::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

template <typename Real>
BasicTensor<Real>* BasicParameters<Real>::find(std::string_view name) {
  for (auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

template <typename Real>
void BasicParameters<Real>::zero() {
  for (auto& t : tensors) std::fill(t.data.begin(), t.data.end(), Real(0));
}

template <typename Real>
std::string BasicParameters<Real>::first_non_finite() const {
  for (const auto& t : tensors)
    for (Real v : t.data)
      if (!std::isfinite(v)) return t.name;
  return {};
}

template <typename Real>
BasicParameters<Real> allocate_parameters(const ModelConfig& c) {
  c.validate();
  const std::size_t V = c.vocab_size, d = c.d_model, F = c.ff_dim();
  BasicParameters<Real> p;
  p.config = c;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    p.tensors.push_back({std::move(name), std::move(shape), std::vector<Real>(n, Real(0))});
  };
  add("tok_emb", {V, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string prefix = fmt::format("layers.{}.", l);
    add(prefix + "attn_norm", {d});
    add(prefix + "wq", {d, d});
    add(prefix + "wk", {d, d});
    add(prefix + "wv", {d, d});
    add(prefix + "wo", {d, d});
    add(prefix + "ffn_norm", {d});
    add(prefix + "w1", {F, d});
    add(prefix + "w2", {d, F});
  }
  add("final_norm", {d});
  if (!c.tied_head) add("head", {V, d});
  return p;
}

Parameters init_model(const ModelConfig& config, float init_std) {
  Parameters p = allocate_parameters<float>(config);
  Rng rng(config.seed);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  for (auto& t : p.tensors) {
    if (t.shape.size() == 1) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
      continue;
    }
    double std = init_std;
    if (t.name.ends_with(".wo") || t.name.ends_with(".w2")) std *= residual_scale;
    for (float& v : t.data) v = static_cast<float>(rng.normal() * std);
  }
  return p;
}

template <typename To, typename From>
BasicParameters<To> cast_parameters(const BasicParameters<From>& p) {
  BasicParameters<To> out;
  out.config = p.config;
  for (const auto& t : p.tensors) out.tensors.push_back({t.name, t.shape, std::vector<To>(t.data.begin(), t.data.end())});
  return out;
}

template <typename Real>
Real cross_entropy(std::span<const Real> logits, std::size_t vocab, std::span<const TokenId> targets,
                   std::span<const float> weights, Real scale, Real* dlogits) {
  Real total = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Real w = weights.empty() ? Real(1) : static_cast<Real>(weights[t]);
    Real* drow = dlogits ? dlogits + t * vocab : nullptr;
    if (drow) std::fill(drow, drow + vocab, Real(0));
    if (w == Real(0)) continue;
    const Real* row = logits.data() + t * vocab;
    const Real mx = *std::max_element(row, row + vocab);
    Real sum = 0;
    for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(row[v] - mx);
    const Real lse = mx + std::log(sum);
    total += w * (lse - row[targets[t]]);
    if (drow) {
      for (std::size_t v = 0; v < vocab; ++v) drow[v] = scale * w * std::exp(row[v] - lse);
      drow[targets[t]] -= scale * w;
    }
  }
  return total;
}

template <typename Real>
ForwardOutput<Real> forward(const BasicParameters<Real>& params, std::span<const TokenId> ids,
                            std::span<const TokenId> targets, std::span<const float> weights) {
  check_inputs(params.config, ids, targets, weights);
  ForwardOutput<Real> out;
  out.seq_len = ids.size();
  out.vocab = params.config.vocab_size;
  if (ids.empty()) return out;
  Activations<Real> acts;
  run_forward(params, ids, acts, out.logits);
  if (!targets.empty()) {
    double wsum = 0;
    for (std::size_t t = 0; t < ids.size(); ++t) wsum += weights.empty() ? 1.0 : weights[t];
    out.weight_sum = wsum;
    const Real total = cross_entropy<Real>(out.logits, out.vocab, targets, weights, Real(0), nullptr);
    out.loss = wsum > 0 ? static_cast<Real>(total / wsum) : Real(0);
  }
  return out;
}

template <typename Real>
Real accumulate_gradients(const BasicParameters<Real>& params, std::span<const TokenId> ids,
                          std::span<const TokenId> targets, std::span<const float> weights,
                          BasicParameters<Real>& grads, Real grad_scale) {
  check_inputs(params.config, ids, targets, weights);
  if (targets.size() != ids.size()) throw std::invalid_argument("gradients need one target per input");
  if (ids.empty()) return Real(0);
  Activations<Real> acts;
  std::vector<Real> logits;
  run_forward(params, ids, acts, logits);
  std::vector<Real> dlogits(logits.size());
  const Real total =
      cross_entropy<Real>(logits, params.config.vocab_size, targets, weights, grad_scale, dlogits.data());
  run_backward(params, ids, acts, dlogits, grads);
  return total;
}

template <typename Real>
BasicParameters<Real> backward(const BasicParameters<Real>& params, std::span<const TokenId> ids,
                               std::span<const TokenId> targets, std::span<const float> weights) {
  auto grads = allocate_parameters<Real>(params.config);
  double wsum = 0;
  for (std::size_t t = 0; t < ids.size(); ++t) wsum += weights.empty() ? 1.0 : weights[t];
  if (wsum > 0) accumulate_gradients(params, ids, targets, weights, grads, static_cast<Real>(1.0 / wsum));
  return grads;
}

double perplexity(double avg_loss) {
  if (!std::isfinite(avg_loss) || avg_loss < 0)
    throw std::invalid_argument(fmt::format("perplexity needs a finite non-negative loss, got {}", avg_loss));
  return std::exp(avg_loss);
}

#define INDICLM_INSTANTIATE(Real)                                                                                 \
  template struct BasicParameters<Real>;                                                                          \
  template BasicParameters<Real> allocate_parameters<Real>(const ModelConfig&);                                   \
  template ForwardOutput<Real> forward<Real>(const BasicParameters<Real>&, std::span<const TokenId>,             \
                                             std::span<const TokenId>, std::span<const float>);                  \
  template Real accumulate_gradients<Real>(const BasicParameters<Real>&, std::span<const TokenId>,               \
                                           std::span<const TokenId>, std::span<const float>,                     \
                                           BasicParameters<Real>&, Real);                                        \
  template BasicParameters<Real> backward<Real>(const BasicParameters<Real>&, std::span<const TokenId>,          \
                                                std::span<const TokenId>, std::span<const float>);               \
  template Real cross_entropy<Real>(std::span<const Real>, std::size_t, std::span<const TokenId>,                \
                                    std::span<const float>, Real, Real*);

INDICLM_INSTANTIATE(float)
INDICLM_INSTANTIATE(double)
#undef INDICLM_INSTANTIATE

template BasicParameters<double> cast_parameters<double, float>(const BasicParameters<float>&);
template BasicParameters<float> cast_parameters<float, double>(const BasicParameters<double>&);
template BasicParameters<double> cast_parameters<double, double>(const BasicParameters<double>&);
template BasicParameters<float> cast_parameters<float, float>(const BasicParameters<float>&);

}  // namespace indiclm::lm
