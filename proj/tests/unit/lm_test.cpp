#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "indiclm/common/error.hpp"
#include "indiclm/common/rng.hpp"
#include "indiclm/lm/model.hpp"

using namespace indiclm;
using namespace indiclm::lm;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ff_mult = 4;
  c.context_len = 32;
  return c;
}

std::vector<TokenId> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> v(n);
  for (auto& x : v) x = static_cast<TokenId>(rng.uniform_index(vocab));
  return v;
}

// Per-tensor element counts written out by hand from the architecture.
std::size_t inventory_count(const ModelConfig& c) {
  const std::size_t V = c.vocab_size, d = c.d_model, F = c.ff_mult * d;
  std::size_t n = V * d;                 // tok_emb
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    n += d;                              // attn_norm
    n += 4 * d * d;                      // wq wk wv wo
    n += d;                              // ffn_norm
    n += F * d + d * F;                  // w1 w2
  }
  n += d;                                // final_norm
  if (!c.tied_head) n += V * d;          // head
  return n;
}

double log_softmax_at(std::span<const float> row, TokenId target) {
  double mx = *std::max_element(row.begin(), row.end());
  double s = 0;
  for (float v : row) s += std::exp(v - mx);
  return row[target] - mx - std::log(s);
}

}  // namespace

TEST(ModelConfig, ValidateRejectsBadShapes) {
  auto c = toy_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.vocab_size = 0;
  EXPECT_THROW(init_model(c), ConfigError);
  EXPECT_EQ(ModelConfig::from_json(toy_config().to_json()), toy_config());
}

TEST(CountParams, ToyConfigMatchesInventory) {
  const auto c = toy_config();
  EXPECT_EQ(count_params(c), inventory_count(c));
  EXPECT_EQ(count_params(c), 920u);
  EXPECT_EQ(init_model(c).numel(), 920u);
}

TEST(CountParams, RandomConfigsMatchAllocation) {
  Rng rng(12);
  for (int i = 0; i < 10; ++i) {
    ModelConfig c;
    c.n_heads = 1 + rng.uniform_index(4);
    c.d_model = c.n_heads * (1 + rng.uniform_index(8));
    c.vocab_size = 1 + rng.uniform_index(100);
    c.n_layers = 1 + rng.uniform_index(3);
    c.ff_mult = 1 + rng.uniform_index(4);
    c.tied_head = rng.uniform() < 0.5;
    EXPECT_EQ(count_params(c), init_model(c).numel());
    EXPECT_EQ(count_params(c), inventory_count(c));
  }
}

TEST(CountParams, UntyingAddsOneEmbedding) {
  auto c = toy_config();
  const auto tied = count_params(c);
  c.tied_head = false;
  EXPECT_EQ(count_params(c) - tied, c.vocab_size * c.d_model);
}

TEST(InitModel, DeterministicWithUnitNorms) {
  const auto a = init_model(toy_config()), b = init_model(toy_config());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) EXPECT_EQ(a.tensors[i].data, b.tensors[i].data);
  for (const auto& t : a.tensors)
    if (t.shape.size() == 1)
      for (float g : t.data) EXPECT_EQ(g, 1.0f);
  auto c = toy_config();
  c.seed = 1;
  EXPECT_NE(init_model(c).tok_emb().data, a.tok_emb().data);
  EXPECT_TRUE(a.first_non_finite().empty());
}

TEST(InitModel, StdAndResidualScaling) {
  ModelConfig c = toy_config();
  c.d_model = 64;
  c.n_heads = 4;
  c.n_layers = 2;
  c.vocab_size = 200;
  const auto p = init_model(c);
  auto stdev = [](const std::vector<float>& v) {
    double s = 0;
    for (float x : v) s += double(x) * x;
    return std::sqrt(s / v.size());
  };
  EXPECT_NEAR(stdev(p.tok_emb().data), 0.02, 0.001);
  EXPECT_NEAR(stdev(p.layer(0, kWo).data), 0.02 / 2.0, 0.001);
  EXPECT_NEAR(stdev(p.layer(1, kW2).data), 0.02 / 2.0, 0.0005);
}

TEST(Forward, ZeroHeadGivesUniformDistribution) {
  auto c = toy_config();
  c.tied_head = false;
  auto p = init_model(c);
  std::fill(p.head().data.begin(), p.head().data.end(), 0.0f);
  const std::vector<TokenId> ids = {1, 2, 3, 4, 5};
  const std::vector<TokenId> tg = {2, 3, 4, 5, 6};
  const auto out = forward<float>(p, ids, tg);
  for (float v : out.logits) EXPECT_EQ(v, 0.0f);
  EXPECT_NEAR(out.loss, std::log(16.0), 1e-6);
  EXPECT_NEAR(perplexity(out.loss), 16.0, 16.0 * 1e-6);
}

TEST(Forward, SoftmaxRowsSumToOne) {
  Rng rng(2);
  const auto p = init_model(toy_config(), 0.5f);
  const auto out = forward<float>(p, random_ids(rng, 12, 16));
  for (std::size_t t = 0; t < out.seq_len; ++t) {
    const auto row = out.row(t);
    double s = 0;
    for (float v : row) s += std::exp(log_softmax_at(row, 0) - row[0] + v);
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(Forward, IsCausal) {
  Rng rng(3);
  const auto p = init_model(toy_config(), 0.3f);
  auto ids = random_ids(rng, 10, 16);
  const auto base = forward<float>(p, ids);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    auto changed = ids;
    changed[t] = (changed[t] + 5) % 16;
    const auto out = forward<float>(p, changed);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t v = 0; v < 16; ++v) EXPECT_EQ(out.row(r)[v], base.row(r)[v]);
    bool row_t_changed = false;
    for (std::size_t v = 0; v < 16; ++v) row_t_changed |= out.row(t)[v] != base.row(t)[v];
    EXPECT_TRUE(row_t_changed);
  }
}

TEST(Forward, LossIsMeanPerPositionNll) {
  Rng rng(4);
  const auto p = init_model(toy_config(), 0.4f);
  const std::vector<TokenId> ids = {3, 7, 1}, tg = {7, 1, 9};
  const auto out = forward<float>(p, ids, tg);
  double manual = 0;
  for (std::size_t t = 0; t < 3; ++t) manual -= log_softmax_at(out.row(t), tg[t]);
  EXPECT_NEAR(out.loss, manual / 3.0, 1e-6);
  // Eq. 1 chain rule: exp(-T*loss) = prod P(w_t | w_<t)
  double prod = 1;
  for (std::size_t t = 0; t < 3; ++t) prod *= std::exp(log_softmax_at(out.row(t), tg[t]));
  EXPECT_NEAR(std::exp(-3.0 * out.loss) / prod, 1.0, 1e-5);
}

TEST(Forward, RejectsBadInputs) {
  const auto p = init_model(toy_config());
  std::vector<TokenId> too_long(33, 1);
  EXPECT_THROW(forward<float>(p, too_long), std::invalid_argument);
  std::vector<TokenId> bad = {16};
  EXPECT_THROW(forward<float>(p, bad), std::invalid_argument);
  std::vector<TokenId> ids = {1, 2}, tg = {1};
  EXPECT_THROW(forward<float>(p, ids, tg), std::invalid_argument);
}

TEST(Forward, BitReproducible) {
  Rng rng(5);
  const auto p = init_model(toy_config(), 0.3f);
  const auto ids = random_ids(rng, 20, 16);
  EXPECT_EQ(forward<float>(p, ids).logits, forward<float>(p, ids).logits);
}

TEST(CrossEntropy, LogitGradientIsSoftmaxMinusOneHot) {
  Rng rng(6);
  const std::size_t T = 4, V = 6;
  std::vector<double> logits(T * V);
  for (auto& v : logits) v = rng.normal();
  const std::vector<TokenId> tg = {0, 5, 2, 2};
  std::vector<double> d(T * V);
  cross_entropy<double>(logits, V, tg, {}, 1.0 / T, d.data());
  for (std::size_t t = 0; t < T; ++t) {
    double mx = *std::max_element(logits.begin() + t * V, logits.begin() + (t + 1) * V), s = 0;
    for (std::size_t v = 0; v < V; ++v) s += std::exp(logits[t * V + v] - mx);
    for (std::size_t v = 0; v < V; ++v) {
      const double expect = (std::exp(logits[t * V + v] - mx) / s - (TokenId(v) == tg[t] ? 1.0 : 0.0)) / T;
      EXPECT_NEAR(d[t * V + v], expect, 1e-12);
    }
  }
  // and numerically
  for (std::size_t i = 0; i < logits.size(); ++i) {
    auto up = logits, dn = logits;
    up[i] += 1e-6;
    dn[i] -= 1e-6;
    const double num = (cross_entropy<double>(up, V, tg, {}, 0, nullptr) -
                        cross_entropy<double>(dn, V, tg, {}, 0, nullptr)) / (2e-6 * T);
    EXPECT_NEAR(d[i], num, 1e-7);
  }
}

TEST(Backward, UnusedTokenRowsHaveZeroGradientWhenUntied) {
  auto c = toy_config();
  c.tied_head = false;
  const auto p = init_model(c, 0.3f);
  const std::vector<TokenId> ids = {1, 2, 3}, tg = {2, 3, 4};
  const auto g = backward<float>(p, ids, tg);
  for (std::size_t v = 0; v < 16; ++v) {
    const bool used = v == 1 || v == 2 || v == 3;
    double norm = 0;
    for (std::size_t k = 0; k < 8; ++k) norm += std::fabs(g.tok_emb().data[v * 8 + k]);
    if (used)
      EXPECT_GT(norm, 0.0);
    else
      EXPECT_EQ(norm, 0.0);
  }
}

namespace {

// Central differences of the loss evaluated in double precision, perturbing
// the parameter in the same precision as the model under test.
template <typename Real>
double numeric_grad(const BasicParameters<Real>& p, std::size_t tensor, std::size_t idx,
                    const std::vector<TokenId>& ids, const std::vector<TokenId>& tg, double h) {
  auto q = cast_parameters<double>(p);
  const double orig = q.tensors[tensor].data[idx];
  q.tensors[tensor].data[idx] = orig + h;
  const double up = forward<double>(q, ids, tg).loss;
  q.tensors[tensor].data[idx] = orig - h;
  const double dn = forward<double>(q, ids, tg).loss;
  return (up - dn) / (2 * h);
}

// Richardson extrapolation of two central differences (h and h/2) cancels
// the O(h^2) truncation term, which alone reaches ~1e-4 relative at h = 1e-3.
template <typename Real>
double richardson_grad(const BasicParameters<Real>& p, std::size_t tensor, std::size_t idx,
                       const std::vector<TokenId>& ids, const std::vector<TokenId>& tg, double h) {
  return (4 * numeric_grad(p, tensor, idx, ids, tg, h / 2) - numeric_grad(p, tensor, idx, ids, tg, h)) / 3;
}

template <typename Real>
double max_relative_error(const BasicParameters<Real>& p, const BasicParameters<Real>& g,
                          const std::vector<TokenId>& ids, const std::vector<TokenId>& tg, int samples, Rng& rng,
                          bool extrapolate = false) {
  double worst = 0;
  for (int s = 0; s < samples; ++s) {
    const std::size_t ti = rng.uniform_index(p.tensors.size());
    const std::size_t idx = rng.uniform_index(p.tensors[ti].numel());
    const double a = g.tensors[ti].data[idx];
    const double n = extrapolate ? richardson_grad(p, ti, idx, ids, tg, 1e-3) : numeric_grad(p, ti, idx, ids, tg, 1e-3);
    const double denom = std::max(std::fabs(a), std::fabs(n));
    if (denom == 0) continue;
    worst = std::max(worst, std::fabs(a - n) / denom);
  }
  return worst;
}

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.context_len = 16;
  return c;
}

}  // namespace

TEST(Backward, FiniteDifferencesFp32) {
  Rng rng(7);
  const auto p = init_model(gradcheck_config(), 0.5f);
  const auto ids = random_ids(rng, 8, 11), tg = random_ids(rng, 8, 11);
  const auto g = backward<float>(p, ids, tg);
  EXPECT_LT(max_relative_error(p, g, ids, tg, 250, rng), 1e-2);
}

TEST(Backward, FiniteDifferencesFp64) {
  Rng rng(8);
  for (bool tied : {true, false}) {
    for (std::size_t layers : {1, 2}) {
      auto c = gradcheck_config();
      c.n_layers = layers;
      c.tied_head = tied;
      const auto p = cast_parameters<double>(init_model(c, 0.5f));
      const auto ids = random_ids(rng, 9, 11), tg = random_ids(rng, 9, 11);
      const auto g = backward<double>(p, ids, tg);
      EXPECT_LT(max_relative_error(p, g, ids, tg, 300, rng, true), 1e-4);
    }
  }
}

TEST(Backward, WeightedLossGradient) {
  Rng rng(9);
  const auto p = cast_parameters<double>(init_model(gradcheck_config(), 0.5f));
  const auto ids = random_ids(rng, 6, 11), tg = random_ids(rng, 6, 11);
  const std::vector<float> w = {0, 0, 1, 1, 0, 1};
  const auto g = backward<double>(p, ids, tg, w);
  for (int s = 0; s < 60; ++s) {
    const std::size_t ti = rng.uniform_index(p.tensors.size());
    const std::size_t idx = rng.uniform_index(p.tensors[ti].numel());
    auto q = p;
    q.tensors[ti].data[idx] += 1e-5;
    const double up = forward<double>(q, ids, tg, w).loss;
    q.tensors[ti].data[idx] -= 2e-5;
    const double dn = forward<double>(q, ids, tg, w).loss;
    EXPECT_NEAR(g.tensors[ti].data[idx], (up - dn) / 2e-5, 1e-7);
  }
}

TEST(Perplexity, ExpOfLoss) {
  EXPECT_EQ(perplexity(0.0), 1.0);
  // exp(fl(ln 16)) lands one ulp below 16
  EXPECT_NEAR(perplexity(std::log(16.0)), 16.0, 16.0 * 1e-15);
  EXPECT_THROW(perplexity(-0.1), std::invalid_argument);
  EXPECT_THROW(perplexity(std::nan("")), std::invalid_argument);
  EXPECT_THROW(perplexity(INFINITY), std::invalid_argument);
}
