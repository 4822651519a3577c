#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiclm/common/rng.hpp"
#include "indiclm/lm/checkpoint.hpp"
#include "indiclm/lm/model.hpp"

namespace indiclm::train {

using lm::Parameters;
using lm::TokenId;

struct TrainConfig {
  double learning_rate = 3e-3;
  std::size_t warmup_steps = 100;
  std::size_t max_steps = 1000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 128;
  std::size_t eval_interval_k = 1000;
  std::size_t eval_batches = 4;
  std::size_t checkpoint_every = 1000;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of learning_rate

  // Throws ConfigError; context_len is the model's.
  void validate(std::size_t context_len) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainState {
  std::size_t step = 0;
  Parameters m;  // Adam first moments, same layout as the parameters
  Parameters v;  // Adam second moments
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::string rng_state;

  static TrainState fresh(const lm::ModelConfig& config);
};

// A batch of windows, row-major [batch x seq_len].
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
};

// Draws windows at offsets uniform in [0, |stream| - seq_len - 1]; targets are
// inputs shifted left by one. Throws std::invalid_argument when the stream
// has fewer than seq_len + 1 tokens.
class BatchSampler {
 public:
  BatchSampler(std::span<const TokenId> stream, std::size_t seq_len, std::size_t batch_size, std::uint64_t seed);

  Batch next();
  std::size_t next_offset();
  Batch at_offsets(std::span<const std::size_t> offsets) const;
  std::size_t num_offsets() const { return stream_.size() - seq_len_; }

  Rng& rng() { return rng_; }

 private:
  std::span<const TokenId> stream_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  Rng rng_;
};

// Warmup to learning_rate linearly over warmup_steps, then cosine down to
// min_lr_ratio * learning_rate at max_steps. step is 1-based.
double learning_rate_at(const TrainConfig& config, std::size_t step);

double global_norm(const Parameters& grads);
// Scales grads so their global norm is at most max_norm; returns the norm
// before clipping.
double clip_grad_norm(Parameters& grads, double max_norm);

// One AdamW update. Weight decay applies only to matrices.
void adamw_step(Parameters& params, const Parameters& grads, TrainState& state, const TrainConfig& config, double lr);

struct MetricRecord {
  std::size_t step = 0;
  std::string split;  // "train" or "val"
  double loss = 0;
  double perplexity = 0;
  double lr = 0;
  double elapsed_s = 0;

  nlohmann::json to_json() const;
  static MetricRecord from_json(const nlohmann::json& j);
};

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path);

// Thrown when a loss or tensor goes non-finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainHooks {
  std::filesystem::path metrics_path;    // appended JSONL when set
  std::filesystem::path checkpoint_dir;  // step-<n>.plmf and best.plmf when set
  std::function<void(const MetricRecord&)> on_record;
  std::size_t stop_after = 0;  // stop once this step completes (0: run to max_steps)
};

struct TrainResult {
  Parameters params;
  TrainState state;
  std::vector<MetricRecord> log;
};

struct TokenCorpus {
  std::vector<TokenId> train;
  std::vector<TokenId> val;
};

// Loss is the mean NLL over every position of the batch. Validation uses
// eval_batches fixed batches drawn once from val with a seed derived from
// config.seed, at every multiple of eval_interval_k. Per-sequence gradients
// are summed in batch order, so results do not depend on the thread count.
TrainResult pretrain(Parameters params, const TokenCorpus& corpus, const TrainConfig& config,
                     const TrainHooks& hooks = {}, const TrainState* resume = nullptr);

// Token ids with a per-position loss mask: mask[i] = 1 when tokens[i] is a
// response token. Position t is trained to predict tokens[t + 1] with weight
// mask[t + 1].
struct SftExample {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> mask;
};

struct SftResult : TrainResult {
  std::size_t skipped = 0;  // examples with no response positions
};

// Masked mean NLL over one batch of examples (sum of weighted NLL over sum of
// weights).
double masked_loss(const Parameters& params, std::span<const SftExample> examples);

// Each step samples batch_size examples uniformly with replacement. The loss
// and gradient cover response positions only. Throws std::invalid_argument
// on an empty dataset, on a dataset with no trainable example, or when an
// example needs more than context_len inputs.
SftResult finetune_sft(Parameters params, std::span<const SftExample> dataset, const TrainConfig& config,
                       const TrainHooks& hooks = {}, std::span<const SftExample> val = {},
                       const TrainState* resume = nullptr);

// Model tensors plus "adam.m.<name>" / "adam.v.<name>" moments; meta carries
// the step, best validation loss, RNG state and train config.
void save_checkpoint(const std::filesystem::path& path, const Parameters& params, const TrainState& state,
                     const TrainConfig* config = nullptr);
struct LoadedCheckpoint {
  Parameters params;
  TrainState state;
  nlohmann::json meta;
};
// Files written by lm::save_model load with a fresh state.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Concatenates documents, each preceded by bos.
std::vector<TokenId> build_stream(const std::vector<std::vector<TokenId>>& docs, TokenId bos);

}  // namespace indiclm::train
