#include "indiclm/train/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <stdexcept>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"

namespace indiclm::train {
namespace {

constexpr std::uint64_t kValSeedSalt = 0x76616c6964617465ULL;

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string describe_non_finite(const Parameters& params, const Parameters& grads) {
  if (auto n = params.first_non_finite(); !n.empty()) return "parameter tensor " + n;
  if (auto n = grads.first_non_finite(); !n.empty()) return "gradient tensor " + n;
  return "no tensor (loss only)";
}

using EvalFn = std::function<std::optional<double>(const Parameters&)>;
using StepFn = std::function<double(const Parameters&, Parameters&, Rng&)>;

class MetricsSink {
 public:
  explicit MetricsSink(const TrainHooks& hooks) : hooks_(hooks) {
    if (!hooks.metrics_path.empty()) {
      if (hooks.metrics_path.has_parent_path()) std::filesystem::create_directories(hooks.metrics_path.parent_path());
      out_.open(hooks.metrics_path, std::ios::app);
      if (!out_) throw std::runtime_error("cannot open metrics log " + hooks.metrics_path.string());
    }
  }

  void emit(const MetricRecord& r, std::vector<MetricRecord>& log) {
    log.push_back(r);
    if (out_.is_open()) out_ << r.to_json().dump() << '\n' << std::flush;
    if (hooks_.on_record) hooks_.on_record(r);
  }

 private:
  const TrainHooks& hooks_;
  std::ofstream out_;
};

TrainResult run_loop(Parameters params, const TrainConfig& config, const TrainHooks& hooks, const TrainState* resume,
                     const StepFn& step_fn, const EvalFn& eval_fn) {
  config.validate(params.config.context_len);
  TrainResult res;
  res.state = resume ? *resume : TrainState::fresh(params.config);
  TrainState& state = res.state;
  Rng rng(config.seed);
  if (!state.rng_state.empty()) rng.set_state(state.rng_state);
  if (!hooks.checkpoint_dir.empty()) std::filesystem::create_directories(hooks.checkpoint_dir);

  MetricsSink sink(hooks);
  auto grads = lm::allocate_parameters<float>(params.config);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  while (state.step < config.max_steps) {
    const std::size_t step = state.step + 1;
    grads.zero();
    const double loss = step_fn(params, grads, rng);
    if (!std::isfinite(loss))
      throw TrainingDiverged(
          fmt::format("non-finite loss at step {}; first non-finite: {}", step, describe_non_finite(params, grads)));
    clip_grad_norm(grads, config.grad_clip);
    const double lr = learning_rate_at(config, step);
    adamw_step(params, grads, state, config, lr);
    if (auto bad = params.first_non_finite(); !bad.empty())
      throw TrainingDiverged(fmt::format("parameter tensor {} became non-finite at step {}", bad, step));
    state.step = step;
    state.rng_state = rng.state();
    sink.emit({step, "train", loss, lm::perplexity(loss), lr, elapsed()}, res.log);

    if (step % config.eval_interval_k == 0) {
      if (auto val = eval_fn(params)) {
        sink.emit({step, "val", *val, lm::perplexity(*val), lr, elapsed()}, res.log);
        if (*val < state.best_val_loss) {
          state.best_val_loss = *val;
          if (!hooks.checkpoint_dir.empty())
            save_checkpoint(hooks.checkpoint_dir / "best.plmf", params, state, &config);
        }
      }
    }
    if (!hooks.checkpoint_dir.empty() && step % config.checkpoint_every == 0)
      save_checkpoint(hooks.checkpoint_dir / fmt::format("step-{}.plmf", step), params, state, &config);
    if (hooks.stop_after != 0 && step >= hooks.stop_after) break;
  }
  res.params = std::move(params);
  return res;
}

}  // namespace

void TrainConfig::validate(std::size_t context_len) const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (max_steps == 0) fail("max_steps must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (seq_len == 0) fail("seq_len must be positive");
  if (seq_len > context_len) fail(fmt::format("seq_len {} exceeds context_len {}", seq_len, context_len));
  if (eval_interval_k == 0) fail("eval_interval_k must be positive");
  if (eval_interval_k > max_steps) fail("eval_interval_k exceeds max_steps");
  if (eval_batches == 0) fail("eval_batches must be positive");
  if (checkpoint_every == 0) fail("checkpoint_every must be positive");
  if (!(grad_clip > 0)) fail("grad_clip must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must be in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be nonnegative");
  if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1)) fail("min_lr_ratio must be in [0, 1]");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"warmup_steps", warmup_steps},
          {"max_steps", max_steps},         {"batch_size", batch_size},
          {"seq_len", seq_len},             {"eval_interval_k", eval_interval_k},
          {"eval_batches", eval_batches},   {"checkpoint_every", checkpoint_every},
          {"grad_clip", grad_clip},         {"seed", seed},
          {"beta1", beta1},                 {"beta2", beta2},
          {"adam_eps", adam_eps},           {"weight_decay", weight_decay},
          {"min_lr_ratio", min_lr_ratio}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    get_if(j, "learning_rate", c.learning_rate);
    get_if(j, "warmup_steps", c.warmup_steps);
    get_if(j, "max_steps", c.max_steps);
    get_if(j, "batch_size", c.batch_size);
    get_if(j, "seq_len", c.seq_len);
    get_if(j, "eval_interval_k", c.eval_interval_k);
    get_if(j, "eval_batches", c.eval_batches);
    get_if(j, "checkpoint_every", c.checkpoint_every);
    get_if(j, "grad_clip", c.grad_clip);
    get_if(j, "seed", c.seed);
    get_if(j, "beta1", c.beta1);
    get_if(j, "beta2", c.beta2);
    get_if(j, "adam_eps", c.adam_eps);
    get_if(j, "weight_decay", c.weight_decay);
    get_if(j, "min_lr_ratio", c.min_lr_ratio);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("train config: {}", e.what()));
  }
  return c;
}

TrainState TrainState::fresh(const lm::ModelConfig& config) {
  TrainState s;
  s.m = lm::allocate_parameters<float>(config);
  s.v = lm::allocate_parameters<float>(config);
  return s;
}

BatchSampler::BatchSampler(std::span<const TokenId> stream, std::size_t seq_len, std::size_t batch_size,
                           std::uint64_t seed)
    : stream_(stream), seq_len_(seq_len), batch_size_(batch_size), rng_(seed) {
  if (seq_len == 0 || batch_size == 0) throw std::invalid_argument("seq_len and batch_size must be positive");
  if (stream.size() < seq_len + 1)
    throw std::invalid_argument(
        fmt::format("token stream of {} tokens is shorter than seq_len + 1 = {}", stream.size(), seq_len + 1));
}

std::size_t BatchSampler::next_offset() { return rng_.uniform_index(num_offsets()); }

Batch BatchSampler::next() {
  std::vector<std::size_t> offsets(batch_size_);
  for (auto& o : offsets) o = next_offset();
  return at_offsets(offsets);
}

Batch BatchSampler::at_offsets(std::span<const std::size_t> offsets) const {
  Batch b;
  b.batch = offsets.size();
  b.seq_len = seq_len_;
  b.inputs.reserve(offsets.size() * seq_len_);
  b.targets.reserve(offsets.size() * seq_len_);
  for (std::size_t o : offsets) {
    if (o >= num_offsets()) throw std::out_of_range(fmt::format("window offset {} out of range", o));
    b.inputs.insert(b.inputs.end(), stream_.begin() + o, stream_.begin() + o + seq_len_);
    b.targets.insert(b.targets.end(), stream_.begin() + o + 1, stream_.begin() + o + 1 + seq_len_);
  }
  return b;
}

double learning_rate_at(const TrainConfig& c, std::size_t step) {
  if (c.warmup_steps > 0 && step <= c.warmup_steps)
    return c.learning_rate * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double floor = c.min_lr_ratio * c.learning_rate;
  if (c.max_steps <= c.warmup_steps) return c.learning_rate;
  const double progress = std::min(
      1.0, static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.max_steps - c.warmup_steps));
  return floor + 0.5 * (c.learning_rate - floor) * (1.0 + std::cos(M_PI * progress));
}

double global_norm(const Parameters& grads) {
  double ss = 0;
  for (const auto& t : grads.tensors)
    for (float g : t.data) ss += static_cast<double>(g) * g;
  return std::sqrt(ss);
}

double clip_grad_norm(Parameters& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& t : grads.tensors)
      for (float& g : t.data) g *= s;
  }
  return norm;
}

void adamw_step(Parameters& params, const Parameters& grads, TrainState& state, const TrainConfig& c, double lr) {
  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& p = params.tensors[i].data;
    const auto& g = grads.tensors[i].data;
    auto& m = state.m.tensors[i].data;
    auto& v = state.v.tensors[i].data;
    const double wd = lm::is_matrix_name(params.tensors[i].name) ? c.weight_decay : 0.0;
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(p.size());
#pragma omp parallel for schedule(static) if (n > 16384)
    for (std::ptrdiff_t k = 0; k < n; ++k) {
      const double gk = g[k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double update = (mk / bc1) / (std::sqrt(vk / bc2) + c.adam_eps) + wd * p[k];
      p[k] = static_cast<float>(p[k] - lr * update);
    }
  }
}

nlohmann::json MetricRecord::to_json() const {
  return {{"step", step}, {"split", split}, {"loss", loss}, {"perplexity", perplexity}, {"lr", lr},
          {"elapsed_s", elapsed_s}};
}

MetricRecord MetricRecord::from_json(const nlohmann::json& j) {
  MetricRecord r;
  try {
    r.step = j.at("step").get<std::size_t>();
    r.split = j.at("split").get<std::string>();
    r.loss = j.at("loss").get<double>();
    r.perplexity = j.at("perplexity").get<double>();
    r.lr = j.at("lr").get<double>();
    r.elapsed_s = j.at("elapsed_s").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad metric record: {}", e.what()));
  }
  return r;
}

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(MetricRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
    }
  }
  return out;
}

TrainResult pretrain(Parameters params, const TokenCorpus& corpus, const TrainConfig& config, const TrainHooks& hooks,
                     const TrainState* resume) {
  config.validate(params.config.context_len);
  BatchSampler sampler(corpus.train, config.seq_len, config.batch_size, config.seed);

  std::optional<BatchSampler> val_sampler;
  std::vector<Batch> val_batches;
  if (corpus.val.size() >= 2) {
    const std::size_t vt = std::min(config.seq_len, corpus.val.size() - 1);
    val_sampler.emplace(corpus.val, vt, config.batch_size, config.seed ^ kValSeedSalt);
    for (std::size_t b = 0; b < config.eval_batches; ++b) val_batches.push_back(val_sampler->next());
  }

  const StepFn step_fn = [&](const Parameters& p, Parameters& grads, Rng& rng) {
    std::vector<std::size_t> offsets(config.batch_size);
    for (auto& o : offsets) o = rng.uniform_index(sampler.num_offsets());
    const Batch b = sampler.at_offsets(offsets);
    const std::size_t T = b.seq_len;
    const float scale = 1.0f / static_cast<float>(b.batch * T);
    double total = 0;
    for (std::size_t r = 0; r < b.batch; ++r) {
      std::span<const TokenId> in(b.inputs.data() + r * T, T), tg(b.targets.data() + r * T, T);
      total += lm::accumulate_gradients<float>(p, in, tg, {}, grads, scale);
    }
    return total / static_cast<double>(b.batch * T);
  };
  const EvalFn eval_fn = [&](const Parameters& p) -> std::optional<double> {
    if (val_batches.empty()) return std::nullopt;
    double nll = 0, count = 0;
    for (const auto& b : val_batches)
      for (std::size_t r = 0; r < b.batch; ++r) {
        std::span<const TokenId> in(b.inputs.data() + r * b.seq_len, b.seq_len),
            tg(b.targets.data() + r * b.seq_len, b.seq_len);
        const auto out = lm::forward(p, in, tg);
        nll += static_cast<double>(out.loss) * out.weight_sum;
        count += out.weight_sum;
      }
    return nll / count;
  };
  return run_loop(std::move(params), config, hooks, resume, step_fn, eval_fn);
}

namespace {

void check_example(const SftExample& e, std::size_t context_len) {
  if (e.tokens.size() != e.mask.size()) throw std::invalid_argument("SFT example mask length differs from tokens");
  if (e.tokens.size() > context_len + 1)
    throw std::invalid_argument(
        fmt::format("SFT example of {} tokens exceeds context_len {} + 1", e.tokens.size(), context_len));
}

bool trainable(const SftExample& e) {
  for (std::size_t i = 1; i < e.mask.size(); ++i)
    if (e.mask[i]) return true;
  return false;
}

struct Weighted {
  std::span<const TokenId> ids, targets;
  std::vector<float> weights;
  double weight_sum = 0;
};

Weighted weighted(const SftExample& e) {
  Weighted w;
  const std::size_t n = e.tokens.size() - 1;
  w.ids = {e.tokens.data(), n};
  w.targets = {e.tokens.data() + 1, n};
  w.weights.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    w.weights[t] = e.mask[t + 1] ? 1.0f : 0.0f;
    w.weight_sum += w.weights[t];
  }
  return w;
}

}  // namespace

double masked_loss(const Parameters& params, std::span<const SftExample> examples) {
  double nll = 0, total = 0;
  for (const auto& e : examples) {
    check_example(e, params.config.context_len);
    if (!trainable(e)) continue;
    const auto w = weighted(e);
    const auto out = lm::forward(params, w.ids, w.targets, w.weights);
    nll += static_cast<double>(out.loss) * out.weight_sum;
    total += out.weight_sum;
  }
  if (total == 0) throw std::invalid_argument("no response positions to score");
  return nll / total;
}

SftResult finetune_sft(Parameters params, std::span<const SftExample> dataset, const TrainConfig& config,
                       const TrainHooks& hooks, std::span<const SftExample> val, const TrainState* resume) {
  if (dataset.empty()) throw std::invalid_argument("SFT dataset is empty");
  std::vector<std::size_t> usable;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    check_example(dataset[i], params.config.context_len);
    if (trainable(dataset[i]))
      usable.push_back(i);
    else
      ++skipped;
  }
  if (usable.empty()) throw std::invalid_argument("every SFT example has an empty response mask");
  if (skipped > 0) fmt::print(stderr, "warning: skipped {} SFT examples with no response tokens\n", skipped);
  std::vector<Weighted> prepared;
  prepared.reserve(dataset.size());
  for (const auto& e : dataset) prepared.push_back(trainable(e) ? weighted(e) : Weighted{});

  const StepFn step_fn = [&](const Parameters& p, Parameters& grads, Rng& rng) {
    std::vector<std::size_t> pick(config.batch_size);
    double total_w = 0;
    for (auto& k : pick) {
      k = usable[rng.uniform_index(usable.size())];
      total_w += prepared[k].weight_sum;
    }
    const float scale = static_cast<float>(1.0 / total_w);
    double nll = 0;
    for (std::size_t k : pick) {
      const auto& w = prepared[k];
      nll += lm::accumulate_gradients<float>(p, w.ids, w.targets, w.weights, grads, scale);
    }
    return nll / total_w;
  };
  const EvalFn eval_fn = [&](const Parameters& p) -> std::optional<double> {
    if (val.empty()) return std::nullopt;
    return masked_loss(p, val);
  };
  SftResult res;
  static_cast<TrainResult&>(res) = run_loop(std::move(params), config, hooks, resume, step_fn, eval_fn);
  res.skipped = skipped;
  return res;
}

void save_checkpoint(const std::filesystem::path& path, const Parameters& params, const TrainState& state,
                     const TrainConfig* config) {
  auto file = lm::to_checkpoint(params);
  auto add = [&](const Parameters& moments, const char* prefix) {
    if (moments.tensors.size() != params.tensors.size()) return;
    for (const auto& t : moments.tensors) {
      lm::TensorRecord r;
      r.name = std::string(prefix) + t.name;
      r.dims.assign(t.shape.begin(), t.shape.end());
      r.f32 = t.data;
      file.tensors.push_back(std::move(r));
    }
  };
  add(state.m, "adam.m.");
  add(state.v, "adam.v.");
  nlohmann::json ts = {{"step", state.step}, {"rng_state", state.rng_state}};
  ts["best_val_loss"] = std::isfinite(state.best_val_loss) ? nlohmann::json(state.best_val_loss) : nlohmann::json();
  file.meta["train_state"] = ts;
  if (config) file.meta["train_config"] = config->to_json();
  lm::write_checkpoint_file(path, file);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto file = lm::read_checkpoint_file(path);
  LoadedCheckpoint out;
  out.params = lm::parameters_from_checkpoint(file);
  out.meta = file.meta;
  out.state = TrainState::fresh(out.params.config);
  if (!file.meta.contains("train_state")) return out;
  const auto& ts = file.meta["train_state"];
  try {
    out.state.step = ts.at("step").get<std::size_t>();
    out.state.rng_state = ts.at("rng_state").get<std::string>();
    if (!ts.at("best_val_loss").is_null()) out.state.best_val_loss = ts.at("best_val_loss").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("{}: bad train state: {}", path.string(), e.what()));
  }
  auto fill = [&](Parameters& moments, const char* prefix) {
    for (auto& t : moments.tensors) {
      const std::string name = std::string(prefix) + t.name;
      const auto* r = file.find(name);
      if (!r) throw FormatError(fmt::format("{}: missing optimizer tensor {}", path.string(), name));
      if (r->precision != lm::Precision::f32 || r->numel() != t.numel() || r->dims.size() != t.shape.size() ||
          !std::equal(t.shape.begin(), t.shape.end(), r->dims.begin()))
        throw FormatError(fmt::format("{}: optimizer tensor {} has the wrong shape", path.string(), name));
      t.data = r->f32;
    }
  };
  fill(out.state.m, "adam.m.");
  fill(out.state.v, "adam.v.");
  return out;
}

std::vector<TokenId> build_stream(const std::vector<std::vector<TokenId>>& docs, TokenId bos) {
  std::vector<TokenId> out;
  for (const auto& d : docs) {
    out.push_back(bos);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

}  // namespace indiclm::train
