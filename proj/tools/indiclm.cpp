#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "indiclm/corpus/corpus.hpp"
#include "indiclm/decode/decode.hpp"
#include "indiclm/evalkit/evalkit.hpp"
#include "indiclm/instruct/instruct.hpp"
#include "indiclm/kernels/linalg.hpp"
#include "indiclm/lm/checkpoint.hpp"
#include "indiclm/serve/bench.hpp"
#include "indiclm/serve/quantize.hpp"
#include "indiclm/serve/server.hpp"
#include "indiclm/train/train.hpp"

using namespace indiclm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

std::vector<lm::TokenId> token_stream(const tokenizer::TokenizerModel& tok, const std::vector<corpus::RawDocument>& docs) {
  std::vector<std::vector<lm::TokenId>> ids;
  ids.reserve(docs.size());
  for (const auto& d : docs) ids.push_back(tok.encode(d.text));
  return train::build_stream(ids, tokenizer::kBosId);
}

struct TrainFlags {
  std::optional<fs::path> config;
  std::optional<std::size_t> steps, batch, seq_len, eval_every, warmup;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--train-config", config, "TrainConfig JSON");
    app->add_option("--steps", steps, "max_steps");
    app->add_option("--batch", batch, "batch_size");
    app->add_option("--seq-len", seq_len, "seq_len");
    app->add_option("--eval-every", eval_every, "eval_interval_k");
    app->add_option("--warmup", warmup, "warmup_steps");
    app->add_option("--lr", lr, "learning_rate");
    app->add_option("--seed", seed, "seed");
  }
  train::TrainConfig resolve() const {
    train::TrainConfig c = config ? train::TrainConfig::from_json(read_json_file(*config)) : train::TrainConfig{};
    if (steps) c.max_steps = *steps;
    if (batch) c.batch_size = *batch;
    if (seq_len) c.seq_len = *seq_len;
    if (eval_every) c.eval_interval_k = c.checkpoint_every = *eval_every;
    if (warmup) c.warmup_steps = *warmup;
    if (lr) c.learning_rate = *lr;
    if (seed) c.seed = *seed;
    return c;
  }
};

train::TrainHooks hooks_for(const fs::path& out) {
  fs::create_directories(out);
  train::TrainHooks h;
  h.metrics_path = out / "metrics.jsonl";
  h.checkpoint_dir = out;
  h.on_record = [](const train::MetricRecord& r) { std::cerr << r.to_json().dump() << '\n'; };
  return h;
}

decode::SamplerConfig sampler_from(double temperature, std::optional<std::size_t> top_k, double top_p,
                                   std::size_t max_new, std::size_t n, std::uint64_t seed) {
  decode::SamplerConfig c;
  c.temperature = temperature;
  c.top_k = top_k;
  c.top_p = top_p >= 1.0 ? std::optional<double>() : std::optional<double>(top_p);
  c.max_new_tokens = max_new;
  c.n_samples = n;
  c.seed = seed;
  c.validate();
  return c;
}

serve::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"indiclm: small monolingual language models for Indic scripts"};
  app.require_subcommand(1);

  // clean
  auto* clean = app.add_subcommand("clean", "clean and deduplicate a JSONL corpus");
  fs::path clean_in, clean_out;
  std::optional<fs::path> clean_cfg, clean_stats;
  bool dedup_lines = false;
  clean->add_option("--input", clean_in, "input JSONL")->required();
  clean->add_option("--output", clean_out, "output JSONL")->required();
  clean->add_option("--config", clean_cfg, "CleanConfig JSON (default: every rule for each document's script)");
  clean->add_option("--stats", clean_stats, "write CorpusStats JSON here");
  clean->add_flag("--dedup-lines", dedup_lines, "also drop repeated lines");
  clean->callback([&] {
    const auto docs = corpus::read_jsonl(clean_in);
    std::optional<corpus::CleanConfig> fixed;
    if (clean_cfg) fixed = corpus::CleanConfig::from_json(read_json_file(*clean_cfg));
    std::vector<corpus::RawDocument> cleaned;
    for (auto d : docs) {
      const auto cfg = fixed ? *fixed : corpus::CleanConfig::for_script(d.script);
      d.text = corpus::clean_document(d.text, d.script, cfg);
      if (!d.text.empty()) cleaned.push_back(std::move(d));
    }
    const std::size_t before = cleaned.size();
    auto out = corpus::deduplicate(cleaned, {dedup_lines});
    corpus::validate_corpus(out);
    corpus::write_jsonl(clean_out, out);
    const auto stats = corpus::compute_stats(out, docs.size(), before).to_json();
    if (clean_stats) std::ofstream(*clean_stats) << stats.dump(2) << '\n';
    std::cout << stats.dump() << '\n';
  });

  // split
  auto* split = app.add_subcommand("split", "split a JSONL corpus into train and validation");
  fs::path split_in, split_train, split_val;
  corpus::SplitSpec spec;
  split->add_option("--input", split_in)->required();
  split->add_option("--train", split_train)->required();
  split->add_option("--val", split_val)->required();
  split->add_option("--fraction", spec.train_fraction, "train fraction")->capture_default_str();
  split->add_option("--seed", spec.seed)->capture_default_str();
  split->callback([&] {
    const auto s = corpus::split_train_val(corpus::read_jsonl(split_in), spec);
    corpus::write_jsonl(split_train, s.train);
    corpus::write_jsonl(split_val, s.val);
    std::cout << json{{"train", s.train.size()}, {"val", s.val.size()}}.dump() << '\n';
  });

  // tok-train
  auto* tok_train = app.add_subcommand("tok-train", "train a byte-level BPE tokenizer");
  std::vector<fs::path> tok_inputs;
  fs::path tok_out;
  tokenizer::TrainOptions tok_opt;
  tok_opt.vocab_size = 1024;
  bool no_fallback = false;
  tok_train->add_option("--input", tok_inputs, "JSONL corpora")->required();
  tok_train->add_option("--vocab", tok_opt.vocab_size)->capture_default_str();
  tok_train->add_option("--output", tok_out)->required();
  tok_train->add_flag("--no-byte-fallback", no_fallback);
  tok_train->callback([&] {
    tok_opt.byte_fallback = !no_fallback;
    std::vector<std::string> texts;
    for (const auto& p : tok_inputs)
      for (auto& d : corpus::read_jsonl(p)) texts.push_back(std::move(d.text));
    const auto tok = tokenizer::train_bpe(texts, tok_opt);
    tok.save(tok_out);
    std::cout << json{{"vocab_size", tok.vocab_size()}}.dump() << '\n';
  });

  // tok-encode
  auto* tok_encode = app.add_subcommand("tok-encode", "encode text (argument or stdin) to token ids");
  fs::path enc_tok;
  std::optional<std::string> enc_text;
  tok_encode->add_option("--tokenizer", enc_tok)->required();
  tok_encode->add_option("--text", enc_text);
  tok_encode->callback([&] {
    const auto tok = tokenizer::TokenizerModel::load(enc_tok);
    std::string text;
    if (enc_text) {
      text = *enc_text;
    } else {
      std::stringstream ss;
      ss << std::cin.rdbuf();
      text = ss.str();
    }
    std::cout << json(tok.encode(text)).dump() << '\n';
  });

  // tok-fertility
  auto* tok_fert = app.add_subcommand("tok-fertility", "mean tokens per word over a JSONL corpus");
  fs::path fert_tok, fert_in;
  tok_fert->add_option("--tokenizer", fert_tok)->required();
  tok_fert->add_option("--input", fert_in)->required();
  tok_fert->callback([&] {
    const auto tok = tokenizer::TokenizerModel::load(fert_tok);
    std::size_t tokens = 0, words = 0;
    for (const auto& d : corpus::read_jsonl(fert_in)) {
      tokens += tok.encode(d.text).size();
      words += tokenizer::count_words(d.text);
    }
    if (words == 0) throw std::runtime_error("corpus has no words");
    std::cout << json{{"tokens", tokens}, {"words", words}, {"fertility", double(tokens) / double(words)}}.dump() << '\n';
  });

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "pretrain a decoder from scratch");
  fs::path pre_train, pre_val, pre_tok, pre_out;
  std::optional<fs::path> pre_model_cfg, pre_resume;
  lm::ModelConfig mc;
  mc.d_model = 128;
  mc.n_layers = 6;
  mc.n_heads = 4;
  mc.context_len = 128;
  TrainFlags pre_flags;
  pre->add_option("--train", pre_train)->required();
  pre->add_option("--val", pre_val)->required();
  pre->add_option("--tokenizer", pre_tok)->required();
  pre->add_option("--out", pre_out, "output directory")->required();
  pre->add_option("--model-config", pre_model_cfg, "ModelConfig JSON");
  pre->add_option("--d-model", mc.d_model)->capture_default_str();
  pre->add_option("--layers", mc.n_layers)->capture_default_str();
  pre->add_option("--heads", mc.n_heads)->capture_default_str();
  pre->add_option("--context", mc.context_len)->capture_default_str();
  pre->add_option("--resume", pre_resume, "training checkpoint to continue from");
  pre_flags.add(pre);
  pre->callback([&] {
    const auto tok = tokenizer::TokenizerModel::load(pre_tok);
    if (pre_model_cfg) mc = lm::ModelConfig::from_json(read_json_file(*pre_model_cfg));
    mc.vocab_size = tok.vocab_size();
    auto tc = pre_flags.resolve();
    mc.seed = tc.seed;
    const train::TokenCorpus data{token_stream(tok, corpus::read_jsonl(pre_train)),
                                  token_stream(tok, corpus::read_jsonl(pre_val))};
    std::optional<train::LoadedCheckpoint> resumed;
    if (pre_resume) resumed = train::load_checkpoint(*pre_resume);
    auto params = resumed ? resumed->params : lm::init_model(mc);
    std::cerr << fmt::format("model {} parameters, train {} tokens, val {} tokens\n", params.numel(), data.train.size(),
                             data.val.size());
    const auto res = train::pretrain(std::move(params), data, tc, hooks_for(pre_out), resumed ? &resumed->state : nullptr);
    train::save_checkpoint(pre_out / "final.plmf", res.params, res.state, &tc);
    std::cout << json{{"steps", res.state.step}, {"best_val_loss", res.state.best_val_loss}}.dump() << '\n';
  });

  // sft
  auto* sft = app.add_subcommand("sft", "instruction fine-tune a pretrained checkpoint");
  fs::path sft_base, sft_tok, sft_data, sft_out;
  std::string sft_template = "default";
  TrainFlags sft_flags;
  sft->add_option("--base", sft_base, "pretrained checkpoint")->required();
  sft->add_option("--tokenizer", sft_tok)->required();
  sft->add_option("--dataset", sft_data, "instruction JSONL")->required();
  sft->add_option("--template", sft_template)->capture_default_str();
  sft->add_option("--out", sft_out)->required();
  sft_flags.add(sft);
  sft->callback([&] {
    const auto tok = tokenizer::TokenizerModel::load(sft_tok);
    const auto& tmpl = instruct::find_template(sft_template);
    auto base = train::load_checkpoint(sft_base);
    instruct::SftEncodeStats stats;
    std::vector<train::SftExample> examples;
    for (const auto& ex : instruct::read_instructions(sft_data))
      if (auto e = instruct::encode_sft(tok, ex, tmpl, base.params.config.context_len, &stats)) examples.push_back(std::move(*e));
    std::cerr << fmt::format("{} examples, {} input-truncated, {} instruction-truncated, {} skipped\n", examples.size(),
                             stats.truncated_input, stats.truncated_instruction, stats.skipped);
    auto tc = sft_flags.resolve();
    const auto res = train::finetune_sft(std::move(base.params), examples, tc, hooks_for(sft_out));
    train::save_checkpoint(sft_out / "final.plmf", res.params, res.state, &tc);
    std::cout << json{{"steps", res.state.step}, {"skipped", res.skipped + stats.skipped}}.dump() << '\n';
  });

  // generate
  auto* gen = app.add_subcommand("generate", "sample continuations of a prompt");
  fs::path gen_model, gen_tok;
  std::string gen_prompt;
  double gen_temp = 1.0, gen_top_p = 0.9;
  std::optional<std::size_t> gen_top_k;
  std::size_t gen_max = 64, gen_n = 3;
  std::uint64_t gen_seed = 0;
  gen->add_option("--model", gen_model)->required();
  gen->add_option("--tokenizer", gen_tok)->required();
  gen->add_option("--prompt", gen_prompt)->required();
  gen->add_option("--temperature", gen_temp)->capture_default_str();
  gen->add_option("--top-k", gen_top_k);
  gen->add_option("--top-p", gen_top_p, "1.0 disables nucleus filtering")->capture_default_str();
  gen->add_option("--max-new-tokens", gen_max)->capture_default_str();
  gen->add_option("-n,--samples", gen_n)->capture_default_str();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->callback([&] {
    const auto model = serve::load_predictor(gen_model);
    const auto tok = tokenizer::TokenizerModel::load(gen_tok);
    const auto cfg = sampler_from(gen_temp, gen_top_k, gen_top_p, gen_max, gen_n, gen_seed);
    for (const auto& s : decode::generate(*model, tok, gen_prompt, cfg)) std::cout << s.to_json().dump() << '\n';
  });

  // quantize
  auto* quant = app.add_subcommand("quantize", "write an int8 copy of a checkpoint");
  fs::path q_in, q_out;
  quant->add_option("--model", q_in)->required();
  quant->add_option("--output", q_out)->required();
  quant->callback([&] {
    const auto params = lm::parameters_from_checkpoint(lm::read_checkpoint_file(q_in));
    serve::save_quantized(q_out, serve::quantize_int8(params));
    const auto fp32 = lm::encode_checkpoint(lm::to_checkpoint(params)).size();
    const auto i8 = fs::file_size(q_out);
    std::cout << json{{"fp32_bytes", fp32}, {"int8_bytes", i8}, {"ratio", double(i8) / double(fp32)}}.dump() << '\n';
  });

  // bench
  auto* bench = app.add_subcommand("bench", "greedy decoding throughput");
  fs::path b_model, b_tok;
  std::string b_prompt = "", b_id;
  serve::BenchOptions b_opt;
  b_opt.stop_tokens.clear();
  bool b_stop = false;
  bench->add_option("--model", b_model)->required();
  bench->add_option("--tokenizer", b_tok)->required();
  bench->add_option("--prompt", b_prompt);
  bench->add_option("--tokens", b_opt.n_tokens)->capture_default_str();
  bench->add_option("--threads", b_opt.threads, "OpenMP threads (0 keeps the default)")->capture_default_str();
  bench->add_option("--model-id", b_id);
  bench->add_flag("--stop-at-eos", b_stop);
  bench->callback([&] {
    if (b_stop) b_opt.stop_tokens = {tokenizer::kEosId};
    const auto model = serve::load_predictor(b_model);
    const auto tok = tokenizer::TokenizerModel::load(b_tok);
    const auto r = serve::bench_inference(*model, tok, b_prompt, b_opt, b_id.empty() ? b_model.stem().string() : b_id);
    std::cout << r.to_json().dump() << '\n';
  });

  // serve
  auto* srv = app.add_subcommand("serve", "run the /v1 HTTP API");
  std::string bind = "127.0.0.1:8080";
  fs::path models_dir, ref_dir = fs::path(INDICLM_DATA_DIR) / "reference", scores = "scores.jsonl";
  std::optional<fs::path> ui_dir;
  int threads = 0;
  srv->add_option("--bind", bind, "host:port")->capture_default_str();
  srv->add_option("--models-dir", models_dir, "directory of <id>.plmf + <id>.tok")->required();
  srv->add_option("--threads", threads, "OpenMP threads per request (0 keeps the default)");
  srv->add_option("--ui-dir", ui_dir, "static files served at /");
  srv->add_option("--reference-dir", ref_dir)->capture_default_str();
  srv->add_option("--scores", scores, "score store (JSONL)")->capture_default_str();
  srv->callback([&] {
    const auto colon = bind.rfind(':');
    if (colon == std::string::npos) throw CLI::ValidationError("--bind", "expected host:port");
    const std::string host = bind.substr(0, colon);
    const int port = std::stoi(bind.substr(colon + 1));
    kernels::set_threads(threads);
    serve::ServerOptions opt;
    opt.reference_dir = ref_dir;
    opt.scores_path = scores;
    opt.ui_dir = ui_dir;
    if (const char* t = std::getenv("INDICLM_API_TOKEN"); t && *t) opt.api_token = t;
    serve::Server server(serve::load_registry(models_dir), opt);
    const int bound = server.bind(host, port);
    g_server = &server;
    std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
    std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
    std::cerr << fmt::format("listening on {}:{}\n", host, bound);
    server.run();
    g_server = nullptr;
  });

  // eval-ppl
  auto* ppl = app.add_subcommand("eval-ppl", "perplexity of a checkpoint on a JSONL corpus");
  fs::path p_model, p_tok, p_in;
  std::optional<fs::path> p_baseline;
  std::optional<std::size_t> p_window;
  ppl->add_option("--model", p_model)->required();
  ppl->add_option("--tokenizer", p_tok)->required();
  ppl->add_option("--input", p_in)->required();
  ppl->add_option("--window", p_window, "tokens per window (default: context length)");
  ppl->add_option("--baseline-train", p_baseline, "also report a unigram baseline fit on this JSONL");
  ppl->callback([&] {
    const auto tok = tokenizer::TokenizerModel::load(p_tok);
    const auto params = serve::load_quantized(p_model).dequantize();
    const auto stream = token_stream(tok, corpus::read_jsonl(p_in));
    const auto r = evalkit::perplexity_report(params, stream, p_window.value_or(params.config.context_len),
                                              p_model.stem().string());
    json out = {{"model", r.to_json()}};
    if (p_baseline)
      out["unigram"] = evalkit::unigram_baseline(token_stream(tok, corpus::read_jsonl(*p_baseline)), stream,
                                                 tok.vocab_size()).to_json();
    std::cout << out.dump() << '\n';
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
