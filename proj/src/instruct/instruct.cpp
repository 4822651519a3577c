#include "indiclm/instruct/instruct.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"
#include "indiclm/common/rng.hpp"
#include "indiclm/common/script.hpp"
#include "indiclm/common/utf8.hpp"

namespace indiclm::instruct {
namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

std::string to_string(Source s) {
  switch (s) {
    case Source::human: return "human";
    case Source::translated: return "translated";
    case Source::self_instruct: return "self_instruct";
  }
  return "human";
}

Source parse_source(std::string_view s) {
  if (s == "human") return Source::human;
  if (s == "translated") return Source::translated;
  if (s == "self_instruct") return Source::self_instruct;
  throw FormatError(fmt::format("unknown instruction source '{}'", s));
}

bool valid_language_tag(std::string_view tag) {
  static const std::regex re("^[a-z]{2,3}(-[A-Za-z0-9]{2,8})*$");
  return std::regex_match(tag.begin(), tag.end(), re);
}

void InstructionExample::validate() const {
  if (trim(instruction).empty()) throw FormatError("instruction is empty");
  if (trim(response).empty()) throw FormatError("response is empty");
  if (!valid_language_tag(language)) throw FormatError(fmt::format("invalid language tag '{}'", language));
  if (!utf8::is_valid(instruction) || !utf8::is_valid(response) || (input && !utf8::is_valid(*input)))
    throw FormatError("instruction record is not valid UTF-8");
}

nlohmann::json InstructionExample::to_json() const {
  return {{"instruction", instruction}, {"input", input.value_or("")}, {"output", response},
          {"lang", language},           {"source", to_string(source)}};
}

InstructionExample InstructionExample::from_json(const nlohmann::json& j) {
  InstructionExample ex;
  try {
    ex.instruction = j.at("instruction").get<std::string>();
    if (j.contains("input") && !j["input"].is_null()) {
      auto in = j["input"].get<std::string>();
      if (!in.empty()) ex.input = std::move(in);
    }
    ex.response = j.at("output").get<std::string>();
    ex.language = j.at("lang").get<std::string>();
    if (j.contains("source")) ex.source = parse_source(j["source"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad instruction record: {}", e.what()));
  }
  ex.validate();
  return ex;
}

std::vector<InstructionExample> read_instructions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<InstructionExample> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(InstructionExample::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(fmt::format("{}:{}: {}", path.string(), n, e.what()));
    } catch (const FormatError& e) {
      throw FormatError(fmt::format("{}:{}: {}", path.string(), n, e.what()));
    }
  }
  return out;
}

void write_instructions(const std::filesystem::path& path, const std::vector<InstructionExample>& examples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : examples) out << ex.to_json().dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void PromptTemplate::validate() const {
  if (name.empty()) throw ConfigError("template name is empty");
  if (header_instruction.empty() || header_input.empty() || header_response.empty())
    throw ConfigError(fmt::format("template {}: headers must be nonempty", name));
  if (separator.empty()) throw ConfigError(fmt::format("template {}: separator is empty", name));
  if (header_instruction == header_input || header_instruction == header_response || header_input == header_response)
    throw ConfigError(fmt::format("template {}: headers must differ", name));
}

const std::vector<PromptTemplate>& builtin_templates() {
  static const std::vector<PromptTemplate> t = {
      {"bn", "### নির্দেশ: ", "ইনপুট:\n", "উত্তর: ", "\n\n"},
      {"hi", "### अनुदेश: ", "इनपुट:\n", "उत्तर: ", "\n\n"},
      {"ta", "அறிவுறுத்தல்: ", "உள்ளீடு:\n", "பதில்: ", "\n\n"},
      {"te", "సూచన: ", "ఇన్పుట్:\n", "సమాధానం: ", "\n\n"},
      {"default", "### Instruction: ", "### Input:\n", "### Response: ", "\n\n"},
  };
  return t;
}

const PromptTemplate& find_template(std::string_view name) {
  for (const auto& t : builtin_templates())
    if (t.name == name) return t;
  throw ConfigError(fmt::format("unknown prompt template '{}'", name));
}

RenderedPrompt render_prompt(const InstructionExample& ex, const PromptTemplate& tmpl, bool include_response) {
  RenderedPrompt r;
  auto put = [&](const std::string& s) {
    Span sp{r.text.size(), r.text.size() + s.size()};
    r.text += s;
    return sp;
  };
  put(tmpl.header_instruction);
  r.instruction = put(ex.instruction);
  put(tmpl.separator);
  if (ex.input) {
    put(tmpl.header_input);
    r.input = put(*ex.input);
    put(tmpl.separator);
  } else {
    r.input = {r.text.size(), r.text.size()};
  }
  put(tmpl.header_response);
  r.response = include_response ? put(ex.response) : Span{r.text.size(), r.text.size()};
  return r;
}

std::optional<InstructionExample> parse_rendered(std::string_view text, const PromptTemplate& tmpl,
                                                 const std::string& language) {
  const auto hr = text.find(tmpl.header_response);
  if (hr == std::string_view::npos) return std::nullopt;
  std::string_view head = text.substr(0, hr);
  std::string_view tail = text.substr(hr + tmpl.header_response.size());
  if (auto next = tail.find(tmpl.header_instruction); next != std::string_view::npos) tail = tail.substr(0, next);
  InstructionExample ex;
  ex.language = language;
  ex.source = Source::self_instruct;
  if (auto hi = head.find(tmpl.header_input); hi != std::string_view::npos) {
    ex.instruction = trim(head.substr(0, hi));
    auto in = trim(head.substr(hi + tmpl.header_input.size()));
    if (!in.empty()) ex.input = std::move(in);
  } else {
    ex.instruction = trim(head);
  }
  ex.response = trim(tail);
  if (ex.instruction.empty() || ex.response.empty()) return std::nullopt;
  return ex;
}

std::optional<train::SftExample> encode_sft(const tokenizer::TokenizerModel& tok, const InstructionExample& ex,
                                            const PromptTemplate& tmpl, std::size_t context_len,
                                            SftEncodeStats* stats) {
  using lm::TokenId;
  const auto head = tok.encode(tmpl.header_instruction);
  auto instr = tok.encode(ex.instruction);
  const auto mid = tok.encode(tmpl.separator + (ex.input ? tmpl.header_input : std::string()));
  auto input = ex.input ? tok.encode(*ex.input) : std::vector<TokenId>{};
  const auto tail = tok.encode((ex.input ? tmpl.separator : std::string()) + tmpl.header_response);
  const auto resp = tok.encode(ex.response);

  const std::size_t limit = context_len + 1;
  std::size_t total = 2 + head.size() + instr.size() + mid.size() + input.size() + tail.size() + resp.size();
  if (total > limit && !input.empty()) {
    const std::size_t cut = std::min(total - limit, input.size());
    input.erase(input.begin(), input.begin() + static_cast<std::ptrdiff_t>(cut));
    total -= cut;
    if (stats) ++stats->truncated_input;
  }
  if (total > limit && !instr.empty()) {
    const std::size_t cut = std::min(total - limit, instr.size());
    instr.erase(instr.begin(), instr.begin() + static_cast<std::ptrdiff_t>(cut));
    total -= cut;
    if (stats) ++stats->truncated_instruction;
  }
  if (total > limit) {
    if (stats) ++stats->skipped;
    return std::nullopt;
  }
  train::SftExample out;
  out.tokens.reserve(total);
  out.tokens.push_back(tokenizer::kBosId);
  using Piece = const std::vector<TokenId>*;
  for (Piece part : std::initializer_list<Piece>{&head, &instr, &mid, &input, &tail})
    out.tokens.insert(out.tokens.end(), part->begin(), part->end());
  out.mask.assign(out.tokens.size(), 0);
  out.tokens.insert(out.tokens.end(), resp.begin(), resp.end());
  out.tokens.push_back(tokenizer::kEosId);
  out.mask.resize(out.tokens.size(), 1);
  return out;
}

MockTranslationClient::MockTranslationClient(double calls_per_second, Fn fn, FailFn fail)
    : rate_(calls_per_second), fn_(std::move(fn)), fail_(std::move(fail)) {}

std::string MockTranslationClient::translate(const std::string& text, const std::string& source_lang,
                                             const std::string& target_lang) {
  const std::size_t call = calls_++;
  if (fail_ && fail_(call, text)) throw TranslationError(fmt::format("mock failure on call {}", call));
  return fn_ ? fn_(text, source_lang, target_lang) : text;
}

HttpTranslationClient::HttpTranslationClient(std::string url, double calls_per_second, std::string api_key_env,
                                             std::chrono::milliseconds timeout)
    : rate_(calls_per_second), timeout_(timeout) {
  static const std::regex re(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ConfigError(fmt::format("unsupported translation URL '{}'", url));
  host_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/translate";
  if (!(rate_ > 0)) throw ConfigError("translation rate limit must be positive");
  if (!api_key_env.empty())
    if (const char* k = std::getenv(api_key_env.c_str())) api_key_ = k;
}

}  // namespace indiclm::instruct

#include <httplib.h>

namespace indiclm::instruct {

std::string HttpTranslationClient::translate(const std::string& text, const std::string& source_lang,
                                             const std::string& target_lang) {
  httplib::Client cli(host_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  cli.set_connection_timeout(secs);
  cli.set_read_timeout(secs);
  nlohmann::json body = {{"q", text}, {"source", source_lang}, {"target", target_lang}};
  if (!api_key_.empty()) body["api_key"] = api_key_;
  auto res = cli.Post(path_, body.dump(), "application/json");
  if (!res) throw TranslationError(fmt::format("translation request failed: {}", httplib::to_string(res.error())));
  if (res->status != 200) throw TranslationError(fmt::format("translation service returned HTTP {}", res->status));
  try {
    return nlohmann::json::parse(res->body).at("translatedText").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw TranslationError(fmt::format("bad translation response: {}", e.what()));
  }
}

TranslateResult translate_dataset(const std::vector<InstructionExample>& examples, TranslationClient& client,
                                  const std::string& target_lang, const TranslateOptions& opt) {
  if (!valid_language_tag(target_lang)) throw ConfigError(fmt::format("invalid target language '{}'", target_lang));
  if (opt.max_attempts == 0) throw ConfigError("max_attempts must be positive");
  const double rate = client.max_calls_per_second();
  const auto interval = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(1.0 / rate));
  auto sleep = [&](Clock::duration d) {
    if (d <= Clock::duration::zero()) return;
    if (opt.sleep)
      opt.sleep(d);
    else
      std::this_thread::sleep_for(d);
  };
  std::optional<Clock::time_point> next_slot;
  auto call = [&](const std::string& text) {
    if (next_slot) {
      const auto now = opt.now();
      if (now < *next_slot) sleep(*next_slot - now);
    }
    next_slot = opt.now() + interval;
    return client.translate(text, opt.source_lang, target_lang);
  };

  TranslateResult res;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& src = examples[i];
    InstructionExample out = src;
    out.language = target_lang;
    out.source = Source::translated;
    std::optional<TranslateFailure> failure;
    auto field = [&](const char* name, const std::string& text) -> std::string {
      std::string last_error;
      for (std::size_t a = 1; a <= opt.max_attempts; ++a) {
        try {
          return call(text);
        } catch (const std::exception& e) {
          last_error = e.what();
        }
        if (a < opt.max_attempts) {
          auto backoff = opt.base_backoff * (1LL << std::min<std::size_t>(a - 1, 30));
          sleep(std::min<Clock::duration>(backoff, opt.max_backoff));
        }
      }
      failure = TranslateFailure{i, name, last_error, opt.max_attempts};
      return {};
    };
    out.instruction = field("instruction", src.instruction);
    if (!failure && src.input) out.input = field("input", *src.input);
    if (!failure) out.response = field("response", src.response);
    if (failure)
      res.failures.push_back(*failure);
    else
      res.examples.push_back(std::move(out));
  }
  if (!examples.empty() && res.examples.empty()) {
    std::string msg = fmt::format("all {} records failed to translate:", examples.size());
    for (const auto& f : res.failures) msg += fmt::format("\n  record {} ({}): {}", f.index, f.field, f.error);
    throw TranslationError(msg);
  }
  return res;
}

std::vector<std::string> word_ngrams(std::string_view text, std::size_t n) {
  static const std::u32string strip = U"।॥.,?!:;\"'()[]";
  std::vector<std::string> words;
  std::u32string cur;
  auto flush = [&] {
    std::size_t b = 0, e = cur.size();
    while (b < e && strip.find(cur[b]) != std::u32string::npos) ++b;
    while (e > b && strip.find(cur[e - 1]) != std::u32string::npos) --e;
    if (e > b) {
      std::u32string w = cur.substr(b, e - b);
      for (auto& c : w)
        if (c < 128) c = static_cast<char32_t>(std::tolower(static_cast<int>(c)));
      words.push_back(utf8::encode(w));
    }
    cur.clear();
  };
  for (char32_t c : utf8::decode(text)) {
    if (is_unicode_space(c))
      flush();
    else
      cur.push_back(c);
  }
  flush();
  std::vector<std::string> grams;
  if (words.empty()) return grams;
  if (n == 0) n = 1;
  if (words.size() < n) {
    std::string all = words[0];
    for (std::size_t i = 1; i < words.size(); ++i) all += ' ' + words[i];
    grams.push_back(std::move(all));
    return grams;
  }
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    std::string g = words[i];
    for (std::size_t k = 1; k < n; ++k) g += ' ' + words[i + k];
    grams.push_back(std::move(g));
  }
  return grams;
}

double ngram_jaccard(std::string_view a, std::string_view b, std::size_t n) {
  const auto ga = word_ngrams(a, n), gb = word_ngrams(b, n);
  const std::set<std::string> sa(ga.begin(), ga.end()), sb(gb.begin(), gb.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (const auto& g : sa) inter += sb.count(g);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

SelfInstructResult self_instruct(const TextGenerator& generate, const std::vector<InstructionExample>& seed_tasks,
                                 const PromptTemplate& tmpl, const SelfInstructOptions& opt) {
  if (seed_tasks.empty()) throw std::invalid_argument("self-instruct needs at least one seed task");
  if (!(opt.similarity_threshold > 0 && opt.similarity_threshold <= 1))
    throw ConfigError("similarity_threshold must be in (0, 1]");
  if (!valid_language_tag(opt.language)) throw ConfigError(fmt::format("invalid language '{}'", opt.language));
  tmpl.validate();
  const std::size_t budget = opt.max_attempts ? opt.max_attempts : 10 * opt.count;
  std::vector<InstructionExample> pool = seed_tasks;
  SelfInstructResult res;
  Rng rng(opt.seed);
  while (res.examples.size() < opt.count && res.stats.attempts < budget) {
    const std::size_t attempt = res.stats.attempts++;
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    shuffle(idx, rng);
    idx.resize(std::min(opt.examples_per_prompt, idx.size()));
    std::string prompt;
    for (std::size_t i : idx) prompt += render_prompt(pool[i], tmpl, true).text + tmpl.separator;
    prompt += tmpl.header_instruction;

    auto cand = parse_rendered(generate(prompt, attempt), tmpl, opt.language);
    if (!cand) {
      ++res.stats.unparseable;
      continue;
    }
    double worst = 0;
    for (const auto& p : pool) worst = std::max(worst, ngram_jaccard(cand->instruction, p.instruction));
    if (worst >= opt.similarity_threshold) {
      ++res.stats.too_similar;
      continue;
    }
    pool.push_back(*cand);
    res.examples.push_back(std::move(*cand));
  }
  res.stats.accepted = res.examples.size();
  if (res.examples.empty())
    throw std::runtime_error(fmt::format(
        "self-instruct accepted nothing after {} attempts ({} unparseable, {} above similarity {})",
        res.stats.attempts, res.stats.unparseable, res.stats.too_similar, opt.similarity_threshold));
  return res;
}

SelfInstructResult self_instruct_generate(const lm::TokenPredictor& model, const tokenizer::TokenizerModel& tok,
                                          const std::vector<InstructionExample>& seed_tasks,
                                          const PromptTemplate& tmpl, const decode::SamplerConfig& sampler,
                                          const SelfInstructOptions& options) {
  const std::size_t ctx = model.config().context_len;
  const std::size_t reserve = std::min(sampler.max_new_tokens, ctx / 2);
  const TextGenerator gen = [&](const std::string& prompt, std::size_t attempt) {
    std::vector<lm::TokenId> ids{tokenizer::kBosId};
    auto body = tok.encode(prompt);
    const std::size_t room = ctx - reserve - 1;
    if (body.size() > room) body.erase(body.begin(), body.end() - static_cast<std::ptrdiff_t>(room));
    ids.insert(ids.end(), body.begin(), body.end());
    return tok.decode(decode::generate_ids(model, ids, sampler, attempt));
  };
  return self_instruct(gen, seed_tasks, tmpl, options);
}

nlohmann::json DatasetManifest::to_json() const {
  return {{"input_counts", input_counts},
          {"kept_counts", kept_counts},
          {"dropped_duplicates", dropped_duplicates},
          {"total", total},
          {"seed", seed}};
}

BuiltDataset build_dataset(const std::vector<InstructionExample>& human,
                           const std::vector<InstructionExample>& translated,
                           const std::vector<InstructionExample>& self_gen, std::uint64_t seed) {
  BuiltDataset out;
  auto& m = out.manifest;
  m.seed = seed;
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  const std::pair<Source, const std::vector<InstructionExample>*> parts[] = {
      {Source::human, &human}, {Source::translated, &translated}, {Source::self_instruct, &self_gen}};
  for (const auto& [source, list] : parts) {
    const auto key_name = to_string(source);
    m.input_counts[key_name] = list->size();
    m.kept_counts[key_name] = 0;
    m.dropped_duplicates[key_name] = 0;
    for (const auto& ex : *list) {
      if (seen.emplace(ex.instruction, ex.input.value_or(""), ex.response).second) {
        out.examples.push_back(ex);
        ++m.kept_counts[key_name];
      } else {
        ++m.dropped_duplicates[key_name];
      }
    }
  }
  Rng rng(seed);
  shuffle(out.examples, rng);
  m.total = out.examples.size();
  return out;
}

}  // namespace indiclm::instruct
