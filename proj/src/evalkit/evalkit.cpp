#include "indiclm/evalkit/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"

namespace indiclm::evalkit {
namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cell;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(cell));
      cell.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !cell.empty()) {
        row.push_back(std::move(cell));
        rows.push_back(std::move(row));
      }
      row.clear();
      cell.clear();
      any = false;
    } else {
      cell += c;
      any = true;
    }
  }
  if (quoted) throw FormatError("unterminated quoted CSV field");
  if (any || !cell.empty()) {
    row.push_back(std::move(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

double parse_double(const std::string& s, const char* what) {
  double v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw FormatError(fmt::format("bad {} value '{}'", what, s));
  return v;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace

nlohmann::json GenerationRecord::to_json() const {
  return {{"prompt_id", ref.prompt_id}, {"model_id", ref.model_id}, {"sample_index", ref.sample_index},
          {"prompt", prompt},           {"text", text},             {"sampler", sampler}};
}

GenerationRecord GenerationRecord::from_json(const nlohmann::json& j) {
  GenerationRecord r;
  try {
    r.ref.prompt_id = j.at("prompt_id").get<std::string>();
    r.ref.model_id = j.at("model_id").get<std::string>();
    r.ref.sample_index = j.at("sample_index").get<std::size_t>();
    r.prompt = j.value("prompt", "");
    r.text = j.value("text", "");
    if (j.contains("sampler")) r.sampler = j["sampler"];
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad generation record: {}", e.what()));
  }
  return r;
}

std::string HumanScore::id() const {
  return fmt::format("{}/{}/{}/{}", evaluator_id, ref.model_id, ref.prompt_id, ref.sample_index);
}

void HumanScore::validate() const {
  if (ref.prompt_id.empty()) throw std::invalid_argument("prompt_id is empty");
  if (ref.model_id.empty()) throw std::invalid_argument("model_id is empty");
  if (evaluator_id.empty()) throw std::invalid_argument("evaluator_id is empty");
  for (std::size_t m = 0; m < kMetrics.size(); ++m)
    if (!(metrics[m] >= kMinScore && metrics[m] <= kMaxScore))
      throw std::invalid_argument(fmt::format("{} = {} is outside [{}, {}]", kMetrics[m], metrics[m], kMinScore, kMaxScore));
}

nlohmann::json HumanScore::to_json() const {
  nlohmann::json j = {{"prompt_id", ref.prompt_id},
                      {"model_id", ref.model_id},
                      {"sample_index", ref.sample_index},
                      {"evaluator_id", evaluator_id}};
  for (std::size_t m = 0; m < kMetrics.size(); ++m) j[kMetrics[m]] = metrics[m];
  if (note) j["note"] = *note;
  return j;
}

HumanScore HumanScore::from_json(const nlohmann::json& j) {
  HumanScore s;
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!j.is_object() || !j.contains(key)) throw std::invalid_argument(fmt::format("missing field {}", key));
    return j[key];
  };
  try {
    s.ref.prompt_id = field("prompt_id").get<std::string>();
    s.ref.model_id = field("model_id").get<std::string>();
    s.ref.sample_index = field("sample_index").get<std::size_t>();
    s.evaluator_id = field("evaluator_id").get<std::string>();
    for (std::size_t m = 0; m < kMetrics.size(); ++m) {
      const auto& v = field(kMetrics[m]);
      if (!v.is_number()) throw std::invalid_argument(fmt::format("{} must be a number", kMetrics[m]));
      s.metrics[m] = v.get<double>();
    }
    if (j.contains("note") && !j["note"].is_null()) s.note = j["note"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(fmt::format("bad score record: {}", e.what()));
  }
  s.validate();
  return s;
}

const EvalRow* EvalTable::find(std::string_view model) const {
  for (const auto& r : rows)
    if (r.model == model) return &r;
  return nullptr;
}

EvalTable aggregate_scores(std::span<const HumanScore> scores, std::size_t n) {
  if (n == 0) throw std::invalid_argument("n must be positive");
  // model -> prompt -> evaluator -> sample -> score
  std::map<std::string, std::map<std::string, std::map<std::string, std::map<std::size_t, const HumanScore*>>>> g;
  std::vector<std::string> gaps;
  for (const auto& s : scores) {
    s.validate();
    auto& slot = g[s.ref.model_id][s.ref.prompt_id][s.evaluator_id][s.ref.sample_index];
    if (slot) gaps.push_back(fmt::format("{}: scored twice", s.id()));
    slot = &s;
  }
  EvalTable table;
  for (const auto& [model, prompts] : g) {
    EvalRow row;
    row.model = model;
    auto& prov = table.provenance[model];
    for (const auto& [prompt, evaluators] : prompts) {
      std::array<double, 4> prompt_mean{};
      for (const auto& [evaluator, samples] : evaluators) {
        std::vector<std::size_t> missing;
        for (std::size_t i = 0; i < n; ++i)
          if (!samples.count(i)) missing.push_back(i);
        for (const auto& [i, s] : samples)
          if (i >= n) gaps.push_back(fmt::format("{}: sample index beyond n = {}", s->id(), n));
        if (!missing.empty())
          gaps.push_back(fmt::format("model {} prompt {} evaluator {}: missing samples {}", model, prompt, evaluator,
                                     fmt::join(missing, ",")));
        std::array<double, 4> mean{};
        for (const auto& [i, s] : samples) {
          prov.push_back(s->id());
          for (std::size_t m = 0; m < 4; ++m) mean[m] += s->metrics[m];
        }
        for (std::size_t m = 0; m < 4; ++m) prompt_mean[m] += mean[m] / static_cast<double>(n);
      }
      for (std::size_t m = 0; m < 4; ++m) row.values[m] += prompt_mean[m] / static_cast<double>(evaluators.size());
    }
    for (std::size_t m = 0; m < 4; ++m) row.values[m] /= static_cast<double>(prompts.size());
    std::sort(prov.begin(), prov.end());
    table.rows.push_back(row);
  }
  if (!gaps.empty()) throw std::invalid_argument(fmt::format("incomplete scores:\n  {}", fmt::join(gaps, "\n  ")));
  return table;
}

double normalize_score(double a, double a_min, double a_max) {
  if (!(a_max > a_min) || !std::isfinite(a_min) || !std::isfinite(a_max))
    throw std::invalid_argument(fmt::format("degenerate range [{}, {}]", a_min, a_max));
  if (!(a >= a_min && a <= a_max)) throw std::invalid_argument(fmt::format("{} outside [{}, {}]", a, a_min, a_max));
  return (a - a_min) / (a_max - a_min);
}

std::string format_score(double v) {
  std::string s = fmt::format("{:.5f}", v);
  if (std::stod(s) == v) return s;
  return fmt::format("{}", v);
}

std::string export_csv(const EvalTable& table) {
  std::string out = "model";
  for (const char* m : kMetrics) out += fmt::format(",{}", m);
  out += '\n';
  for (const auto& r : table.rows) {
    out += csv_field(r.model);
    for (double v : r.values) out += ',' + format_score(v);
    out += '\n';
  }
  return out;
}

EvalTable import_csv(std::string_view csv) {
  const auto rows = parse_csv(csv);
  if (rows.empty()) throw FormatError("empty CSV");
  const std::vector<std::string> header{"model", "grammar", "coherence", "creativity", "factuality"};
  if (rows[0] != header) throw FormatError("unexpected CSV header");
  EvalTable t;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 5) throw FormatError(fmt::format("CSV row {} has {} fields", i + 1, rows[i].size()));
    EvalRow r;
    r.model = rows[i][0];
    for (std::size_t m = 0; m < 4; ++m) r.values[m] = parse_double(rows[i][m + 1], kMetrics[m]);
    t.rows.push_back(std::move(r));
  }
  return t;
}

void export_eval(const EvalTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << export_csv(table);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ScoreStore::ScoreStore(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ifstream in(path_);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      scores_.push_back(HumanScore::from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError(fmt::format("{}:{}: {}", path_.string(), n, e.what()));
    }
  }
}

void ScoreStore::append(const HumanScore& score) {
  score.validate();
  std::lock_guard lock(mu_);
  std::ofstream out(path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path_.string());
  out << score.to_json().dump() << '\n' << std::flush;
  if (!out) throw std::runtime_error("append failed: " + path_.string());
  scores_.push_back(score);
}

std::vector<HumanScore> ScoreStore::all() const {
  std::lock_guard lock(mu_);
  return scores_;
}

std::vector<HumanScore> ScoreStore::latest() const {
  std::lock_guard lock(mu_);
  std::map<std::string, std::size_t> last;
  for (std::size_t i = 0; i < scores_.size(); ++i) last[scores_[i].id()] = i;
  std::vector<std::size_t> idx;
  for (const auto& [id, i] : last) idx.push_back(i);
  std::sort(idx.begin(), idx.end());
  std::vector<HumanScore> out;
  for (std::size_t i : idx) out.push_back(scores_[i]);
  return out;
}

nlohmann::json PerplexityReport::to_json() const {
  return {{"model_id", model_id}, {"mean_nll", mean_nll}, {"perplexity", perplexity}, {"tokens", tokens},
          {"elapsed_s", elapsed_s}};
}

PerplexityReport perplexity_report(const lm::Parameters& params, std::span<const TokenId> stream, std::size_t window,
                                   const std::string& model_id) {
  if (window == 0 || window > params.config.context_len)
    throw std::invalid_argument(fmt::format("window must be in [1, {}]", params.config.context_len));
  if (stream.size() < 2) throw std::invalid_argument("need at least two tokens to score");
  const auto t0 = std::chrono::steady_clock::now();
  double nll = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 1 < stream.size(); start += window) {
    const std::size_t len = std::min(window, stream.size() - 1 - start);
    const auto out = lm::forward(params, stream.subspan(start, len), stream.subspan(start + 1, len));
    nll += static_cast<double>(out.loss) * static_cast<double>(len);
    count += len;
  }
  PerplexityReport r;
  r.model_id = model_id;
  r.tokens = count;
  r.mean_nll = nll / static_cast<double>(count);
  r.perplexity = lm::perplexity(r.mean_nll);
  r.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

PerplexityReport unigram_baseline(std::span<const TokenId> train, std::span<const TokenId> eval,
                                  std::size_t vocab_size) {
  if (vocab_size == 0) throw std::invalid_argument("vocab_size must be positive");
  if (eval.size() < 2) throw std::invalid_argument("need at least two tokens to score");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> counts(vocab_size, 1.0);
  for (TokenId id : train) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) throw std::invalid_argument("train id out of range");
    counts[id] += 1.0;
  }
  const double total = static_cast<double>(train.size() + vocab_size);
  double nll = 0;
  for (std::size_t i = 1; i < eval.size(); ++i) {
    const TokenId id = eval[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) throw std::invalid_argument("eval id out of range");
    nll -= std::log(counts[id] / total);
  }
  PerplexityReport r;
  r.model_id = "unigram";
  r.tokens = eval.size() - 1;
  r.mean_nll = nll / static_cast<double>(r.tokens);
  r.perplexity = lm::perplexity(r.mean_nll);
  r.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

const std::vector<std::string>* ReferenceTable::row(std::string_view key) const {
  for (const auto& r : rows)
    if (!r.empty() && r[0] == key) return &r;
  return nullptr;
}

nlohmann::json ReferenceTable::to_json() const {
  nlohmann::json out_rows = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json o = nlohmann::json::object();
    for (std::size_t c = 0; c < columns.size(); ++c) o[columns[c]] = r[c];
    out_rows.push_back(std::move(o));
  }
  return {{"id", id}, {"table_number", table_number}, {"title", title}, {"key_column", key_column},
          {"columns", columns}, {"rows", out_rows}};
}

std::vector<ReferenceTable> load_reference_tables(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("missing reference manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad reference manifest: {}", e.what()));
  }
  std::vector<ReferenceTable> out;
  try {
    for (const auto& entry : manifest.at("tables")) {
      ReferenceTable t;
      t.id = entry.at("id").get<std::string>();
      t.table_number = entry.at("table_number").get<int>();
      t.title = entry.at("title").get<std::string>();
      t.key_column = entry.at("key_column").get<std::string>();
      const auto file = dir / entry.at("file").get<std::string>();
      std::ifstream in(file);
      if (!in) throw FormatError("missing reference table " + file.string());
      std::string line;
      bool header = true;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split_tabs(line);
        if (header) {
          t.columns = std::move(cells);
          header = false;
          continue;
        }
        if (cells.size() != t.columns.size())
          throw FormatError(fmt::format("{}: row with {} cells, expected {}", file.string(), cells.size(), t.columns.size()));
        t.rows.push_back(std::move(cells));
      }
      if (t.columns.empty() || t.columns[0] != t.key_column)
        throw FormatError(fmt::format("{}: first column must be {}", file.string(), t.key_column));
      out.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad reference manifest: {}", e.what()));
  }
  return out;
}

}  // namespace indiclm::evalkit
