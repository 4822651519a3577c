#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"
#include "indiclm/common/rng.hpp"
#include "indiclm/common/utf8.hpp"
#include "indiclm/corpus/corpus.hpp"

namespace indiclm::corpus {

std::vector<RawDocument> deduplicate(const std::vector<RawDocument>& docs, const DedupOptions& options) {
  std::unordered_set<std::string> seen_docs;
  std::unordered_set<std::string> seen_lines;
  std::vector<RawDocument> out;
  for (const auto& doc : docs) {
    if (!seen_docs.insert(doc.text).second) continue;
    if (!options.line_level) {
      out.push_back(doc);
      continue;
    }
    RawDocument kept = doc;
    kept.text.clear();
    std::size_t start = 0;
    while (start <= doc.text.size()) {
      std::size_t end = doc.text.find('\n', start);
      if (end == std::string::npos) end = doc.text.size();
      std::string line = doc.text.substr(start, end - start);
      if (!line.empty() && seen_lines.insert(line).second) {
        if (!kept.text.empty()) kept.text += '\n';
        kept.text += line;
      }
      start = end + 1;
    }
    if (!kept.text.empty()) out.push_back(std::move(kept));
  }
  return out;
}

TrainValSplit split_train_val(const std::vector<RawDocument>& docs, const SplitSpec& spec) {
  if (docs.empty()) throw std::invalid_argument("cannot split an empty corpus");
  if (!(spec.train_fraction >= 0.0 && spec.train_fraction <= 1.0))
    throw std::invalid_argument(fmt::format("train_fraction {} outside [0, 1]", spec.train_fraction));
  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(spec.seed);
  shuffle(order, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(docs.size())));
  std::vector<bool> is_train(docs.size(), false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;
  TrainValSplit split;
  for (std::size_t i = 0; i < docs.size(); ++i) (is_train[i] ? split.train : split.val).push_back(docs[i]);
  return split;
}

nlohmann::json CorpusStats::to_json() const {
  return {{"input_documents", input_documents},
          {"output_documents", output_documents},
          {"total_codepoints", total_codepoints},
          {"codepoints_by_script", codepoints_by_script},
          {"dedup_ratio", dedup_ratio}};
}

CorpusStats compute_stats(const std::vector<RawDocument>& docs, std::size_t input_documents, std::size_t before_dedup) {
  CorpusStats s;
  s.input_documents = input_documents;
  s.output_documents = docs.size();
  const auto& profiles = default_script_profiles();
  for (const auto& doc : docs) {
    for (char32_t cp : utf8::decode(doc.text)) {
      if (is_unicode_space(cp)) continue;
      ++s.total_codepoints;
      ++s.codepoints_by_script[std::string(script_of(cp, profiles))];
    }
  }
  if (before_dedup > 0)
    s.dedup_ratio = static_cast<double>(before_dedup - std::min(before_dedup, docs.size())) /
                    static_cast<double>(before_dedup);
  return s;
}

void validate_corpus(const std::vector<RawDocument>& docs) {
  std::set<std::string> ids;
  for (const auto& doc : docs) {
    if (doc.id.empty()) throw FormatError("document with empty id");
    if (!ids.insert(doc.id).second) throw FormatError(fmt::format("duplicate document id '{}'", doc.id));
    if (!utf8::is_valid(doc.text)) throw FormatError(fmt::format("document '{}' is not valid UTF-8", doc.id));
  }
}

std::vector<RawDocument> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  std::vector<RawDocument> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RawDocument d;
      d.id = j.contains("id") ? j.at("id").get<std::string>() : fmt::format("line-{}", lineno);
      d.language = j.value("language", "");
      d.script = j.value("script", "");
      d.text = j.at("text").get<std::string>();
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
  return docs;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<RawDocument>& docs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  for (const auto& d : docs) {
    nlohmann::json j = {{"id", d.id}, {"language", d.language}, {"script", d.script}, {"text", d.text}};
    out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  }
}

std::vector<RawDocument> read_text_dir(const std::filesystem::path& dir, const std::string& language,
                                       const std::string& script) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<RawDocument> docs;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    docs.push_back({f.stem().string(), language, script, std::move(text)});
  }
  return docs;
}

}  // namespace indiclm::corpus
