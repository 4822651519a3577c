#include "indiclm/tokenizer/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"
#include "indiclm/common/utf8.hpp"

namespace indiclm::tokenizer {
namespace {

constexpr std::string_view kMagic = "#indiclm-tokenizer";
constexpr std::string_view kWhitespaceClass = "\x01ws";

bool is_joiner(char32_t cp) { return cp == 0x200C || cp == 0x200D; }

// Token text as it appears in the file: valid UTF-8 is kept, except control
// bytes, space, DEL and backslash; everything else becomes \xHH.
std::string escape(std::string_view s) {
  std::string out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const std::size_t len = utf8::valid_sequence_length(s, pos);
    const auto b = static_cast<unsigned char>(s[pos]);
    if (len == 0 || (len == 1 && (b < 0x21 || b == 0x7F || b == '\\'))) {
      out += fmt::format("\\x{:02X}", b);
      ++pos;
      continue;
    }
    out.append(s.substr(pos, len));
    pos += len;
  }
  return out;
}

std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 4 > s.size() || s[i + 1] != 'x') throw FormatError(fmt::format("bad escape in token '{}'", s));
    unsigned v = 0;
    for (int k = 2; k <= 3; ++k) {
      const char c = s[i + k];
      v <<= 4;
      if (c >= '0' && c <= '9')
        v |= static_cast<unsigned>(c - '0');
      else if (c >= 'A' && c <= 'F')
        v |= static_cast<unsigned>(c - 'A' + 10);
      else if (c >= 'a' && c <= 'f')
        v |= static_cast<unsigned>(c - 'a' + 10);
      else
        throw FormatError(fmt::format("bad escape in token '{}'", s));
    }
    out += static_cast<char>(v);
    i += 3;
  }
  return out;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return out;
}

long long parse_int(std::string_view s, std::string_view what) {
  long long v = 0;
  if (s.empty()) throw FormatError(fmt::format("empty {}", what));
  bool neg = false;
  std::size_t i = 0;
  if (s[0] == '-') {
    neg = true;
    i = 1;
  }
  if (i == s.size()) throw FormatError(fmt::format("bad {} '{}'", what, s));
  for (; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') throw FormatError(fmt::format("bad {} '{}'", what, s));
    v = v * 10 + (s[i] - '0');
    if (v > std::numeric_limits<std::int32_t>::max()) throw FormatError(fmt::format("{} out of range", what));
  }
  return neg ? -v : v;
}

}  // namespace

TokenizerModel::TokenizerModel(bool byte_fallback, SpecialTokens specials, std::vector<ScriptProfile> scripts,
                               const std::vector<std::string>& alphabet)
    : byte_fallback_(byte_fallback), specials_(std::move(specials)), scripts_(std::move(scripts)) {
  for (const auto& p : scripts_) validate_profile(p);
  vocab_ = {specials_.pad, specials_.unk, specials_.bos, specials_.eos};
  if (byte_fallback_) {
    for (int b = 0; b < 256; ++b) vocab_.emplace_back(1, static_cast<char>(b));
  } else {
    for (const auto& a : alphabet) {
      if (a.empty() || utf8::valid_sequence_length(a, 0) != a.size())
        throw std::invalid_argument("alphabet entries must be single codepoints");
      vocab_.push_back(a);
    }
  }
  base_size_ = vocab_.size();
  for (std::size_t i = kNumSpecials; i < vocab_.size(); ++i) {
    if (!index_.emplace(vocab_[i], static_cast<TokenId>(i)).second)
      throw std::invalid_argument(fmt::format("duplicate base token '{}'", escape(vocab_[i])));
  }
}

const std::string& TokenizerModel::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size())
    throw std::out_of_range(fmt::format("token id {} outside vocabulary of {}", id, vocab_.size()));
  return vocab_[static_cast<std::size_t>(id)];
}

TokenId TokenizerModel::find(std::string_view t) const {
  const auto it = index_.find(std::string(t));
  return it == index_.end() ? -1 : it->second;
}

TokenId TokenizerModel::add_merge(TokenId left, TokenId right) {
  if (is_special(left) || is_special(right)) throw std::invalid_argument("special tokens cannot be merged");
  const std::string joined = token(left) + token(right);
  const std::uint64_t key = pair_key(left, right);
  if (merge_rank_.count(key)) throw std::invalid_argument(fmt::format("pair '{}' already merged", escape(joined)));
  TokenId out = find(joined);
  if (out < 0) {
    out = static_cast<TokenId>(vocab_.size());
    vocab_.push_back(joined);
    index_.emplace(joined, out);
  }
  merge_rank_.emplace(key, merges_.size());
  merges_.push_back({left, right, out});
  return out;
}

void TokenizerModel::encode_unit(std::string_view unit, std::vector<TokenId>& out) const {
  std::vector<TokenId> sym;
  if (byte_fallback_) {
    for (unsigned char b : unit) sym.push_back(static_cast<TokenId>(kNumSpecials + b));
  } else {
    std::size_t pos = 0;
    while (pos < unit.size()) {
      std::size_t len = utf8::valid_sequence_length(unit, pos);
      if (len == 0) len = 1;
      const TokenId id = find(unit.substr(pos, len));
      sym.push_back(id < 0 ? kUnkId : id);
      pos += len;
    }
  }
  while (sym.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      const auto it = merge_rank_.find(pair_key(sym[i], sym[i + 1]));
      if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const Merge& m = merges_[best_rank];
    std::size_t w = 0;
    for (std::size_t i = 0; i < sym.size(); ++i) {
      if (i + 1 < sym.size() && sym[i] == m.left && sym[i + 1] == m.right) {
        sym[w++] = m.output;
        ++i;
      } else {
        sym[w++] = sym[i];
      }
    }
    sym.resize(w);
  }
  out.insert(out.end(), sym.begin(), sym.end());
}

std::vector<TokenId> TokenizerModel::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto& unit : pretokenize(text, scripts_)) encode_unit(unit, out);
  return out;
}

std::string TokenizerModel::decode(const std::vector<TokenId>& ids) const {
  std::string bytes;
  for (TokenId id : ids) {
    const std::string& t = token(id);
    if (id == kUnkId)
      utf8::append(bytes, utf8::kReplacement);
    else if (!is_special(id))
      bytes += t;
  }
  return utf8::repair(bytes);
}

std::string TokenizerModel::serialize() const {
  std::string out;
  out += fmt::format("{}\nversion\t{}\nbyte_fallback\t{}\nspecials\t{}\t{}\t{}\t{}\n", kMagic, kFormatVersion,
                     byte_fallback_ ? 1 : 0, escape(specials_.pad), escape(specials_.unk), escape(specials_.bos),
                     escape(specials_.eos));
  out += fmt::format("base_size\t{}\n[VOCAB]\n", base_size_);
  for (std::size_t i = 0; i < vocab_.size(); ++i) out += fmt::format("{}\t{}\n", i, escape(vocab_[i]));
  out += "[MERGES]\n";
  for (std::size_t r = 0; r < merges_.size(); ++r)
    out += fmt::format("{}\t{}\t{}\n", r, escape(vocab_[static_cast<std::size_t>(merges_[r].left)]),
                       escape(vocab_[static_cast<std::size_t>(merges_[r].right)]));
  out += "[SCRIPTS]\n";
  for (const auto& s : scripts_) out += fmt::format("{}\t{}\n", s.name, format_ranges(s.ranges));
  out += "[END]\n";
  return out;
}

TokenizerModel TokenizerModel::deserialize(std::string_view text) {
  std::vector<std::string_view> lines;
  {
    std::size_t start = 0;
    while (start < text.size()) {
      std::size_t nl = text.find('\n', start);
      if (nl == std::string_view::npos) nl = text.size();
      lines.push_back(text.substr(start, nl - start));
      start = nl + 1;
    }
  }
  std::size_t li = 0;
  auto next = [&](std::string_view what) -> std::string_view {
    if (li >= lines.size()) throw FormatError(fmt::format("tokenizer file truncated before {}", what));
    return lines[li++];
  };
  if (next("header") != kMagic) throw FormatError("not a tokenizer file");
  auto header = [&](std::string_view key) {
    const auto f = split_tabs(next(key));
    if (f.size() < 2 || f[0] != key) throw FormatError(fmt::format("expected '{}' header", key));
    return f;
  };
  const auto version = parse_int(header("version")[1], "version");
  if (version != kFormatVersion) throw FormatError(fmt::format("unsupported tokenizer version {}", version));
  const auto fb = parse_int(header("byte_fallback")[1], "byte_fallback");
  const auto sp = header("specials");
  if (sp.size() != 5) throw FormatError("specials header needs four tokens");
  SpecialTokens specials{unescape(sp[1]), unescape(sp[2]), unescape(sp[3]), unescape(sp[4])};
  const auto base_size = static_cast<std::size_t>(parse_int(header("base_size")[1], "base_size"));
  if (next("[VOCAB]") != "[VOCAB]") throw FormatError("missing [VOCAB] section");

  std::vector<std::string> vocab;
  while (true) {
    const auto line = next("[MERGES]");
    if (line == "[MERGES]") break;
    const auto f = split_tabs(line);
    if (f.size() != 2) throw FormatError(fmt::format("bad vocab line '{}'", line));
    if (parse_int(f[0], "token id") != static_cast<long long>(vocab.size()))
      throw FormatError(fmt::format("vocab ids not contiguous at '{}'", line));
    vocab.push_back(unescape(f[1]));
  }
  if (vocab.size() < base_size || base_size < static_cast<std::size_t>(kNumSpecials))
    throw FormatError("vocabulary smaller than its base");
  std::vector<std::pair<std::string, std::string>> merges;
  while (true) {
    const auto line = next("[SCRIPTS]");
    if (line == "[SCRIPTS]") break;
    const auto f = split_tabs(line);
    if (f.size() != 3) throw FormatError(fmt::format("bad merge line '{}'", line));
    if (parse_int(f[0], "merge rank") != static_cast<long long>(merges.size()))
      throw FormatError(fmt::format("merge ranks not contiguous at '{}'", line));
    merges.emplace_back(unescape(f[1]), unescape(f[2]));
  }
  std::vector<ScriptProfile> scripts;
  while (true) {
    const auto line = next("[END]");
    if (line == "[END]") break;
    const auto f = split_tabs(line);
    if (f.size() != 2) throw FormatError(fmt::format("bad script line '{}'", line));
    scripts.push_back({std::string(f[0]), parse_ranges(f[1])});
  }

  std::vector<std::string> alphabet;
  if (!fb) alphabet.assign(vocab.begin() + kNumSpecials, vocab.begin() + static_cast<std::ptrdiff_t>(base_size));
  TokenizerModel m;
  try {
    m = TokenizerModel(fb != 0, specials, scripts, alphabet);
  } catch (const std::exception& e) {
    throw FormatError(fmt::format("bad tokenizer base: {}", e.what()));
  }
  if (m.base_size_ != base_size) throw FormatError("base_size does not match byte_fallback");
  for (std::size_t i = 0; i < base_size; ++i)
    if (m.vocab_[i] != vocab[i]) throw FormatError(fmt::format("base token {} differs from the expected base", i));
  for (const auto& [l, r] : merges) {
    const TokenId lid = m.find(l), rid = m.find(r);
    if (lid < 0 || rid < 0) throw FormatError(fmt::format("merge refers to unknown token '{}' '{}'", escape(l), escape(r)));
    try {
      m.add_merge(lid, rid);
    } catch (const std::invalid_argument& e) {
      throw FormatError(e.what());
    }
  }
  if (m.vocab_ != vocab) throw FormatError("replaying the merges does not reproduce the vocabulary");
  return m;
}

void TokenizerModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << serialize();
}

TokenizerModel TokenizerModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

std::vector<std::string> pretokenize(std::string_view text, const std::vector<ScriptProfile>& profiles) {
  std::vector<std::string> runs;
  std::string current;
  std::string_view current_class;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t start = pos;
    const char32_t cp = utf8::next(text, pos);
    std::string_view cls;
    if (is_unicode_space(cp))
      cls = kWhitespaceClass;
    else if (is_joiner(cp) && !current.empty() && current_class != kWhitespaceClass)
      cls = current_class;
    else
      cls = script_of(cp, profiles);
    if (!current.empty() && cls != current_class) {
      runs.push_back(std::move(current));
      current.clear();
    }
    // keep a lone leading space with the word that follows it
    if (current.empty() && cls != kWhitespaceClass && !runs.empty() && runs.back().back() == ' ' &&
        current_class == kWhitespaceClass) {
      std::string& ws = runs.back();
      ws.pop_back();
      current = " ";
      if (ws.empty()) runs.pop_back();
    }
    current.append(text.substr(start, pos - start));
    current_class = cls;
  }
  if (!current.empty()) runs.push_back(std::move(current));
  return runs;
}

std::map<std::string, double> detect_script(std::string_view text, const std::vector<ScriptProfile>& profiles) {
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (char32_t cp : utf8::decode(text)) {
    if (is_unicode_space(cp)) continue;
    ++counts[std::string(script_of(cp, profiles))];
    ++total;
  }
  std::map<std::string, double> out;
  for (const auto& [name, n] : counts) out[name] = static_cast<double>(n) / static_cast<double>(total);
  return out;
}

TokenizerModel merge_tokenizers(const TokenizerModel& a, const TokenizerModel& b, std::size_t vocab_size) {
  if (a.specials() != b.specials()) throw ConfigError("cannot merge tokenizers with different special tokens");
  if (a.byte_fallback() != b.byte_fallback())
    throw ConfigError("cannot merge tokenizers with different byte_fallback settings");
  std::vector<ScriptProfile> scripts = a.scripts();
  for (const auto& s : b.scripts())
    if (std::none_of(scripts.begin(), scripts.end(), [&](const ScriptProfile& x) { return x.name == s.name; }))
      scripts.push_back(s);
  std::vector<std::string> alphabet;
  if (!a.byte_fallback()) {
    for (std::size_t i = kNumSpecials; i < a.base_size(); ++i) alphabet.push_back(a.vocab()[i]);
    for (std::size_t i = kNumSpecials; i < b.base_size(); ++i)
      if (a.find(b.vocab()[i]) < 0) alphabet.push_back(b.vocab()[i]);
  }
  TokenizerModel m(a.byte_fallback(), a.specials(), scripts, alphabet);
  auto try_add = [&](const TokenizerModel& src, const Merge& mg) {
    const TokenId l = m.find(src.token(mg.left)), r = m.find(src.token(mg.right));
    if (l < 0 || r < 0) return;  // an operand was cut off by the size limit
    if (m.vocab_size() >= vocab_size && m.find(src.token(mg.output)) < 0) return;
    try {
      m.add_merge(l, r);
    } catch (const std::invalid_argument&) {
      // already merged via the other tokenizer
    }
  };
  const std::size_t n = std::max(a.merges().size(), b.merges().size());
  for (std::size_t i = 0; i < n; ++i) {
    if (i < a.merges().size()) try_add(a, a.merges()[i]);
    if (i < b.merges().size()) try_add(b, b.merges()[i]);
  }
  return m;
}

std::size_t count_words(std::string_view text) {
  std::size_t words = 0;
  bool in_word = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const bool space = is_unicode_space(utf8::next(text, pos));
    if (!space && !in_word) ++words;
    in_word = !space;
  }
  return words;
}

double fertility(const TokenizerModel& model, std::string_view text) {
  const std::size_t words = count_words(text);
  if (words == 0) throw std::invalid_argument("fertility needs at least one word");
  return static_cast<double>(model.encode(text).size()) / static_cast<double>(words);
}

}  // namespace indiclm::tokenizer
