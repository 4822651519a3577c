#include <algorithm>
#include <queue>
#include <set>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

#include "indiclm/common/utf8.hpp"
#include "indiclm/tokenizer/tokenizer.hpp"

namespace indiclm::tokenizer {
namespace {

std::uint64_t key_of(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}
TokenId left_of(std::uint64_t k) { return static_cast<TokenId>(k >> 32); }
TokenId right_of(std::uint64_t k) { return static_cast<TokenId>(k & 0xFFFFFFFFu); }

struct Word {
  std::vector<TokenId> sym;
  std::int64_t count = 0;
};

struct Candidate {
  std::int64_t count;
  std::uint64_t key;
};

}  // namespace

TokenizerModel train_bpe(const std::vector<std::string>& corpus, const TrainOptions& options) {
  if (corpus.empty()) throw std::invalid_argument("cannot train a tokenizer on an empty corpus");

  std::vector<std::string> alphabet;
  if (!options.byte_fallback) {
    std::set<char32_t> cps;
    for (const auto& text : corpus)
      for (char32_t cp : utf8::decode(text)) cps.insert(cp);
    for (char32_t cp : cps) {
      std::string s;
      utf8::append(s, cp);
      alphabet.push_back(std::move(s));
    }
  }
  TokenizerModel model(options.byte_fallback, options.specials, options.profiles, alphabet);
  if (options.vocab_size < model.vocab_size())
    throw std::invalid_argument(fmt::format("vocab_size {} is below the base alphabet of {} tokens",
                                            options.vocab_size, model.vocab_size()));

  std::unordered_map<std::string, std::int64_t> unit_counts;
  for (const auto& text : corpus)
    for (auto& unit : pretokenize(text, options.profiles)) ++unit_counts[std::move(unit)];
  std::vector<std::pair<std::string, std::int64_t>> units(unit_counts.begin(), unit_counts.end());
  std::sort(units.begin(), units.end());

  std::vector<Word> words;
  words.reserve(units.size());
  for (const auto& [unit, count] : units) {
    Word w;
    model.encode_unit(unit, w.sym);
    w.count = count;
    if (w.sym.size() > 1) words.push_back(std::move(w));
  }

  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;
  for (std::uint32_t wi = 0; wi < words.size(); ++wi) {
    const auto& s = words[wi].sym;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const auto k = key_of(s[i], s[i + 1]);
      pair_counts[k] += words[wi].count;
      where[k].push_back(wi);
    }
  }

  // Higher count first; among equal counts the lexicographically smaller
  // (left bytes, right bytes) pair.
  auto worse = [&model](const Candidate& a, const Candidate& b) {
    if (a.count != b.count) return a.count < b.count;
    const std::string& al = model.token(left_of(a.key));
    const std::string& bl = model.token(left_of(b.key));
    if (al != bl) return al > bl;
    return model.token(right_of(a.key)) > model.token(right_of(b.key));
  };
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse);
  for (const auto& [k, c] : pair_counts) heap.push({c, k});

  std::unordered_set<std::uint64_t> merged;
  std::vector<std::uint32_t> stamp(words.size(), 0);
  std::uint32_t iteration = 0;
  while (model.vocab_size() < options.vocab_size && !heap.empty()) {
    const Candidate top = heap.top();
    heap.pop();
    const auto it = pair_counts.find(top.key);
    if (it == pair_counts.end() || it->second != top.count || merged.count(top.key)) continue;
    if (top.count < options.min_pair_count) break;

    const TokenId l = left_of(top.key), r = right_of(top.key);
    const TokenId out = model.add_merge(l, r);
    merged.insert(top.key);
    ++iteration;

    std::unordered_set<std::uint64_t> touched;
    const auto occurrences = std::move(where[top.key]);
    where.erase(top.key);
    for (std::uint32_t wi : occurrences) {
      if (stamp[wi] == iteration) continue;
      stamp[wi] = iteration;
      Word& w = words[wi];
      bool present = false;
      for (std::size_t i = 0; i + 1 < w.sym.size() && !present; ++i) present = w.sym[i] == l && w.sym[i + 1] == r;
      if (!present) continue;
      for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) {
        const auto k = key_of(w.sym[i], w.sym[i + 1]);
        pair_counts[k] -= w.count;
        touched.insert(k);
      }
      std::size_t o = 0;
      for (std::size_t i = 0; i < w.sym.size(); ++i) {
        if (i + 1 < w.sym.size() && w.sym[i] == l && w.sym[i + 1] == r) {
          w.sym[o++] = out;
          ++i;
        } else {
          w.sym[o++] = w.sym[i];
        }
      }
      w.sym.resize(o);
      for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) {
        const auto k = key_of(w.sym[i], w.sym[i + 1]);
        pair_counts[k] += w.count;
        touched.insert(k);
        where[k].push_back(wi);
      }
    }
    for (auto k : touched) {
      const auto c = pair_counts[k];
      if (c > 0)
        heap.push({c, k});
      else
        pair_counts.erase(k);
    }
  }
  return model;
}

}  // namespace indiclm::tokenizer
