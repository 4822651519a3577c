#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace indiclm::utf8 {

inline constexpr char32_t kReplacement = 0xFFFD;

// Decodes one codepoint starting at `pos`; advances `pos`. Invalid or
// truncated sequences (overlongs, surrogates, > U+10FFFF) yield U+FFFD and
// consume one byte.
char32_t next(std::string_view s, std::size_t& pos);

void append(std::string& out, char32_t cp);

std::vector<char32_t> decode(std::string_view s);
std::string encode(const std::u32string& cps);

// Length in bytes of the valid sequence at `pos`, or 0 if invalid.
std::size_t valid_sequence_length(std::string_view s, std::size_t pos);

bool is_valid(std::string_view s);

// Replaces every invalid byte sequence with U+FFFD.
std::string repair(std::string_view s);

}  // namespace indiclm::utf8
