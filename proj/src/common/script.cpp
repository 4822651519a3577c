#include "indiclm/common/script.hpp"

#include <algorithm>
#include <charconv>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"

namespace indiclm {

bool ScriptProfile::contains(char32_t cp) const noexcept {
  return std::any_of(ranges.begin(), ranges.end(), [cp](const CodepointRange& r) { return r.contains(cp); });
}

const std::vector<ScriptProfile>& default_script_profiles() {
  static const std::vector<ScriptProfile> profiles = {
      {"Bengali", {{0x0980, 0x09FF}}},
      {"Devanagari", {{0x0900, 0x097F}, {0x1CD0, 0x1CFF}, {0xA8E0, 0xA8FF}}},
      {"Odia", {{0x0B00, 0x0B7F}}},
      {"Tamil", {{0x0B80, 0x0BFF}, {0x11FC0, 0x11FFF}}},
      {"Telugu", {{0x0C00, 0x0C7F}}},
      {"Roman",
       {{0x0041, 0x005A}, {0x0061, 0x007A}, {0x00C0, 0x00D6}, {0x00D8, 0x00F6}, {0x00F8, 0x024F}, {0x1E00, 0x1EFF}}},
  };
  return profiles;
}

std::optional<ScriptProfile> find_script_profile(std::string_view name) {
  for (const auto& p : default_script_profiles())
    if (p.name == name) return p;
  return std::nullopt;
}

void validate_profile(const ScriptProfile& profile) {
  if (profile.name.empty()) throw ConfigError("script profile without a name");
  auto ranges = profile.ranges;
  std::sort(ranges.begin(), ranges.end(), [](auto& a, auto& b) { return a.lo < b.lo; });
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (ranges[i].lo > ranges[i].hi) throw ConfigError(fmt::format("inverted range in script {}", profile.name));
    if (i > 0 && ranges[i].lo <= ranges[i - 1].hi)
      throw ConfigError(fmt::format("overlapping ranges in script {}", profile.name));
  }
}

std::string_view script_of(char32_t cp, const std::vector<ScriptProfile>& profiles) {
  for (const auto& p : profiles)
    if (p.contains(cp)) return p.name;
  return kOtherScript;
}

std::string format_ranges(const std::vector<CodepointRange>& ranges) {
  std::string out;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (i) out += ',';
    out += fmt::format("{:04X}..{:04X}", static_cast<std::uint32_t>(ranges[i].lo),
                       static_cast<std::uint32_t>(ranges[i].hi));
  }
  return out;
}

std::vector<CodepointRange> parse_ranges(std::string_view text) {
  std::vector<CodepointRange> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const std::string_view item = text.substr(0, comma);
    const auto dots = item.find("..");
    if (dots == std::string_view::npos) throw FormatError(fmt::format("bad codepoint range '{}'", item));
    std::uint32_t lo = 0, hi = 0;
    auto parse_hex = [&](std::string_view s, std::uint32_t& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
      if (ec != std::errc{} || p != s.data() + s.size()) throw FormatError(fmt::format("bad codepoint '{}'", s));
    };
    parse_hex(item.substr(0, dots), lo);
    parse_hex(item.substr(dots + 2), hi);
    out.push_back({static_cast<char32_t>(lo), static_cast<char32_t>(hi)});
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

bool is_unicode_space(char32_t cp) noexcept {
  switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20: case 0x85: case 0xA0:
    case 0x1680: case 0x2028: case 0x2029: case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

}  // namespace indiclm
