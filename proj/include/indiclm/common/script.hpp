#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace indiclm {

struct CodepointRange {
  char32_t lo = 0;
  char32_t hi = 0;  // inclusive

  bool contains(char32_t cp) const noexcept { return cp >= lo && cp <= hi; }
  friend bool operator==(const CodepointRange&, const CodepointRange&) = default;
};

// A named writing system and the Unicode blocks that belong to it.
struct ScriptProfile {
  std::string name;
  std::vector<CodepointRange> ranges;

  bool contains(char32_t cp) const noexcept;
  friend bool operator==(const ScriptProfile&, const ScriptProfile&) = default;
};

inline constexpr std::string_view kOtherScript = "Other";

// Bengali, Devanagari, Odia, Tamil, Telugu and Roman.
const std::vector<ScriptProfile>& default_script_profiles();

// Looks up a profile by name among the defaults.
std::optional<ScriptProfile> find_script_profile(std::string_view name);

// Throws ConfigError when ranges overlap or are inverted.
void validate_profile(const ScriptProfile& profile);

// Name of the first profile containing cp, or "Other".
std::string_view script_of(char32_t cp, const std::vector<ScriptProfile>& profiles);

// "0900..097F,A8E0..A8FF"
std::string format_ranges(const std::vector<CodepointRange>& ranges);
std::vector<CodepointRange> parse_ranges(std::string_view text);

bool is_unicode_space(char32_t cp) noexcept;

}  // namespace indiclm
