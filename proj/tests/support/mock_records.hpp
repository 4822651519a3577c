#pragma once

#include <string>
#include <vector>

#include <fmt/format.h>

#include "indiclm/instruct/instruct.hpp"

namespace indiclm::fixtures {

// n distinct records; salt keeps lists from different sources disjoint.
inline std::vector<instruct::InstructionExample> mock_records(instruct::Source source, std::size_t n,
                                                              const std::string& salt, const std::string& lang = "bn") {
  std::vector<instruct::InstructionExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    instruct::InstructionExample ex;
    ex.instruction = fmt::format("নির্দেশ {} {}", salt, i);
    if (i % 3 == 0) ex.input = fmt::format("ইনপুট {}", i);
    ex.response = fmt::format("উত্তর {} {}", salt, i);
    ex.language = lang;
    ex.source = source;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace indiclm::fixtures
