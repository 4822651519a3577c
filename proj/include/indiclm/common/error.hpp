#pragma once

#include <stdexcept>
#include <string>

namespace indiclm {

// Invalid or inconsistent configuration (unknown script, bad model shape...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file or record could not be parsed, or is truncated/corrupt.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace indiclm
