#pragma once

#include <stdexcept>
#include <string>

namespace mbd {

// Configuration / validation problems. The CLI maps these to exit code 2.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failures (divergence, non-finite data, singular inputs). Exit code 3.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// File-system and format problems. Exit code 3.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace mbd
