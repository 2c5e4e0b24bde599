#pragma once

#include <stdexcept>
#include <string>

namespace crpn {

// Tensor or box dimensions do not line up. The message carries both shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration value (grid with zero cells, mismatched stage counts, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corrupt or truncated file. Carries the byte offset where parsing stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& msg, std::size_t byte_offset)
      : std::runtime_error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::size_t offset;
};

// Not enough samples to compute a statistic.
class StatsError : public std::runtime_error {
 public:
  explicit StatsError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value where one is forbidden (loss divergence, NaN weights).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Object placement or rendering failed after exhausting retries.
class GenerationError : public std::runtime_error {
 public:
  explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace crpn
