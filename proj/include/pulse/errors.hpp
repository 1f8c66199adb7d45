#pragma once

#include <stdexcept>
#include <string>

namespace pulse {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// process exit codes: ConfigError -> 2, DataError -> 3, ContractError -> 4.

// Bad parameters / malformed configuration (wrong types, impossible ranges).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Unusable inputs (missing files, empty samples, unreadable traces).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// A stated invariant was violated at runtime (leakage found by the audit,
// shape mismatch, inconsistent artifacts). Always a bug or a poisoned input.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pulse
