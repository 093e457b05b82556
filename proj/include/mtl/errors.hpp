#pragma once

#include <stdexcept>
#include <string>

namespace mtl {

// Exit-code contract for the CLI: usage errors map to 1, data/format errors
// to 2, anything else that escapes to 3. API-level precondition violations
// throw std::invalid_argument.

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed binary containers; message carries the byte offset.
struct FormatError : DataError {
  using DataError::DataError;
};

struct VocabularyError : DataError {
  using DataError::DataError;
};

struct StratificationError : DataError {
  using DataError::DataError;
};

struct UndefinedMetricError : DataError {
  using DataError::DataError;
};

struct UndefinedProbabilityError : DataError {
  using DataError::DataError;
};

}  // namespace mtl
