#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace caveline {

enum class ErrorCode {
  kMissingFile,
  kDuplicateId,
  kInvalidSplit,
  kInvalidManifest,
  kIoFailure,
  kInvalidConfig,
  kShapeMismatch,
  kEmptyDataset,
  kNonFiniteLoss,
  kEmptySeed,
  kNoCheckpoint,
  kUnknownSample,
  kDuplicateVerdict,
  kNothingNew,
  kInvalidArgument,
};

std::string_view to_string(ErrorCode code);

// All library failures surface as this type; `code()` is what callers branch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace caveline
