#include "caveline/error.hpp"

namespace caveline {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMissingFile: return "MissingFile";
    case ErrorCode::kDuplicateId: return "DuplicateId";
    case ErrorCode::kInvalidSplit: return "InvalidSplit";
    case ErrorCode::kInvalidManifest: return "InvalidManifest";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kEmptySeed: return "EmptySeed";
    case ErrorCode::kNoCheckpoint: return "NoCheckpoint";
    case ErrorCode::kUnknownSample: return "UnknownSample";
    case ErrorCode::kDuplicateVerdict: return "DuplicateVerdict";
    case ErrorCode::kNothingNew: return "NothingNew";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace caveline
