#include "mitdet/error.hpp"

namespace mitdet {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kInvalidStainBasis: return "invalid stain basis";
    case ErrorKind::kInsufficientTissue: return "insufficient tissue";
    case ErrorKind::kSingleStain: return "single stain";
    case ErrorKind::kTooFewSamples: return "too few samples";
    case ErrorKind::kInfeasiblePacking: return "infeasible packing";
    case ErrorKind::kMissingFile: return "missing file";
    case ErrorKind::kMalformedJson: return "malformed json";
    case ErrorKind::kOutOfBounds: return "out of bounds";
    case ErrorKind::kUnknownLabel: return "unknown label";
    case ErrorKind::kShapeMismatch: return "shape mismatch";
    case ErrorKind::kSingleClass: return "single class";
    case ErrorKind::kIo: return "io error";
  }
  return "unknown";
}

}  // namespace mitdet
