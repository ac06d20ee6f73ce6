#pragma once

#include <stdexcept>
#include <string>

namespace mitdet {

enum class ErrorKind {
  kInvalidArgument,
  kInvalidStainBasis,
  kInsufficientTissue,
  kSingleStain,
  kTooFewSamples,
  kInfeasiblePacking,
  kMissingFile,
  kMalformedJson,
  kOutOfBounds,
  kUnknownLabel,
  kShapeMismatch,
  kSingleClass,
  kIo,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace mitdet
