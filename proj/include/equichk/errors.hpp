#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace equichk {

enum class ErrorCode {
  LengthMismatch,
  NonFiniteEntry,
  AxisMismatch,
  IndexOutOfRange,
  Singular,
  NonFiniteResult,
  UnknownSpec,
  SizeMismatch,
  InvalidParams,
  NotGoodPosition,
  NotInvolution,
  NotConservative,
  DegenerateLoss,
  NotFixedPoint,
  NotFactoredModel,
  NotConverged,
  StepFailure,
  InvalidNoiseModel,
  InsufficientEnsemble,
  ConfigError,
};

std::string_view to_string(ErrorCode code);

/// Every recoverable failure in the library is reported through this type;
/// `code()` carries the contract-level error kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace equichk
