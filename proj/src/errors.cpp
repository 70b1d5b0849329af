#include "equichk/errors.hpp"

namespace equichk {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::NonFiniteEntry: return "NonFiniteEntry";
    case ErrorCode::AxisMismatch: return "AxisMismatch";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::Singular: return "Singular";
    case ErrorCode::NonFiniteResult: return "NonFiniteResult";
    case ErrorCode::UnknownSpec: return "UnknownSpec";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::InvalidParams: return "InvalidParams";
    case ErrorCode::NotGoodPosition: return "NotGoodPosition";
    case ErrorCode::NotInvolution: return "NotInvolution";
    case ErrorCode::NotConservative: return "NotConservative";
    case ErrorCode::DegenerateLoss: return "DegenerateLoss";
    case ErrorCode::NotFixedPoint: return "NotFixedPoint";
    case ErrorCode::NotFactoredModel: return "NotFactoredModel";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::StepFailure: return "StepFailure";
    case ErrorCode::InvalidNoiseModel: return "InvalidNoiseModel";
    case ErrorCode::InsufficientEnsemble: return "InsufficientEnsemble";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

}  // namespace equichk
