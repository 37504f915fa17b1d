#pragma once

#include <stdexcept>
#include <string>

namespace tpn {

enum class ErrorCode {
  NotSkew,
  DegeneratePoints,
  NonFiniteState,
  DegenerateThrust,
  SamplingStalled,
  SingularKKT,
  SpanTooShort,
  DivergedRollout,
  AllChildrenDiverged,
  InvalidArgument,
  Io,
  Format,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotSkew: return "NotSkew";
    case ErrorCode::DegeneratePoints: return "DegeneratePoints";
    case ErrorCode::NonFiniteState: return "NonFiniteState";
    case ErrorCode::DegenerateThrust: return "DegenerateThrust";
    case ErrorCode::SamplingStalled: return "SamplingStalled";
    case ErrorCode::SingularKKT: return "SingularKKT";
    case ErrorCode::SpanTooShort: return "SpanTooShort";
    case ErrorCode::DivergedRollout: return "DivergedRollout";
    case ErrorCode::AllChildrenDiverged: return "AllChildrenDiverged";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Format: return "Format";
  }
  return "Unknown";
}

/// Base exception for the library. `code()` identifies the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised when a simulated state stops being finite. Carries the step index.
class NonFiniteStateError : public Error {
 public:
  NonFiniteStateError(long step, const std::string& what)
      : Error(ErrorCode::NonFiniteState, what + " (step " + std::to_string(step) + ")"),
        step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace tpn
