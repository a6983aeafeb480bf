#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace evograsp {

enum class ErrorCode {
  InvalidInput,
  InvalidConfig,
  InvalidSchedule,
  TrainingDiverged,
  GuidanceFailure,
  CheckpointCorrupt,
  DatasetCorrupt,
  GenerationStarved,
  LabelMismatch,
  NotFound,
  Precondition,
  Io,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidInput: return "invalid-input";
    case ErrorCode::InvalidConfig: return "invalid-config";
    case ErrorCode::InvalidSchedule: return "invalid-schedule";
    case ErrorCode::TrainingDiverged: return "training-diverged";
    case ErrorCode::GuidanceFailure: return "guidance-failure";
    case ErrorCode::CheckpointCorrupt: return "checkpoint-corrupt";
    case ErrorCode::DatasetCorrupt: return "dataset-corrupt";
    case ErrorCode::GenerationStarved: return "generation-starved";
    case ErrorCode::LabelMismatch: return "label-mismatch";
    case ErrorCode::NotFound: return "not-found";
    case ErrorCode::Precondition: return "precondition";
    case ErrorCode::Io: return "io-error";
  }
  return "unknown";
}

/// Every failure surfaced by the library carries one of the codes above so
/// the CLI and the HTTP facade can map it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace evograsp
