#include "conceptset/error.hpp"

namespace conceptset {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kIo: return "io";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kInvalidState: return "invalid-state";
    case ErrorCode::kCorruptIndex: return "corrupt-index";
    case ErrorCode::kCorruptSnapshot: return "corrupt-snapshot";
    case ErrorCode::kSchema: return "schema";
    case ErrorCode::kClassConflict: return "class-conflict";
    case ErrorCode::kUndefinedMetric: return "undefined-metric";
    case ErrorCode::kStageDependency: return "stage-dependency";
    case ErrorCode::kIncompleteAdjudication: return "incomplete-adjudication";
    case ErrorCode::kEmptyResult: return "empty-result";
    case ErrorCode::kContractViolation: return "contract-violation";
    case ErrorCode::kRemote: return "remote";
    case ErrorCode::kLocked: return "locked";
  }
  return "unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
      code_(code) {}

RemoteError::RemoteError(const std::string& message, int http_status,
                         bool retryable)
    : Error(ErrorCode::kRemote, message),
      http_status_(http_status),
      retryable_(retryable) {}

}  // namespace conceptset
