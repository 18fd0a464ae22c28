#pragma once

#include <stdexcept>
#include <string>

namespace conceptset {

enum class ErrorCode {
  kIo,
  kParse,
  kInvalidArgument,
  kNotFound,
  kInvalidState,
  kCorruptIndex,
  kCorruptSnapshot,
  kSchema,
  kClassConflict,
  kUndefinedMetric,
  kStageDependency,
  kIncompleteAdjudication,
  kEmptyResult,
  kContractViolation,
  kRemote,
  kLocked,
};

const char* error_code_name(ErrorCode code) noexcept;

// Every failure the library reports carries one of the codes above; callers
// branch on code() rather than on message text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Failure talking to a remote model endpoint. Rate limits, 5xx and transport
// errors are retryable; authentication and request errors are not.
class RemoteError : public Error {
 public:
  RemoteError(const std::string& message, int http_status, bool retryable);

  int http_status() const noexcept { return http_status_; }
  bool retryable() const noexcept { return retryable_; }

 private:
  int http_status_;
  bool retryable_;
};

}  // namespace conceptset
