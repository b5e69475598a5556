// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sketchpipe {

enum class ErrorCode {
  kInvalidArgument,
  kIo,
  kInvariantViolation,
  kCorruptRecord,
  kSchemaVersion,
  kBackendError,
  kTranscriptMismatch,
  kMalformedOutput,
  kProfileNotFound,
  kSandboxSetup,
  kShapeMismatch,
  kNonFinite,
  kConfig,
  kEmptyInput,
};

std::string_view error_code_name(ErrorCode code);

/// Base exception for every failure surfaced by the pipeline.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace sketchpipe
