// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/error.h"

namespace sketchpipe {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kInvariantViolation: return "invariant_violation";
    case ErrorCode::kCorruptRecord: return "corrupt_record";
    case ErrorCode::kSchemaVersion: return "schema_version";
    case ErrorCode::kBackendError: return "backend_error";
    case ErrorCode::kTranscriptMismatch: return "transcript_mismatch";
    case ErrorCode::kMalformedOutput: return "malformed_output";
    case ErrorCode::kProfileNotFound: return "profile_not_found";
    case ErrorCode::kSandboxSetup: return "sandbox_setup";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kConfig: return "config_error";
    case ErrorCode::kEmptyInput: return "empty_input";
  }
  return "unknown";
}

}  // namespace sketchpipe
