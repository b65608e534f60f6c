#pragma once

#include <stdexcept>
#include <string>

namespace peak {

enum class ErrorCode {
  kUsage,
  kConfig,
  kInput,
  kValidation,
  kIo,
  kCorruption,
  kNumerical,
  kTraining,
  kDegeneracy,
  kManifest,
};

const char* error_code_name(ErrorCode code);

// Exit status used by the CLI for a given error class.
int error_code_exit_status(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace peak
