#include "peaklab/error.hpp"

namespace peak {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUsage: return "USAGE";
    case ErrorCode::kConfig: return "CONFIG";
    case ErrorCode::kInput: return "INPUT";
    case ErrorCode::kValidation: return "VALIDATION";
    case ErrorCode::kIo: return "IO";
    case ErrorCode::kCorruption: return "CORRUPTION";
    case ErrorCode::kNumerical: return "NUMERICAL";
    case ErrorCode::kTraining: return "TRAINING";
    case ErrorCode::kDegeneracy: return "DEGENERACY";
    case ErrorCode::kManifest: return "MANIFEST";
  }
  return "UNKNOWN";
}

int error_code_exit_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUsage: return 2;
    case ErrorCode::kConfig: return 3;
    case ErrorCode::kInput: return 4;
    case ErrorCode::kValidation: return 5;
    case ErrorCode::kIo: return 6;
    case ErrorCode::kCorruption: return 7;
    case ErrorCode::kNumerical: return 8;
    case ErrorCode::kTraining: return 9;
    case ErrorCode::kDegeneracy: return 10;
    case ErrorCode::kManifest: return 11;
  }
  return 1;
}

}  // namespace peak
