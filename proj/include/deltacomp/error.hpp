#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace deltacomp {

enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  NameMismatch,
  MissingCalibration,
  BudgetExhausted,
  RankOverflow,
  Io,
  ChecksumMismatch,
  Truncated,
  BadMagic,
  BadVersion,
  CorruptData,
  NumericallySingular,
  NotConverged,
};

/// Stable upper-case identifier, e.g. "CHECKSUM_MISMATCH".
std::string_view error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace deltacomp
