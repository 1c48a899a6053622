#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pace {

enum class ErrorCode {
  MissingEntry,
  DuplicateEntry,
  ShapeMismatch,
  InvalidTreatment,
  ParseError,
  NonFiniteInput,
  NumericalBreakdown,
  RankUnreachable,
  PreconditionViolation,
  NotOrthonormal,
  NoTreatedObservations,
  DegenerateIdentification,
  NeedTwoCovariates,
  DegenerateEffect,
  NoControlEntries,
  ZeroTruthNorm,
  NoGroundTruth,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code);

// Every failure surfaced by the library carries a code so callers (and the
// CLI exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace pace
