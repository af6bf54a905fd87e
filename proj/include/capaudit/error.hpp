#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace capaudit {

enum class ErrorKind {
  kInput,
  kDomain,
  kConfig,
  kPlacementFailure,
  kDegenerateRegion,
  kNotApplicable,
  kScorerUnavailable,
  kUnsupported,
  kDegenerateDirection,
  kInsufficientData,
  kDegenerateSample,
  kDegenerateBase,
  kMissingVariants,
  kDegenerateAgreement,
  kIo,
};

constexpr std::string_view kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInput: return "InputError";
    case ErrorKind::kDomain: return "DomainError";
    case ErrorKind::kConfig: return "ConfigError";
    case ErrorKind::kPlacementFailure: return "PlacementFailure";
    case ErrorKind::kDegenerateRegion: return "DegenerateRegion";
    case ErrorKind::kNotApplicable: return "NotApplicable";
    case ErrorKind::kScorerUnavailable: return "ScorerUnavailable";
    case ErrorKind::kUnsupported: return "Unsupported";
    case ErrorKind::kDegenerateDirection: return "DegenerateDirection";
    case ErrorKind::kInsufficientData: return "InsufficientData";
    case ErrorKind::kDegenerateSample: return "DegenerateSample";
    case ErrorKind::kDegenerateBase: return "DegenerateBase";
    case ErrorKind::kMissingVariants: return "MissingVariants";
    case ErrorKind::kDegenerateAgreement: return "DegenerateAgreement";
    case ErrorKind::kIo: return "IoError";
  }
  return "Error";
}

// Base of every error the toolkit raises. Catch this to handle per-item
// failures generically; catch the typed aliases below to single one out.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(kind_name(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <ErrorKind K>
class ErrorOf : public Error {
 public:
  explicit ErrorOf(const std::string& message) : Error(K, message) {}
};

using InputError = ErrorOf<ErrorKind::kInput>;
using DomainError = ErrorOf<ErrorKind::kDomain>;
using ConfigError = ErrorOf<ErrorKind::kConfig>;
using PlacementFailure = ErrorOf<ErrorKind::kPlacementFailure>;
using DegenerateRegion = ErrorOf<ErrorKind::kDegenerateRegion>;
using NotApplicable = ErrorOf<ErrorKind::kNotApplicable>;
using ScorerUnavailable = ErrorOf<ErrorKind::kScorerUnavailable>;
using Unsupported = ErrorOf<ErrorKind::kUnsupported>;
using DegenerateDirection = ErrorOf<ErrorKind::kDegenerateDirection>;
using InsufficientData = ErrorOf<ErrorKind::kInsufficientData>;
using DegenerateSample = ErrorOf<ErrorKind::kDegenerateSample>;
using DegenerateBase = ErrorOf<ErrorKind::kDegenerateBase>;
using MissingVariants = ErrorOf<ErrorKind::kMissingVariants>;
using DegenerateAgreement = ErrorOf<ErrorKind::kDegenerateAgreement>;
using IoError = ErrorOf<ErrorKind::kIo>;

}  // namespace capaudit
