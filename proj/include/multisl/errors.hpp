#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace multisl {

/// Failure categories raised by the numerical core. The string names are
/// stable and appear in CLI reports.
enum class ErrorCode {
  Validation,
  Dimension,
  Index,
  IntegrationOverflow,
  NonFiniteMatrix,
  DegenerateSpectrum,
  RootCountMismatch,
  NullSpaceAmbiguous,
  NearSingularDenominator,
  ExtrapolationDiverged,
  CrossSpectrumCollision,
  TailUnstable,
  SingularSystem,
  NonPositivePivot,
  ChainBreak,
  NegativeSquare,
  TruncationMismatch,
  IllConditionedGL,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Validation: return "ValidationError";
    case ErrorCode::Dimension: return "DimensionError";
    case ErrorCode::Index: return "IndexError";
    case ErrorCode::IntegrationOverflow: return "IntegrationOverflow";
    case ErrorCode::NonFiniteMatrix: return "NonFiniteMatrix";
    case ErrorCode::DegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorCode::RootCountMismatch: return "RootCountMismatch";
    case ErrorCode::NullSpaceAmbiguous: return "NullSpaceAmbiguous";
    case ErrorCode::NearSingularDenominator: return "NearSingularDenominator";
    case ErrorCode::ExtrapolationDiverged: return "ExtrapolationDiverged";
    case ErrorCode::CrossSpectrumCollision: return "CrossSpectrumCollision";
    case ErrorCode::TailUnstable: return "TailUnstable";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::NonPositivePivot: return "NonPositivePivot";
    case ErrorCode::ChainBreak: return "ChainBreak";
    case ErrorCode::NegativeSquare: return "NegativeSquare";
    case ErrorCode::TruncationMismatch: return "TruncationMismatch";
    case ErrorCode::IllConditionedGL: return "IllConditionedGL";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

template <ErrorCode Code>
class ErrorOf : public Error {
 public:
  explicit ErrorOf(const std::string& what) : Error(Code, what) {}
};

using ValidationError = ErrorOf<ErrorCode::Validation>;
using DimensionError = ErrorOf<ErrorCode::Dimension>;
using IndexError = ErrorOf<ErrorCode::Index>;
using NonFiniteMatrix = ErrorOf<ErrorCode::NonFiniteMatrix>;
using DegenerateSpectrum = ErrorOf<ErrorCode::DegenerateSpectrum>;
using RootCountMismatch = ErrorOf<ErrorCode::RootCountMismatch>;
using NullSpaceAmbiguous = ErrorOf<ErrorCode::NullSpaceAmbiguous>;
using NearSingularDenominator = ErrorOf<ErrorCode::NearSingularDenominator>;
using ExtrapolationDiverged = ErrorOf<ErrorCode::ExtrapolationDiverged>;
using CrossSpectrumCollision = ErrorOf<ErrorCode::CrossSpectrumCollision>;
using TailUnstable = ErrorOf<ErrorCode::TailUnstable>;
using SingularSystem = ErrorOf<ErrorCode::SingularSystem>;
using NonPositivePivot = ErrorOf<ErrorCode::NonPositivePivot>;
using ChainBreak = ErrorOf<ErrorCode::ChainBreak>;
using NegativeSquare = ErrorOf<ErrorCode::NegativeSquare>;
using TruncationMismatch = ErrorOf<ErrorCode::TruncationMismatch>;
using IllConditionedGL = ErrorOf<ErrorCode::IllConditionedGL>;

/// Raised when the magnitude of a propagated solution exceeds 1e150.
class IntegrationOverflow : public Error {
 public:
  IntegrationOverflow(double x, const std::string& what)
      : Error(ErrorCode::IntegrationOverflow, what), x_(x) {}

  /// Coordinate at which the growth limit was crossed.
  double position() const noexcept { return x_; }

 private:
  double x_;
};

}  // namespace multisl
