#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dualstream {

enum class ErrorCode {
  MissingFrames,
  DimensionMismatch,
  TooFewFrames,
  ImageTooSmall,
  AlreadyCentered,
  CorruptCache,
  ShapeMismatch,
  NoGraph,
  ConfigMismatch,
  HeadsMismatch,
  ClassTooSmall,
  DivergedLoss,
  KOutOfRange,
  IoError,
  InvalidArgument,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFrames: return "MissingFrames";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::TooFewFrames: return "TooFewFrames";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::AlreadyCentered: return "AlreadyCentered";
    case ErrorCode::CorruptCache: return "CorruptCache";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NoGraph: return "NoGraph";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::HeadsMismatch: return "HeadsMismatch";
    case ErrorCode::ClassTooSmall: return "ClassTooSmall";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::KOutOfRange: return "KOutOfRange";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace dualstream
