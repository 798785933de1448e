#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace deepedit {

enum class ErrorCode {
  // kg_core
  MissingEdge,
  DuplicateLink,
  ConflictingDeltas,
  InvalidDelta,
  InvalidTriplet,
  UnknownEntity,
  InvalidLength,
  // metrics
  EmptyFamily,
  TooShort,
  EmptyText,
  InvalidObservation,
  // probe
  EmptyResponses,
  TransportError,
  AuthMissing,
  UnknownQueryTag,
  ScoringUnsupported,
  // pipeline
  MalformedInput,
  EndpointFailure,
  UnparseableExtraction,
  IndexOutOfRange,
  InvalidEdit,
  // dataset_io
  ParseError,
  InvariantViolation,
  MissingPlaceholder,
  IoError,
  // evaluation
  MissingProbes,
  SchemaMismatch,
  ConfigError,
  // review service
  RevisionConflict,
  UnknownItem,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingEdge: return "MissingEdge";
    case ErrorCode::DuplicateLink: return "DuplicateLink";
    case ErrorCode::ConflictingDeltas: return "ConflictingDeltas";
    case ErrorCode::InvalidDelta: return "InvalidDelta";
    case ErrorCode::InvalidTriplet: return "InvalidTriplet";
    case ErrorCode::UnknownEntity: return "UnknownEntity";
    case ErrorCode::InvalidLength: return "InvalidLength";
    case ErrorCode::EmptyFamily: return "EmptyFamily";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::InvalidObservation: return "InvalidObservation";
    case ErrorCode::EmptyResponses: return "EmptyResponses";
    case ErrorCode::TransportError: return "TransportError";
    case ErrorCode::AuthMissing: return "AuthMissing";
    case ErrorCode::UnknownQueryTag: return "UnknownQueryTag";
    case ErrorCode::ScoringUnsupported: return "ScoringUnsupported";
    case ErrorCode::MalformedInput: return "MalformedInput";
    case ErrorCode::EndpointFailure: return "EndpointFailure";
    case ErrorCode::UnparseableExtraction: return "UnparseableExtraction";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::InvalidEdit: return "InvalidEdit";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::MissingPlaceholder: return "MissingPlaceholder";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MissingProbes: return "MissingProbes";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::RevisionConflict: return "RevisionConflict";
    case ErrorCode::UnknownItem: return "UnknownItem";
  }
  return "Unknown";
}

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Process exit codes used by the command-line runner.
// 0 ok, 2 config error, 3 data error, 4 endpoint error.
constexpr int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::AuthMissing:
    case ErrorCode::InvalidLength:
      return 2;
    case ErrorCode::TransportError:
    case ErrorCode::EndpointFailure:
    case ErrorCode::ScoringUnsupported:
      return 4;
    default:
      return 3;
  }
}

}  // namespace deepedit
