#pragma once

#include <stdexcept>
#include <string>

namespace charbot {

// Root of the library's error hierarchy. The three direct children map to
// CLI exit codes: ValidationError -> 1, IoError and ClientError -> 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct ClientError : Error {
  using Error::Error;
};

// --- numerics ---
struct ShapeMismatch : ValidationError {
  using ValidationError::ValidationError;
};
struct NonScalarLoss : ValidationError {
  using ValidationError::ValidationError;
};
struct TargetOutOfRange : ValidationError {
  using ValidationError::ValidationError;
};
struct NonFiniteTensor : ValidationError {
  using ValidationError::ValidationError;
};

// --- charlora ---
struct RankTooLarge : ValidationError {
  using ValidationError::ValidationError;
};
struct UnknownTask : ValidationError {
  using ValidationError::ValidationError;
};
struct DuplicateTask : ValidationError {
  using ValidationError::ValidationError;
};
struct NoGradients : ValidationError {
  using ValidationError::ValidationError;
};

// --- container files ---
struct BadMagic : IoError {
  using IoError::IoError;
};
struct VersionUnsupported : IoError {
  using IoError::IoError;
};
struct TruncatedPayload : IoError {
  using IoError::IoError;
};
struct ShapeHeaderMismatch : IoError {
  using IoError::IoError;
};

// --- toy_lm ---
struct SequenceTooLong : ValidationError {
  using ValidationError::ValidationError;
};

// --- corpus ---
struct EmptyCorpus : ValidationError {
  using ValidationError::ValidationError;
};
struct DuplicateEssayId : ValidationError {
  using ValidationError::ValidationError;
};
struct InvalidUtf8 : ValidationError {
  using ValidationError::ValidationError;
};
struct EmptyBody : ValidationError {
  using ValidationError::ValidationError;
};
struct AlreadyTransformed : ValidationError {
  using ValidationError::ValidationError;
};
struct MalformedJudgeJson : ClientError {
  MalformedJudgeJson(const std::string& what, std::string raw)
      : ClientError(what), raw_payload(std::move(raw)) {}
  std::string raw_payload;  // kept verbatim for post-mortems
};
struct SchemaViolation : ClientError {
  SchemaViolation(const std::string& what, std::string field_name)
      : ClientError(what), field(std::move(field_name)) {}
  std::string field;
};

// --- training ---
struct EmptyDataset : ValidationError {
  using ValidationError::ValidationError;
};
struct UnknownTaskInDataset : ValidationError {
  using ValidationError::ValidationError;
};
struct AllEmpty : ValidationError {
  using ValidationError::ValidationError;
};

// --- evaluation ---
struct LengthMismatch : ValidationError {
  using ValidationError::ValidationError;
};
struct EmptyInput : ValidationError {
  using ValidationError::ValidationError;
};
struct EmptyReference : ValidationError {
  using ValidationError::ValidationError;
};
struct UnparseableJudgeOutput : ClientError {
  using ClientError::ClientError;
};
struct ScoreOutOfRange : ClientError {
  using ClientError::ClientError;
};

// --- llm client ---
struct RateLimited : ClientError {
  using ClientError::ClientError;
};
struct Timeout : ClientError {
  using ClientError::ClientError;
};
struct AuthFailed : ClientError {
  using ClientError::ClientError;
};
struct MalformedResponse : ClientError {
  using ClientError::ClientError;
};
struct UnknownTemplate : ClientError {
  using ClientError::ClientError;
};

}  // namespace charbot
