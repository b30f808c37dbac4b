// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace flans {

enum class ErrorCode {
  ShapeMismatch,
  NonFinite,
  NonScalarLoss,
  TapeConsumed,
  GroupOrderMismatch,
  NonSquareImage,
  NonPositiveTemperature,
  EmptyMaskSet,
  UnknownClass,
  EmptyText,
  DimMismatch,
  UnnormalizedInput,
  ClassOutOfRange,
  MissingIntentPair,
  IoError,
  BadMagic,
  TruncatedPayload,
  UnsupportedDtype,
  NonCanonicalDataset,
  MissingPrompts,
  InvalidArgument,
};

const char* to_string(ErrorCode code) noexcept;

// All library failures surface as this type; `code()` names the contract
// that was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace flans
