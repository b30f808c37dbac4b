// SPDX-License-Identifier: Apache-2.0
#include "flans/error.hpp"
#include "flans/tensor.hpp"

namespace flans {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::TapeConsumed: return "TapeConsumed";
    case ErrorCode::GroupOrderMismatch: return "GroupOrderMismatch";
    case ErrorCode::NonSquareImage: return "NonSquareImage";
    case ErrorCode::NonPositiveTemperature: return "NonPositiveTemperature";
    case ErrorCode::EmptyMaskSet: return "EmptyMaskSet";
    case ErrorCode::UnknownClass: return "UnknownClass";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::UnnormalizedInput: return "UnnormalizedInput";
    case ErrorCode::ClassOutOfRange: return "ClassOutOfRange";
    case ErrorCode::MissingIntentPair: return "MissingIntentPair";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::NonCanonicalDataset: return "NonCanonicalDataset";
    case ErrorCode::MissingPrompts: return "MissingPrompts";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

}  // namespace flans
