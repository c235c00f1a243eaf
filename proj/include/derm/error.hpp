/*
 * Copyright 2026 The DERM Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace derm {

// Every failure raised by the library carries one of these codes. The CLI
// prints them verbatim as the machine-parsable prefix of its error line.
enum class ErrorCode {
  kZeroNorm,
  kDimMismatch,
  kEmptyInput,
  kNonFiniteFunction,
  kShapeMismatch,
  kUnknownCategoricalId,
  kEmptyPositives,
  kNonPositiveTau,
  kEmptyBatch,
  kUnknownTask,
  kInvalidConfig,
  kEmptyWindow,
  kDivergedLoss,
  kWatermarkGap,
  kWatermarkBehindDay,
  kWindowExceedsWatermark,
  kMixedDays,
  kDayGap,
  kWeightOutOfRange,
  kEmptyIntersection,
  kEmptyUniverse,
  kIoFailure,
  kDimInconsistent,
  kCorruptGeneration,
  kCorruptFile,
  kBindFailure,
  kDegenerateLabels,
  kMissingBaseline,
  kInvalidRates,
  kMissingPrerequisite,
  kConfigParseError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kZeroNorm: return "ZeroNorm";
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kNonFiniteFunction: return "NonFiniteFunction";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kUnknownCategoricalId: return "UnknownCategoricalId";
    case ErrorCode::kEmptyPositives: return "EmptyPositives";
    case ErrorCode::kNonPositiveTau: return "NonPositiveTau";
    case ErrorCode::kEmptyBatch: return "EmptyBatch";
    case ErrorCode::kUnknownTask: return "UnknownTask";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kEmptyWindow: return "EmptyWindow";
    case ErrorCode::kDivergedLoss: return "DivergedLoss";
    case ErrorCode::kWatermarkGap: return "WatermarkGap";
    case ErrorCode::kWatermarkBehindDay: return "WatermarkBehindDay";
    case ErrorCode::kWindowExceedsWatermark: return "WindowExceedsWatermark";
    case ErrorCode::kMixedDays: return "MixedDays";
    case ErrorCode::kDayGap: return "DayGap";
    case ErrorCode::kWeightOutOfRange: return "WeightOutOfRange";
    case ErrorCode::kEmptyIntersection: return "EmptyIntersection";
    case ErrorCode::kEmptyUniverse: return "EmptyUniverse";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kDimInconsistent: return "DimInconsistent";
    case ErrorCode::kCorruptGeneration: return "CorruptGeneration";
    case ErrorCode::kCorruptFile: return "CorruptFile";
    case ErrorCode::kBindFailure: return "BindFailure";
    case ErrorCode::kDegenerateLabels: return "DegenerateLabels";
    case ErrorCode::kMissingBaseline: return "MissingBaseline";
    case ErrorCode::kInvalidRates: return "InvalidRates";
    case ErrorCode::kMissingPrerequisite: return "MissingPrerequisite";
    case ErrorCode::kConfigParseError: return "ConfigParseError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace derm
