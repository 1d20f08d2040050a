#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cprobe {

enum class ErrorCode {
    InvalidInput,
    ShapeMismatch,
    InvalidK,
    InsufficientData,
    InvalidConfig,
    UnknownToken,
    SequenceTooLong,
    EmptyPrompt,
    NumericalOverflow,
    CorruptCheckpoint,
    InvalidConnection,
    DegenerateSpectrum,
    IncompleteInput,
    DegenerateTrajectory,
    DegenerateNorm,
    InvalidTask,
    TrainingDiverged,
    InvalidBasis,
    Io,
};

std::string_view to_string(ErrorCode code);

/// Every failure in the library surfaces as this exception; `code()` identifies the category.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace cprobe
