#include "coupling_probe/error.hpp"

namespace cprobe {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidInput: return "InvalidInput";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::InvalidK: return "InvalidK";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::UnknownToken: return "UnknownToken";
        case ErrorCode::SequenceTooLong: return "SequenceTooLong";
        case ErrorCode::EmptyPrompt: return "EmptyPrompt";
        case ErrorCode::NumericalOverflow: return "NumericalOverflow";
        case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
        case ErrorCode::InvalidConnection: return "InvalidConnection";
        case ErrorCode::DegenerateSpectrum: return "DegenerateSpectrum";
        case ErrorCode::IncompleteInput: return "IncompleteInput";
        case ErrorCode::DegenerateTrajectory: return "DegenerateTrajectory";
        case ErrorCode::DegenerateNorm: return "DegenerateNorm";
        case ErrorCode::InvalidTask: return "InvalidTask";
        case ErrorCode::TrainingDiverged: return "TrainingDiverged";
        case ErrorCode::InvalidBasis: return "InvalidBasis";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

}  // namespace cprobe
