#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace idgenrec {

enum class ErrorKind {
    EmptyAfterFiltering,
    HistoryTooShort,
    InvalidTokenId,
    SequenceTooLong,
    ShapeMismatch,
    IdSpaceExhausted,
    MissingUserId,
    EmptyHistory,
    DuplicateId,
    DeadEnd,
    UnknownId,
    StaleRegistry,
    TargetMissing,
    VocabularyMismatch,
    InvalidInput,
    InvalidConfig,
    Io,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::EmptyAfterFiltering: return "EmptyAfterFiltering";
    case ErrorKind::HistoryTooShort: return "HistoryTooShort";
    case ErrorKind::InvalidTokenId: return "InvalidTokenId";
    case ErrorKind::SequenceTooLong: return "SequenceTooLong";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::IdSpaceExhausted: return "IdSpaceExhausted";
    case ErrorKind::MissingUserId: return "MissingUserId";
    case ErrorKind::EmptyHistory: return "EmptyHistory";
    case ErrorKind::DuplicateId: return "DuplicateId";
    case ErrorKind::DeadEnd: return "DeadEnd";
    case ErrorKind::UnknownId: return "UnknownId";
    case ErrorKind::StaleRegistry: return "StaleRegistry";
    case ErrorKind::TargetMissing: return "TargetMissing";
    case ErrorKind::VocabularyMismatch: return "VocabularyMismatch";
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::Io: return "Io";
    }
    return "Unknown";
}

} // namespace idgenrec
