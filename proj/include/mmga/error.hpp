#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmga {

enum class ErrorCode {
    InvalidArgument,
    InvalidConfig,
    Io,
    DigestMismatch,
    Validation,
    ShapeMismatch,
    NonFinite,
    Nondeterministic,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "invalid_argument";
        case ErrorCode::InvalidConfig: return "invalid_config";
        case ErrorCode::Io: return "io";
        case ErrorCode::DigestMismatch: return "digest_mismatch";
        case ErrorCode::Validation: return "validation";
        case ErrorCode::ShapeMismatch: return "shape_mismatch";
        case ErrorCode::NonFinite: return "non_finite";
        case ErrorCode::Nondeterministic: return "nondeterministic";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message) : std::runtime_error(message), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace mmga
