#pragma once

#include <stdexcept>
#include <string>

namespace ctxpatch {

// Error classes map 1:1 to CLI exit codes (see README). Keep values stable.
enum class Errc : int {
    ZeroVector = 2,
    DimensionMismatch = 3,
    TokenOutOfRange = 4,
    InvalidConfig = 5,
    ZeroInputVector = 6,
    ZeroPreOutputVector = 7,
    DegenerateActivation = 8,
    ZeroGatedVector = 9,
    PoleEvaluation = 10,
    BracketFailure = 11,
    DegenerateProblem = 12,
    LayerResidualExceeded = 13,
    NotAProbabilityVector = 14,
    UsageError = 15,
    IoError = 16,
    ValidationError = 17,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
public:
    Error(Errc code, std::string msg) : std::runtime_error(std::move(msg)), code_(code) {}
    Errc code() const noexcept { return code_; }
    int exit_code() const noexcept { return static_cast<int>(code_); }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) {
    throw Error(code, std::string(errc_name(code)) + ": " + msg);
}

} // namespace ctxpatch
