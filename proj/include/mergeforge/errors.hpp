#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace mergeforge {

// Error categories map 1:1 onto CLI exit codes (see tools/).
enum class ErrorKind {
    Usage,         // bad flags, bad config, invalid hyperparameters, missing score cells
    Incompatible,  // checkpoints that cannot be merged together
    Io,            // filesystem failures and malformed checkpoint files
    Evaluator,     // external evaluator failed or produced unusable output
    Internal,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void throw_usage(const std::string& msg) { throw Error(ErrorKind::Usage, msg); }
[[noreturn]] inline void throw_incompatible(const std::string& msg) {
    throw Error(ErrorKind::Incompatible, msg);
}
[[noreturn]] inline void throw_io(const std::string& msg) { throw Error(ErrorKind::Io, msg); }
[[noreturn]] inline void throw_evaluator(const std::string& msg) {
    throw Error(ErrorKind::Evaluator, msg);
}

}  // namespace mergeforge
