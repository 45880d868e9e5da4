#pragma once

#include <stdexcept>
#include <string>

namespace aerolite {

/// Process exit codes shared by every CLI command.
enum class ExitCode : int {
    ok = 0,
    validation = 2,
    transport = 3,
    numeric = 4,
};

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

/// Bad input, shape mismatch, malformed file, violated precondition.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(ExitCode::validation, what) {}
};

/// Caption provider or other remote transport failed after all retries.
class TransportError : public Error {
public:
    TransportError(const std::string& what, int last_status)
        : Error(ExitCode::transport, what), last_status_(last_status) {}
    int last_status() const noexcept { return last_status_; }

private:
    int last_status_;
};

/// Non-finite loss or similar numerical breakdown during training.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ExitCode::numeric, what) {}
};

}  // namespace aerolite
