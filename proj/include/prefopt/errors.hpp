#pragma once

#include <stdexcept>
#include <string>

namespace prefopt {

// Exception taxonomy. Everything thrown by this library derives from Error so
// callers can catch one type at the boundary; the subclasses map onto exit
// codes in the CLI (UsageError -> 2, everything else -> 1).

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad numeric input to a math routine: non-finite argument, empty batch,
// mismatched lengths, degenerate series.
class DomainError : public Error {
public:
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

// Inconsistent hyperparameters or model shape parameters.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A sequence that cannot carry probability mass: empty response, len < 1.
class DegenerateSequenceError : public DomainError {
public:
    explicit DegenerateSequenceError(const std::string& msg) : DomainError(msg) {}
};

// Malformed text that should have been JSON / key=value / a number.
class ParseError : public Error {
public:
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

// Well-formed JSON that violates the record schema (missing field, wrong
// type, invariant like len_w >= 1 broken, unknown field under strict mode).
class SchemaError : public Error {
public:
    explicit SchemaError(const std::string& msg) : Error(msg) {}
};

// Filesystem trouble: unreadable path, failed write.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Command-line misuse: unknown subcommand, unknown config key, bad flag.
class UsageError : public Error {
public:
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

// Raised by the trainer when the loss stops being finite. Carries the step
// so the diagnostic names where the run died.
class TrainingDiverged : public Error {
public:
    TrainingDiverged(int step, const std::string& msg) : Error(msg), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

} // namespace prefopt
