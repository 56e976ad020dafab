#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace waicflow {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller handed in something the contract forbids (bad flag, empty batch,
/// too-small ensemble). The CLI maps this to exit code 2.
class UsageError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ArchitectureError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

/// Raised when optimization produces a non-finite value. `index` is the
/// epoch, parameter component or member that failed, depending on the site.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::size_t index)
        : Error(what), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

class LikelihoodError : public Error {
public:
    LikelihoodError(const std::string& what, std::size_t block)
        : Error(what), block_(block) {}
    std::size_t block() const noexcept { return block_; }

private:
    std::size_t block_;
};

class ScoreError : public Error {
public:
    ScoreError(const std::string& what, std::size_t member, std::size_t row)
        : Error(what), member_(member), row_(row) {}
    std::size_t member() const noexcept { return member_; }
    std::size_t row() const noexcept { return row_; }

private:
    std::size_t member_;
    std::size_t row_;
};

class OracleError : public Error {
public:
    using Error::Error;
};

class DegenerateError : public Error {
public:
    using Error::Error;
};

/// Malformed text input. `line` is 1-based.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class UnsupportedVersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class ManifestError : public FormatError {
public:
    using FormatError::FormatError;
};

}  // namespace waicflow
