#pragma once

#include <stdexcept>
#include <string>

namespace latflow {

// Error categories map 1:1 onto CLI exit codes: config/parse -> 2, io -> 3, numeric -> 4.
enum class ErrorKind {
    Config,
    Io,
    Numeric,
    Dimension,
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ErrorKind::Config, msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ErrorKind::Io, msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(ErrorKind::Numeric, msg) {}
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(ErrorKind::Dimension, msg) {}
};

// Latent container file errors, each distinct so callers can tell apart a foreign
// file, a future format revision and a short read.
struct BadMagicError : IoError {
    explicit BadMagicError(const std::string& msg) : IoError(msg) {}
};

struct VersionError : IoError {
    explicit VersionError(const std::string& msg) : IoError(msg) {}
};

struct TruncatedError : IoError {
    explicit TruncatedError(const std::string& msg) : IoError(msg) {}
};

}  // namespace latflow
