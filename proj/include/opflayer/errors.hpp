#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace opflayer {

/// Base class for every domain error raised by the library. The CLI maps
/// these to exit code 1.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Malformed text in a case file; carries the 1-based line number.
class ParseError : public Error {
  public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    [[nodiscard]] std::size_t line() const noexcept { return line_; }

  private:
    std::size_t line_;
};

/// A required matrix or field is absent, or a case invariant is broken.
class StructuralError : public Error {
  public:
    using Error::Error;
};

/// Network shapes the model cannot represent (isolated buses, stacked generators).
class TopologyError : public Error {
  public:
    using Error::Error;
};

class FactorizationError : public Error {
  public:
    using Error::Error;
};

class SingularJacobianError : public Error {
  public:
    using Error::Error;
};

class DivergenceError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

}  // namespace opflayer
