#pragma once

#include <stdexcept>
#include <string>

namespace mvgrpo {

enum class ErrorKind {
  InvalidInput,
  NumericFailure,
  Validation,
  Io,
  Parse,
  Timeout,
  HttpStatus,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::NumericFailure: return "numeric-failure";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Io: return "io";
    case ErrorKind::Parse: return "parse-failure";
    case ErrorKind::Timeout: return "timeout";
    case ErrorKind::HttpStatus: return "http-status";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct InvalidInput : Error {
  explicit InvalidInput(const std::string& what) : Error(ErrorKind::InvalidInput, what) {}
};

struct NumericFailure : Error {
  explicit NumericFailure(const std::string& what) : Error(ErrorKind::NumericFailure, what) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& what) : Error(ErrorKind::Validation, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error(ErrorKind::Parse, what) {}
};

struct TimeoutError : Error {
  explicit TimeoutError(const std::string& what) : Error(ErrorKind::Timeout, what) {}
};

struct HttpStatusError : Error {
  HttpStatusError(int status, const std::string& what)
      : Error(ErrorKind::HttpStatus, what), status(status) {}
  int status;
};

// Process exit codes used by the command-line tool.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Validation:
    case ErrorKind::InvalidInput:
    case ErrorKind::Parse:
      return 2;
    case ErrorKind::Io:
      return 4;
    default:
      return 3;
  }
}

// Rethrows a library error with extra location context, keeping its kind.
[[noreturn]] inline void rethrow_with_context(const Error& e, const std::string& context) {
  const std::string what = context + ": " + e.what();
  switch (e.kind()) {
    case ErrorKind::InvalidInput: throw InvalidInput(what);
    case ErrorKind::NumericFailure: throw NumericFailure(what);
    case ErrorKind::Validation: throw ValidationError(what);
    case ErrorKind::Io: throw IoError(what);
    case ErrorKind::Parse: throw ParseError(what);
    case ErrorKind::Timeout: throw TimeoutError(what);
    case ErrorKind::HttpStatus: throw Error(ErrorKind::HttpStatus, what);
  }
  throw Error(e.kind(), what);
}

}  // namespace mvgrpo
