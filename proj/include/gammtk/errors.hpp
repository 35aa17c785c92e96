#pragma once

#include <stdexcept>
#include <string>

namespace gammtk {

enum class ErrorKind {
  schema,           // input columns missing or misnamed
  parse,            // malformed field in an input file
  spec,             // invalid model or basis specification
  rank,             // not enough distinct data to build a basis
  numeric,          // factorization or other numerical failure
  convergence,      // optimizer did not converge
  identifiability,  // model has unidentifiable directions
  consistency,      // derived quantities violate an internal invariant
  degenerate,       // degenerate input (e.g. zero-variance covariate)
  config,           // bad command-line / config-file request
  io                // file system failure
};

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::schema: return "schema";
    case ErrorKind::parse: return "parse";
    case ErrorKind::spec: return "spec";
    case ErrorKind::rank: return "rank";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::convergence: return "convergence";
    case ErrorKind::identifiability: return "identifiability";
    case ErrorKind::consistency: return "consistency";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  const char* kind_name() const { return error_kind_name(kind_); }

 private:
  ErrorKind kind_;
};

struct SchemaError : Error {
  explicit SchemaError(const std::string& m) : Error(ErrorKind::schema, m) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error(ErrorKind::parse, m) {}
};
struct SpecError : Error {
  explicit SpecError(const std::string& m) : Error(ErrorKind::spec, m) {}
};
struct RankError : Error {
  explicit RankError(const std::string& m) : Error(ErrorKind::rank, m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error(ErrorKind::numeric, m) {}
};
struct ConvergenceError : Error {
  explicit ConvergenceError(const std::string& m) : Error(ErrorKind::convergence, m) {}
};
struct IdentifiabilityError : Error {
  explicit IdentifiabilityError(const std::string& m) : Error(ErrorKind::identifiability, m) {}
};
struct ConsistencyError : Error {
  explicit ConsistencyError(const std::string& m) : Error(ErrorKind::consistency, m) {}
};
struct DegenerateError : Error {
  explicit DegenerateError(const std::string& m) : Error(ErrorKind::degenerate, m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};

}  // namespace gammtk
