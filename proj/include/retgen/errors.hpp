#pragma once

#include <stdexcept>
#include <string>

namespace retgen {

// Error taxonomy shared by all modules. Every error carries a stable kind
// string so the CLI can emit machine-parseable failure lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& m) : Error("index", m) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

struct MaskError : Error {
  explicit MaskError(const std::string& m) : Error("mask", m) {}
};

struct ArgumentError : Error {
  explicit ArgumentError(const std::string& m) : Error("argument", m) {}
};

struct PreconditionError : Error {
  explicit PreconditionError(const std::string& m) : Error("precondition", m) {}
};

struct TruncationError : Error {
  explicit TruncationError(const std::string& m) : Error("truncation", m) {}
};

struct ContextOverflowError : Error {
  explicit ContextOverflowError(const std::string& m)
      : Error("context_overflow", m) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error("parse", m) {}
};

struct IntegrityError : Error {
  explicit IntegrityError(const std::string& m) : Error("integrity", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct DivergenceError : Error {
  explicit DivergenceError(const std::string& m) : Error("divergence", m) {}
};

struct UndefinedMetricError : Error {
  explicit UndefinedMetricError(const std::string& m) : Error("undefined_metric", m) {}
};

}  // namespace retgen
