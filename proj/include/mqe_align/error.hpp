#pragma once

#include <stdexcept>
#include <string>

namespace mqe {

// Every failure raised by the library carries a short machine-readable kind
// so the CLI can print a one-line `error kind=<kind> msg="..."` record.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error("dimension", msg) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract", msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error("format", msg) {}
};

class SequenceError : public Error {
 public:
  explicit SequenceError(const std::string& msg) : Error("sequence", msg) {}
};

class AuditError : public Error {
 public:
  explicit AuditError(const std::string& msg) : Error("audit", msg) {}
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& msg) : Error("load", msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error("numeric", msg) {}
};

}  // namespace mqe
