#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace nao {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A token sequence that does not describe a legal architecture.
class GrammarError : public Error {
 public:
  GrammarError(std::size_t position, std::string reason)
      : Error("grammar error at token " + std::to_string(position) + ": " + reason),
        position_(position),
        reason_(std::move(reason)) {}

  std::size_t position() const noexcept { return position_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t position_;
  std::string reason_;
};

class SpaceTooLarge : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& what, std::optional<int> epoch = std::nullopt)
      : Error(epoch ? what + " (epoch " + std::to_string(*epoch) + ")" : what), epoch_(epoch) {}

  std::optional<int> epoch() const noexcept { return epoch_; }

 private:
  std::optional<int> epoch_;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class MissingDataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Raised when an architecture evaluator fails; carries the offending
/// architecture as its JSON text.
class EvaluatorError : public Error {
 public:
  EvaluatorError(const std::string& what, std::string arch_json)
      : Error(what), arch_json_(std::move(arch_json)) {}

  const std::string& arch_json() const noexcept { return arch_json_; }

 private:
  std::string arch_json_;
};

}  // namespace nao
