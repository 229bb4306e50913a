#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace emae {

/// Root of every exception thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or matrix dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A forward operation produced NaN or Inf from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Loss is undefined for the given inputs (empty mask, all-zero target).
class DegenerateLossError : public Error {
 public:
  using Error::Error;
};

/// Operation not valid in the model's current mode (pretrain vs fine-tune).
class ModeError : public Error {
 public:
  using Error::Error;
};

/// Mapped tensor shapes disagree during external weight import.
class ImportError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary container. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace emae
