#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace slashlab {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A spectrum, mean or score set that carries no information (all zeros).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Pulse frequencies whose period fits inside the requested horizon.
class AliasingError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or gradient.
class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, std::int64_t step)
      : Error(what + " at step " + std::to_string(step)), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

/// Structural problem in an SDHA file (magic, version, checksum).
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Payload inconsistent with its declared shape, or truncated.
class CorruptError : public Error {
 public:
  CorruptError(const std::string& what, std::string tensor)
      : Error(what + " in tensor '" + tensor + "'"), tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

class MissingTensorError : public Error {
 public:
  using Error::Error;
};

}  // namespace slashlab
