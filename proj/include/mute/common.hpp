#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace mute {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Base of every error the library raises.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, hyperparameter, or argument value.
class ParameterError : public Error {
public:
  using Error::Error;
};

/// Input data out of range for the model (token ids, dimensions).
class InputError : public Error {
public:
  using Error::Error;
};

/// Binary file with wrong magic, version, or size.
class FormatError : public Error {
public:
  using Error::Error;
};

/// Text file that fails to parse; carries the 1-based line number.
class ParseError : public Error {
public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

/// Representation matrices whose centered Gram matrix vanishes.
class DegeneracyError : public Error {
public:
  using Error::Error;
};

/// Two tables or activation groups that do not cover the same items.
class AlignmentError : public Error {
public:
  using Error::Error;
};

/// Layer selection attempted on an empty region.
class SelectionError : public Error {
public:
  using Error::Error;
};

/// Malformed samples (e.g. empty answers).
class DataError : public Error {
public:
  using Error::Error;
};

inline void require(bool cond, std::string_view msg) {
  if (!cond) throw ParameterError(std::string(msg));
}

/// 64-bit FNV-1a, used for config hashes and checksums in reports.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline constexpr std::string_view kToolVersion = "0.1.0";

}  // namespace mute
