// Error types and small shared utilities.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sdlm {

// Base class for all library errors.
class error : public std::runtime_error {
 public:
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller passed an out-of-contract argument (bad shape, bad range, bad flag).
class argument_error : public error {
 public:
  explicit argument_error(const std::string& msg) : error(msg) {}
};

// Input file violates its schema; message carries the line number when known.
class schema_error : public error {
 public:
  explicit schema_error(const std::string& msg) : error(msg) {}
};

// A structural invariant of a loaded object does not hold.
class validation_error : public error {
 public:
  explicit validation_error(const std::string& msg) : error(msg) {}
};

// An internal precondition was violated (disconnected edge, OOV token, ...).
class contract_error : public error {
 public:
  explicit contract_error(const std::string& msg) : error(msg) {}
};

// A primitive produced a non-finite value; training must fail fast.
class numeric_error : public contract_error {
 public:
  explicit numeric_error(const std::string& msg) : contract_error(msg) {}
};

// Malformed external input (e.g. invalid UTF-8).
class input_error : public error {
 public:
  explicit input_error(const std::string& msg) : error(msg) {}
};

template <typename T>
inline bool is_finite(T x) {
  return std::isfinite(static_cast<double>(x));
}

}  // namespace sdlm
