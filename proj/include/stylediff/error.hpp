#pragma once

#include <stdexcept>
#include <string>

namespace stylediff {

// Error taxonomy shared by every module.  The CLI maps these onto process
// exit codes: configuration/input problems -> 2, numerical failures -> 3,
// I/O failures -> 4 (0 is success).

// A parameter or configuration value is outside its documented range, or two
// options contradict each other.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A runtime input (argument value, array shape, index) violates a
// precondition.  Reported with the same exit code as ConfigError.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A requested piece of work exceeds a hard resource bound (for example the
// fused attention size cap).  Treated as a configuration problem.
class ResourceError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// A computation produced NaN/Inf or otherwise left the numeric domain.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File or stream level failure (missing file, short read, bad magic).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitIo = 4;

}  // namespace stylediff
