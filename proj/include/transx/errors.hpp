#pragma once

#include <stdexcept>
#include <string>

namespace transx {

/// Extents or layouts of operands do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An argument lies outside the domain an operation accepts.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or Inf appeared in an operation result.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incremental caches were fed out of order.
class CacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration file or flag could not be parsed or is inconsistent.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace transx
