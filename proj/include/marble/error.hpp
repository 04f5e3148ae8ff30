#pragma once

#include <stdexcept>
#include <string>

namespace marble {

// Base of every error raised by the library. Each subclass maps to a
// process exit code in the CLI (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class DomainError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class AlignmentError : public Error { using Error::Error; };
class CountError : public Error { using Error::Error; };
class UndefinedValueError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class ParseError : public Error { using Error::Error; };
class DuplicateError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class CheckpointError : public Error { using Error::Error; };
class SpecError : public Error { using Error::Error; };

// 0 success, 2 config error, 3 data/format error, 4 numeric failure.
int exit_code(const std::exception& e);

}  // namespace marble
