#pragma once

#include <stdexcept>
#include <string>

namespace xkt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (empty input, too few students, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes do not line up.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// An id fell outside the embedding vocabulary.
class VocabularyError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Malformed input file.
class ParseError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// A field holds a value outside its domain (e.g. response not in {0,1}).
class ValueError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// NaN/Inf produced, or division by an exact zero.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace xkt
