// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <stdexcept>
#include <string>

namespace msmk {

/// Shape disagreement between operands (names both shapes in the message).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values or a domain violation such as log of a non-positive number.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A mask quota of zero or of every patch.
class DegenerateMaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A loss over an empty selection.
class DegenerateLossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedRateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LengthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace msmk
