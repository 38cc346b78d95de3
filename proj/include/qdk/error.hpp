// Copyright (C) 2026 The QDK Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace qdk {

// Base of every error raised by the library. Callers that only need to report
// a failure can catch this; the subclasses exist so tests and the CLI can tell
// categories apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Incompatible tensor extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Linear system could not be solved (e.g. singular Gram matrix).
class SolverError : public Error {
 public:
  using Error::Error;
};

// Iterative optimization diverged.
class OptimizationError : public Error {
 public:
  using Error::Error;
};

// Simulator program could not be scheduled.
class ScheduleError : public Error {
 public:
  using Error::Error;
};

// Working set does not fit on-chip memory.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Malformed file or configuration.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Layer kind that the requested operation does not support.
class UnsupportedLayerError : public Error {
 public:
  using Error::Error;
};

}  // namespace qdk
