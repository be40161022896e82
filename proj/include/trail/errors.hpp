#pragma once

#include <stdexcept>
#include <string>

namespace trail {

// Argument or configuration violates a documented precondition.
class InvalidInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Probability mass vanished (e.g. every emission density underflowed at some
// timestep). Carries enough context to name the offending step.
class NumericalDegeneracyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss or gradient.
class NumericalDivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An exact/enumerative routine was asked for an instance above its size cap.
class SizeLimitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed external file (CSV, IDX, config, ...).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace trail
