#pragma once

#include <stdexcept>
#include <string>

namespace neuralmd {

/// Shape, layout or bookkeeping mismatch (wrong parameter length, foreign node id, grid mismatch).
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite value appeared during evaluation. `layer()` is the tape node that produced it,
/// or the time stamp for time steppers.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, long layer) : std::runtime_error(what), layer_(layer) {}
  long layer() const noexcept { return layer_; }

 private:
  long layer_;
};

/// Input data cannot be used (e.g. not periodic on the box).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Degenerate metric (zero denominator).
class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Time step does not resolve the O(eps^2) wavelength.
class ResolutionError : public std::runtime_error {
 public:
  ResolutionError(const std::string& what, double required_dt)
      : std::runtime_error(what), required_dt_(required_dt) {}
  double required_dt() const noexcept { return required_dt_; }

 private:
  double required_dt_;
};

}  // namespace neuralmd
