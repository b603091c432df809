#pragma once

// Shared aliases, constants and error types for the cpbounds library.

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpbounds {

inline constexpr double kSpeedOfLight = 299792458.0;  // m/s
inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

using Vec3 = Eigen::Vector3d;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Integer vector used for ambiguities and lattice points. Ordered
/// lexicographically by std::vector's operator<, which is the tie-break rule.
using IntVector = std::vector<std::int64_t>;

inline Vec to_eigen(const IntVector& v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = static_cast<double>(v[i]);
  return out;
}

/// Input that violates a documented precondition (exit status 1 in the CLI).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed configuration; carries the offending field name.
class ConfigError : public ValidationError {
 public:
  ConfigError(std::string field, const std::string& what)
      : ValidationError("config field '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Numerical failure (exit status 2 in the CLI).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A matrix that had to be inverted or factored is (numerically) singular.
class SingularMatrixError : public NumericalError {
 public:
  SingularMatrixError(const std::string& what, double condition)
      : NumericalError(what + " (condition number " + std::to_string(condition) + ")"),
        condition_(condition) {}
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

}  // namespace cpbounds
