#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sbtip {

enum class ErrorCode {
  EmptyInput,
  InvalidBandwidth,
  ZeroMass,
  GridMismatch,
  InvalidArgument,
  NonFiniteDrift,
  DegenerateNoise,
  Diverged,
  NotConverged,
  SupportMismatch,
  ExitedGrid,
  NonFinitePolicy,
  TerminalDensityUnderflow,
  DivergedTraining,
  UnassignedSample,
  TooLarge,
  ParseError,
  ValidationError,
  EmptyFile,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Base exception for every failure raised by the library. The code lets
/// callers branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what);
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class NotConvergedError : public Error {
 public:
  NotConvergedError(double last_error, int iterations);
  double last_error() const noexcept { return last_error_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double last_error_;
  int iterations_;
};

class NonFiniteDriftError : public Error {
 public:
  NonFiniteDriftError(double t, std::size_t trajectory, std::size_t step);
  std::size_t trajectory() const noexcept { return trajectory_; }
  std::size_t step() const noexcept { return step_; }
  double time() const noexcept { return t_; }

 private:
  double t_;
  std::size_t trajectory_;
  std::size_t step_;
};

class NonFinitePolicyError : public Error {
 public:
  NonFinitePolicyError(double t, double x, double y, std::size_t trajectory);
  double time() const noexcept { return t_; }
  double x() const noexcept { return x_; }
  double y() const noexcept { return y_; }
  std::size_t trajectory() const noexcept { return trajectory_; }

 private:
  double t_, x_, y_;
  std::size_t trajectory_;
};

class DivergedTrainingError : public Error {
 public:
  DivergedTrainingError(int iteration, double loss, double initial_loss);
  int iteration() const noexcept { return iteration_; }
  double loss() const noexcept { return loss_; }

 private:
  int iteration_;
  double loss_;
};

class ExitedGridError : public Error {
 public:
  explicit ExitedGridError(double exit_time);
  double exit_time() const noexcept { return exit_time_; }

 private:
  double exit_time_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what);
  std::size_t line() const noexcept { return line_; }
  /// Message without the code and line prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

/// Every violation found while validating an input, not just the first.
class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  std::vector<std::string> violations_;
};

}  // namespace sbtip
