#include "sbtip/error.hpp"

#include <utility>

namespace sbtip {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidBandwidth: return "InvalidBandwidth";
    case ErrorCode::ZeroMass: return "ZeroMass";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonFiniteDrift: return "NonFiniteDrift";
    case ErrorCode::DegenerateNoise: return "DegenerateNoise";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::SupportMismatch: return "SupportMismatch";
    case ErrorCode::ExitedGrid: return "ExitedGrid";
    case ErrorCode::NonFinitePolicy: return "NonFinitePolicy";
    case ErrorCode::TerminalDensityUnderflow: return "TerminalDensityUnderflow";
    case ErrorCode::DivergedTraining: return "DivergedTraining";
    case ErrorCode::UnassignedSample: return "UnassignedSample";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::ValidationError: return "ValidationError";
    case ErrorCode::EmptyFile: return "EmptyFile";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

NotConvergedError::NotConvergedError(double last_error, int iterations)
    : Error(ErrorCode::NotConverged,
            "terminal L1 error " + std::to_string(last_error) + " after " +
                std::to_string(iterations) + " iterations"),
      last_error_(last_error),
      iterations_(iterations) {}

NonFiniteDriftError::NonFiniteDriftError(double t, std::size_t trajectory, std::size_t step)
    : Error(ErrorCode::NonFiniteDrift,
            "drift not finite at t=" + std::to_string(t) + " (trajectory " +
                std::to_string(trajectory) + ", step " + std::to_string(step) + ")"),
      t_(t),
      trajectory_(trajectory),
      step_(step) {}

NonFinitePolicyError::NonFinitePolicyError(double t, double x, double y, std::size_t trajectory)
    : Error(ErrorCode::NonFinitePolicy,
            "policy output not finite at t=" + std::to_string(t) + ", x=(" + std::to_string(x) +
                ", " + std::to_string(y) + ") (trajectory " + std::to_string(trajectory) + ")"),
      t_(t),
      x_(x),
      y_(y),
      trajectory_(trajectory) {}

DivergedTrainingError::DivergedTrainingError(int iteration, double loss, double initial_loss)
    : Error(ErrorCode::DivergedTraining,
            "loss " + std::to_string(loss) + " at iteration " + std::to_string(iteration) +
                " exceeds 10x the initial magnitude " + std::to_string(initial_loss)),
      iteration_(iteration),
      loss_(loss) {}

ExitedGridError::ExitedGridError(double exit_time)
    : Error(ErrorCode::ExitedGrid, "path left the grid at t=" + std::to_string(exit_time)),
      exit_time_(exit_time) {}

ParseError::ParseError(std::size_t line, const std::string& what)
    : Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": " + what), line_(line), detail_(what) {}

namespace {

std::string join_violations(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : "; ") + s;
  return out;
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> violations)
    : Error(ErrorCode::ValidationError, join_violations(violations)),
      violations_(std::move(violations)) {}

}  // namespace sbtip
