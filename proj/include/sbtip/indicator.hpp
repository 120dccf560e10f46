#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sbtip/grid.hpp"
#include "sbtip/ipf.hpp"

namespace sbtip {

/// Which velocity enters the kinetic cost. ControlledDrift is f + sigma^2
/// grad ln phi, the drift of the controlled forward SDE; ControlOnly drops f.
enum class VelocityMode { ControlledDrift, ControlOnly };
std::string to_string(VelocityMode mode);
VelocityMode parse_velocity_mode(const std::string& name);

/// cost[n] = sum over cells of |v_n|^2 rho_n and I[n] its running time
/// average (1/t) int_0^t cost ds, trapezoid rule; I[0] = cost[0].
struct IndicatorSeries {
  std::vector<double> times;
  std::vector<double> cost;
  std::vector<double> I;
};

/// Velocity field of the chosen mode at slice n.
VectorField indicator_velocity(const BridgeSolution& sol, int n, VelocityMode mode);

/// Grid quadrature of the indicator along a converged bridge.
IndicatorSeries action_series(const BridgeSolution& sol,
                              VelocityMode mode = VelocityMode::ControlledDrift);

/// Indicator built from precomputed per-slice costs.
IndicatorSeries series_from_costs(std::vector<double> times, std::vector<double> cost);

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

/// I(T) estimated from controlled-SDE trajectories: each trajectory
/// contributes (1/T) sum_n w_n |v_n(X_n)|^2 with the same trapezoid weights
/// as the grid quadrature and v interpolated at the trajectory position.
MonteCarloEstimate action_monte_carlo(const BridgeSolution& sol, VelocityMode mode, std::size_t M,
                                      std::uint64_t seed, int substeps = 20);

enum class IndicatorColumn { Running, PerSlice };

struct TippingConfig {
  /// Threshold C; when empty, 5 times the median absolute successive
  /// difference of the analysed column.
  std::optional<double> threshold;
  int step_offset = 1;  // delta rho in time slices
  IndicatorColumn column = IndicatorColumn::Running;
};

struct Detection {
  std::size_t index = 0;
  double t = 0.0;
  double jump = 0.0;  // |I[index + offset] - I[index]|
};

double default_threshold(const std::vector<double>& values);

/// Every index with |I(t + delta) - I(t)| >= C and a nonzero jump, largest
/// jump first (ties by index).
std::vector<Detection> detect_tipping(const std::vector<double>& times,
                                      const std::vector<double>& values, int step_offset,
                                      double threshold);
std::vector<Detection> detect_tipping(const IndicatorSeries& series, const TippingConfig& cfg = {});

/// Cells with more mass than this enter the exact transport problem.
inline constexpr double kW2SupportThreshold = 1e-9;
inline constexpr std::size_t kW2SupportBudget = 1200;

/// Exact squared 2-Wasserstein distance between two densities on the same
/// grid: min-cost flow on the thresholded supports with squared Euclidean
/// cell-center cost. Raises TooLarge when a support exceeds `budget` cells.
double w2_reference(const DensityField& rho0, const DensityField& rho1,
                    std::size_t budget = kW2SupportBudget);

/// Bimodality coefficient (skew^2 + 1) / kurtosis of the density projected
/// on its principal axis. 5/9 for a uniform law, larger for two separated
/// modes.
double bimodality_coefficient(const DensityField& rho);

void write_indicator_csv(const std::string& path, const IndicatorSeries& series);
void write_detections_csv(const std::string& path, const std::vector<Detection>& detections);

}  // namespace sbtip
