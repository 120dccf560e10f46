#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sbtip/grid.hpp"
#include "sbtip/sde.hpp"

namespace sbtip {

/// Atomic target: points y_i with weights nu_i >= 0 summing to one.
struct DiscreteTarget {
  std::vector<Vec2> points;
  std::vector<double> weights;

  /// Rescales the weights to unit sum; rejects empty, non-finite or
  /// negative input.
  static DiscreteTarget normalized(std::vector<Vec2> points, std::vector<double> weights);
  std::size_t size() const { return points.size(); }
  void validate() const;
};

/// Heights are measured from the Voronoi baseline: the support plane of
/// target i is <x, y_i> - |y_i|^2 / 2 + h_i, so h = 0 assigns every point to
/// its nearest target and h_i - |y_i|^2 / 2 is the plain Brenier height.
using HeightVector = std::vector<double>;

/// Subtracts the mean so that sum(h) == 0.
void gauge_fix(HeightVector& h);

/// argmax_i <x, y_i> - |y_i|^2 / 2 + h_i, ties (within a relative 1e-12)
/// resolved to the lowest index.
std::size_t assign_cell(Vec2 x, const DiscreteTarget& target, const HeightVector& h);

/// Fractions of N source samples falling into each cell. The samples come
/// from the stream (seed, block, Sampling).
std::vector<double> estimate_weights(const StateSampler& source, const DiscreteTarget& target,
                                     const HeightVector& h, std::size_t N, std::uint64_t seed,
                                     std::uint64_t block = 0);

/// Uniform law on an axis-aligned box.
StateSampler uniform_box_sampler(double xmin, double xmax, double ymin, double ymax);

enum class SourceMeasure { UniformBox, Empirical };
/// Uniform on the bounding box of the points, or the points themselves.
StateSampler source_sampler(const std::vector<Vec2>& points, SourceMeasure measure);

struct FitOptions {
  std::size_t samples = 100000;  // N per weight estimate, fresh each step
  int patience = 20;             // s
  double step = 1.0;
  double min_step = 1e-3;
  int max_steps = 2000;
  std::uint64_t seed = 0;
};

struct FitResult {
  HeightVector h;                     // mean zero
  std::vector<double> weights;        // estimate at the returned h
  std::vector<double> energy_history; // accumulated energy after each step
  std::vector<double> step_history;
  int steps = 0;
  /// max_steps was hit while the energy was still decreasing.
  bool stalled = false;
};

/// Monte Carlo gradient descent on the semi-discrete energy
/// E(h) = int_0^h sum_i w_i(eta) d eta_i - sum_i h_i nu_i. The gradient is
/// w(h) - nu; E is accumulated along the path with the trapezoid rule, using
/// the half of each sample batch that did not choose the step. When E has
/// not improved for `patience` steps the step is halved; the fit ends once
/// the step would drop below min_step.
FitResult fit_heights(const StateSampler& source, const DiscreteTarget& target,
                      const FitOptions& options = {});

/// Trapezoid estimate of E(h_b) - E(h_a) along the straight segment, with
/// `pieces` subdivisions and fresh samples at every node.
double energy_difference(const StateSampler& source, const DiscreteTarget& target,
                         const HeightVector& a, const HeightVector& b, std::size_t N,
                         std::uint64_t seed, int pieces = 16);

struct RegionPairing {
  std::vector<int> regions;              // sorted distinct region labels
  DiscreteTarget target;                 // region centroids weighted by mass
  FitResult fit;
  std::vector<int> source_region;        // region label per source point
  std::vector<std::size_t> source_cell;  // target index per source point
};

/// Splits the source among target regions: region centroids weighted by
/// their point counts form the discrete target, heights are fitted against
/// the source measure and every source point is labelled by its cell.
RegionPairing pair_regions(const std::vector<Vec2>& source, const std::vector<Vec2>& targets,
                           const std::vector<int>& target_labels, const FitOptions& options = {},
                           SourceMeasure measure = SourceMeasure::Empirical);

void write_heights_csv(const std::string& path, const DiscreteTarget& target, const HeightVector& h);
void write_energy_csv(const std::string& path, const FitResult& fit);

}  // namespace sbtip
