#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sbtip/grid.hpp"
#include "sbtip/rng.hpp"

namespace sbtip {

enum class NoiseKind { Constant, Linear, Cosine };

/// Scalar diffusion level sigma_t. Linear and cosine schedules move from
/// sigma_start at t = 0 to sigma_end at t = horizon.
struct NoiseSchedule {
  NoiseKind kind = NoiseKind::Constant;
  double sigma_start = 0.0;
  double sigma_end = 0.0;
  double horizon = 1.0;

  static NoiseSchedule constant(double sigma) { return {NoiseKind::Constant, sigma, sigma, 1.0}; }
  double operator()(double t) const;
  bool is_constant() const { return kind == NoiseKind::Constant || sigma_start == sigma_end; }
  void validate() const;
};

class TimeGrid {
 public:
  TimeGrid(double T, int N);
  double horizon() const { return T_; }
  int steps() const { return N_; }
  double dt() const { return T_ / N_; }
  /// t_n = T n / N, so t_N == T exactly.
  double time(int n) const { return T_ * n / N_; }

 private:
  double T_;
  int N_;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

using DriftFn = std::function<Vec2(double t, Vec2 x)>;
using JacobianFn = std::function<Mat2(double t, Vec2 x)>;

/// Prior dynamics dX = f(t, X) dt + sigma_t diag(axis_noise) dW.
/// The drift must be a pure function; it may be called concurrently.
struct SdeModel {
  DriftFn drift;
  JacobianFn jacobian;  // optional; central differences when empty
  NoiseSchedule noise;
  Vec2 axis_noise{1.0, 1.0};
  std::optional<Interval> clamp_x;
  std::optional<Interval> clamp_y;
  bool autonomous = false;

  Vec2 sigma(double t) const { return noise(t) * axis_noise; }
  Vec2 clamp(Vec2 x) const;
  Mat2 drift_jacobian(double t, Vec2 x) const;
  void validate() const;
};

/// x + f dt + sigma sqrt(dt) xi (componentwise sigma), before clamping. All
/// integrators share this expression so that equal inputs give equal bits.
inline Vec2 euler_increment(Vec2 x, Vec2 f, Vec2 sigma, double dt, Vec2 xi) {
  const double sq = std::sqrt(dt);
  return {x.x + f.x * dt + sigma.x * sq * xi.x, x.y + f.y * dt + sigma.y * sq * xi.y};
}

Vec2 euler_maruyama_step(const SdeModel& model, Vec2 x, double t, double dt, Vec2 xi);

using StateSampler = std::function<Vec2(RandomStream&)>;

StateSampler point_sampler(Vec2 x0);
StateSampler gaussian_sampler(Vec2 mean, Vec2 stddev);
/// Picks a cell by mass, then a uniform point inside it.
StateSampler density_sampler(const DensityField& density);
/// Uniform choice among the given points.
StateSampler points_sampler(std::vector<Vec2> points);

class PathEnsemble {
 public:
  PathEnsemble(TimeGrid time_grid, std::size_t trajectories);

  const TimeGrid& time_grid() const { return tg_; }
  std::size_t trajectories() const { return m_; }
  std::size_t slices() const { return static_cast<std::size_t>(tg_.steps()) + 1; }
  Vec2 state(std::size_t traj, std::size_t step) const { return states_[traj * slices() + step]; }
  Vec2& state(std::size_t traj, std::size_t step) { return states_[traj * slices() + step]; }
  std::vector<Vec2> slice(std::size_t step) const;
  std::vector<Vec2> terminal() const { return slice(slices() - 1); }

 private:
  TimeGrid tg_;
  std::size_t m_;
  std::vector<Vec2> states_;
};

/// M Euler-Maruyama trajectories. Trajectory m draws its initial state from
/// stream (seed, m, InitialState) and its increments from (seed, m, Increments).
PathEnsemble simulate_ensemble(const SdeModel& model, const StateSampler& x0_sampler,
                               const TimeGrid& tg, std::size_t M, std::uint64_t seed);

void write_ensemble_csv(const std::string& path, const PathEnsemble& ensemble);

inline constexpr double kDefaultTruncationSigmas = 6.0;

/// DegenerateNoise when sigma_t sqrt(dt) falls below a quarter cell on an
/// axis that has more than one cell.
void check_noise_resolution(const SdeModel& model, double t, double dt, const Grid2D& grid);

/// Discrete Gaussian transition kernel of one Euler step from t to t + dt,
/// evaluated at cell centers, truncated per axis and row-normalized.
KernelMatrix step_kernel(const SdeModel& model, double t, double dt, const Grid2D& grid,
                         double truncation_sigmas = kDefaultTruncationSigmas);

/// Per-step kernels of a time grid. Autonomous models with constant noise
/// share a single kernel; otherwise kernels are built on demand and kept
/// while they fit in the memory budget.
class KernelSequence {
 public:
  KernelSequence(SdeModel model, TimeGrid tg, Grid2D grid,
                 double truncation_sigmas = kDefaultTruncationSigmas,
                 std::size_t memory_budget_bytes = std::size_t{1} << 30);

  const TimeGrid& time_grid() const { return tg_; }
  const Grid2D& grid() const { return grid_; }
  const SdeModel& model() const { return model_; }
  /// Kernel of step n (from t_n to t_{n+1}).
  std::shared_ptr<const KernelMatrix> operator()(int n) const;

 private:
  SdeModel model_;
  TimeGrid tg_;
  Grid2D grid_;
  double truncation_;
  std::size_t budget_;
  bool shared_;
  mutable std::vector<std::shared_ptr<const KernelMatrix>> cache_;
  mutable std::size_t cached_bytes_ = 0;
};

}  // namespace sbtip
