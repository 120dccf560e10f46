#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sbtip/grid.hpp"
#include "sbtip/sde.hpp"

namespace sbtip {

using LogSlices = std::vector<std::vector<double>>;

/// Discrete potentials at every time slice, stored as natural logs.
/// Cells where a potential vanishes hold -inf.
struct PotentialPair {
  TimeGrid time_grid;
  Grid2D grid;
  LogSlices log_phi;
  LogSlices log_phihat;
};

struct IpfOptions {
  int max_iter = 500;
  double tol = 1e-6;
  double truncation_sigmas = kDefaultTruncationSigmas;
  std::size_t kernel_memory_budget = std::size_t{1} << 30;
  /// When false an unconverged solve returns its last iterate instead of throwing.
  bool require_convergence = true;
};

struct BridgeSolution {
  PotentialPair potentials;
  SdeModel model;
  std::vector<DensityField> marginals;  // rho_n, n = 0..N
  std::vector<VectorField> control;     // u_n = sigma_n^2 grad ln phi_n
  int iterations = 0;
  double terminal_error = 0.0;
  bool converged = false;
  std::vector<double> error_history;    // terminal L1 error per iteration
  std::vector<double> hilbert_history;  // Hilbert distance between successive ln phi_T

  const TimeGrid& time_grid() const { return potentials.time_grid; }
  const Grid2D& grid() const { return potentials.grid; }
};

/// ln phi_n for n = N..0 by ln phi_n = log K_n exp(ln phi_{n+1}); result[n] is slice n.
LogSlices propagate_phi_backward(std::span<const double> log_phi_T, const KernelSequence& kernels);
/// ln phihat_{n+1} = log K_n^T exp(ln phihat_n); result[n] is slice n.
LogSlices propagate_phihat_forward(std::span<const double> log_phihat_0,
                                   const KernelSequence& kernels);

/// Hilbert projective distance max(a - b) - min(a - b) between two positive
/// functions given by their logs, over cells where both are finite.
double hilbert_distance(std::span<const double> log_a, std::span<const double> log_b);

/// Iterative proportional fitting on the composed step kernels of the model.
BridgeSolution ipf_solve(const DensityField& rho0, const DensityField& rho1, const SdeModel& model,
                         const TimeGrid& tg, const IpfOptions& options = {});

/// Marginals and forward controls recomputed from a potential pair, e.g.
/// after an explicit gauge change.
std::vector<DensityField> marginals_from_potentials(const PotentialPair& p);
VectorField control_from_log_phi(const SdeModel& model, const Grid2D& grid, double t,
                                 std::span<const double> log_phi);

/// f(t_n, .) + sigma^2 grad ln phi_n at cell centers.
VectorField controlled_drift(const BridgeSolution& sol, int n);
/// f(t_n, .) - sigma^2 grad ln phihat_n at cell centers.
VectorField backward_drift(const BridgeSolution& sol, int n);

/// Forward Euler on d psi = [f + sigma^2 grad ln phi] dt with the drift
/// interpolated bilinearly; returns psi at every slice.
std::vector<Vec2> most_probable_path(const BridgeSolution& sol, Vec2 x0);

/// Forward or backward SDE ensemble driven by the solved drift fields.
/// Forward runs start from rho0 at t = 0; backward runs start from rho1 at
/// t = T and state(m, n) is indexed by the physical slice n. Each slice
/// interval is split into `substeps` Euler steps with the drift interpolated
/// linearly in time between neighbouring slices.
PathEnsemble simulate_bridge(const BridgeSolution& sol, std::size_t M, std::uint64_t seed,
                             bool backward = false, int substeps = 1);

}  // namespace sbtip
