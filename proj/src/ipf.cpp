#include "sbtip/ipf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sbtip/error.hpp"

namespace sbtip {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> log_of(const DensityField& f) {
  std::vector<double> out(f.mass().size());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = f[c] > 0.0 ? std::log(f[c]) : kNegInf;
  return out;
}

double max_finite(std::span<const double> v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  return m;
}

// Normalized exp(a + b), computed relative to the largest finite sum.
DensityField product_density(const Grid2D& grid, std::span<const double> a,
                             std::span<const double> b) {
  std::vector<double> s(a.size());
  double m = kNegInf;
  for (std::size_t c = 0; c < s.size(); ++c) {
    s[c] = a[c] + b[c];
    if (std::isnan(s[c])) s[c] = kNegInf;
    m = std::max(m, s[c]);
  }
  if (m == kNegInf) throw Error(ErrorCode::ZeroMass, "potential product vanishes everywhere");
  for (double& v : s) v = std::exp(v - m);
  return normalize(DensityField(grid, std::move(s)));
}

}  // namespace

LogSlices propagate_phi_backward(std::span<const double> log_phi_T, const KernelSequence& kernels) {
  const int N = kernels.time_grid().steps();
  LogSlices out(static_cast<std::size_t>(N) + 1);
  out[N].assign(log_phi_T.begin(), log_phi_T.end());
  for (int n = N - 1; n >= 0; --n) out[n] = kernels(n)->log_expectation(out[n + 1]);
  return out;
}

LogSlices propagate_phihat_forward(std::span<const double> log_phihat_0,
                                   const KernelSequence& kernels) {
  const int N = kernels.time_grid().steps();
  LogSlices out(static_cast<std::size_t>(N) + 1);
  out[0].assign(log_phihat_0.begin(), log_phihat_0.end());
  for (int n = 0; n < N; ++n) out[n + 1] = kernels(n)->log_push(out[n]);
  return out;
}

double hilbert_distance(std::span<const double> a, std::span<const double> b) {
  double hi = kNegInf, lo = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < a.size(); ++c) {
    if (!std::isfinite(a[c]) || !std::isfinite(b[c])) continue;
    const double d = a[c] - b[c];
    hi = std::max(hi, d);
    lo = std::min(lo, d);
  }
  return hi >= lo ? hi - lo : 0.0;
}

std::vector<DensityField> marginals_from_potentials(const PotentialPair& p) {
  std::vector<DensityField> out;
  out.reserve(p.log_phi.size());
  for (std::size_t n = 0; n < p.log_phi.size(); ++n)
    out.push_back(product_density(p.grid, p.log_phi[n], p.log_phihat[n]));
  return out;
}

namespace {

// sign * sigma^2 grad ln(potential) added to the prior drift. Only cells
// where the potential vanishes are floored, at or below the smallest finite
// value and never above max + ln 1e-30; both bounds move with the gauge.
VectorField drift_with_potential(const SdeModel& model, const Grid2D& grid, double t,
                                 std::span<const double> log_pot, double sign, bool include_prior) {
  double lo = std::numeric_limits<double>::infinity();
  for (double v : log_pot)
    if (std::isfinite(v)) lo = std::min(lo, v);
  const double floor = std::min(lo, max_finite(log_pot) + std::log(kDefaultLogFloor));
  const VectorField g = grad_of_log_values(grid, log_pot, floor);
  const Vec2 s = model.sigma(t);
  std::vector<double> vx(grid.cells()), vy(grid.cells());
  for (std::size_t c = 0; c < grid.cells(); ++c) {
    Vec2 v{sign * s.x * s.x * g.vx()[c], sign * s.y * s.y * g.vy()[c]};
    if (include_prior) {
      const Vec2 f = model.drift(t, grid.center(c));
      if (!is_finite(f)) throw NonFiniteDriftError(t, c, 0);
      v += f;
    }
    vx[c] = v.x;
    vy[c] = v.y;
  }
  return VectorField(grid, std::move(vx), std::move(vy));
}

}  // namespace

VectorField control_from_log_phi(const SdeModel& model, const Grid2D& grid, double t,
                                 std::span<const double> log_phi) {
  return drift_with_potential(model, grid, t, log_phi, 1.0, false);
}

BridgeSolution ipf_solve(const DensityField& rho0, const DensityField& rho1, const SdeModel& model,
                         const TimeGrid& tg, const IpfOptions& o) {
  if (!(rho0.grid() == rho1.grid()))
    throw Error(ErrorCode::GridMismatch, "boundary densities live on different grids");
  if (o.max_iter < 1) throw Error(ErrorCode::InvalidArgument, "max_iter must be >= 1");
  if (!(o.tol > 0.0)) throw Error(ErrorCode::InvalidArgument, "tol must be > 0");
  const Grid2D& grid = rho0.grid();
  const DensityField p0 = normalize(rho0), p1 = normalize(rho1);
  const KernelSequence kernels(model, tg, grid, o.truncation_sigmas, o.kernel_memory_budget);
  const auto lr0 = log_of(p0), lr1 = log_of(p1);
  const std::size_t cells = grid.cells();
  const int N = tg.steps();

  BridgeSolution sol{PotentialPair{tg, grid, {}, {}}, model, {}, {}, 0, 0.0, false, {}, {}};
  std::vector<double> log_phi_T(cells, 0.0);
  for (int it = 1; it <= o.max_iter; ++it) {
    LogSlices phi = propagate_phi_backward(log_phi_T, kernels);
    std::vector<double> lh0(cells);
    for (std::size_t c = 0; c < cells; ++c) {
      if (p0[c] > 0.0 && phi[0][c] == kNegInf)
        throw Error(ErrorCode::SupportMismatch,
                    "initial density has mass where the terminal potential cannot reach");
      lh0[c] = p0[c] > 0.0 ? lr0[c] - phi[0][c] : kNegInf;
    }
    LogSlices phihat = propagate_phihat_forward(lh0, kernels);
    const auto& lhT = phihat[N];

    double err = 0.0;
    std::vector<double> next(cells);
    for (std::size_t c = 0; c < cells; ++c) {
      const double s = log_phi_T[c] + lhT[c];
      const double m = std::isnan(s) ? 0.0 : std::exp(s);
      err += std::abs(m - p1[c]);
      if (p1[c] > 0.0 && lhT[c] == kNegInf)
        throw Error(ErrorCode::SupportMismatch,
                    "terminal density has mass where the propagated prior vanishes");
      next[c] = p1[c] > 0.0 ? lr1[c] - lhT[c] : kNegInf;
    }
    const double shift = max_finite(next);
    for (double& v : next) v -= shift;

    sol.error_history.push_back(err);
    sol.hilbert_history.push_back(hilbert_distance(next, log_phi_T));
    sol.iterations = it;
    sol.terminal_error = err;
    const bool done = err < o.tol;
    if (done || it == o.max_iter) {
      sol.converged = done;
      sol.potentials.log_phi = std::move(phi);
      sol.potentials.log_phihat = std::move(phihat);
      break;
    }
    log_phi_T = std::move(next);
  }
  if (!sol.converged && o.require_convergence)
    throw NotConvergedError(sol.terminal_error, sol.iterations);

  sol.marginals = marginals_from_potentials(sol.potentials);
  sol.control.reserve(static_cast<std::size_t>(N) + 1);
  for (int n = 0; n <= N; ++n)
    sol.control.push_back(control_from_log_phi(model, grid, tg.time(n), sol.potentials.log_phi[n]));
  return sol;
}

VectorField controlled_drift(const BridgeSolution& sol, int n) {
  if (n < 0 || n > sol.time_grid().steps())
    throw Error(ErrorCode::InvalidArgument, "time slice out of range");
  return drift_with_potential(sol.model, sol.grid(), sol.time_grid().time(n),
                              sol.potentials.log_phi[n], 1.0, true);
}

VectorField backward_drift(const BridgeSolution& sol, int n) {
  if (n < 0 || n > sol.time_grid().steps())
    throw Error(ErrorCode::InvalidArgument, "time slice out of range");
  return drift_with_potential(sol.model, sol.grid(), sol.time_grid().time(n),
                              sol.potentials.log_phihat[n], -1.0, true);
}

std::vector<Vec2> most_probable_path(const BridgeSolution& sol, Vec2 x0) {
  const Grid2D& g = sol.grid();
  const TimeGrid& tg = sol.time_grid();
  if (!g.contains(x0)) throw ExitedGridError(0.0);
  std::vector<Vec2> path{x0};
  Vec2 x = x0;
  for (int n = 0; n < tg.steps(); ++n) {
    const Vec2 v = controlled_drift(sol, n).interpolate(x);
    x = sol.model.clamp(x + tg.dt() * v);
    if (!g.contains(x)) throw ExitedGridError(tg.time(n + 1));
    path.push_back(x);
  }
  return path;
}

PathEnsemble simulate_bridge(const BridgeSolution& sol, std::size_t M, std::uint64_t seed,
                             bool backward, int substeps) {
  if (M < 1) throw Error(ErrorCode::InvalidArgument, "ensemble size must be >= 1");
  if (substeps < 1) throw Error(ErrorCode::InvalidArgument, "substeps must be >= 1");
  const TimeGrid& tg = sol.time_grid();
  const int N = tg.steps();
  std::vector<VectorField> drift;
  drift.reserve(static_cast<std::size_t>(N) + 1);
  for (int n = 0; n <= N; ++n) drift.push_back(backward ? backward_drift(sol, n) : controlled_drift(sol, n));
  const StateSampler start = density_sampler(backward ? sol.marginals[N] : sol.marginals[0]);
  PathEnsemble ens(tg, M);
  const double h = tg.dt() / substeps;
  // Backward runs integrate the reversed-time SDE: in reversed time s = T - t
  // the drift is minus the backward drift.
  const double sign = backward ? -1.0 : 1.0;
  for (std::size_t m = 0; m < M; ++m) {
    RandomStream init(seed, m, StreamPurpose::InitialState);
    RandomStream noise(seed, m, StreamPurpose::Increments);
    Vec2 x = sol.model.clamp(start(init));
    ens.state(m, backward ? N : 0) = x;
    for (int k = 0; k < N; ++k) {
      const int from = backward ? N - k : k;
      const int to = backward ? N - k - 1 : k + 1;
      for (int j = 0; j < substeps; ++j) {
        const double a = static_cast<double>(j) / substeps;
        const double t = tg.time(from) + (tg.time(to) - tg.time(from)) * a;
        const Vec2 v = (1.0 - a) * drift[from].interpolate(x) + a * drift[to].interpolate(x);
        const Vec2 xi{noise.normal(), noise.normal()};
        x = sol.model.clamp(euler_increment(x, sign * v, sol.model.sigma(t), h, xi));
      }
      ens.state(m, to) = x;
    }
  }
  return ens;
}

}  // namespace sbtip
