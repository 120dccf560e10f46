#pragma once

#include <array>
#include <complex>
#include <string>
#include <vector>

#include "sbtip/grid.hpp"
#include "sbtip/sde.hpp"

namespace sbtip {

/// Morris-Lecar constants in mV, ms, mS/cm^2, uA/cm^2, uF/cm^2.
struct MLParams {
  double g_Ca = 4.4, g_K = 8.0, g_L = 2.0;
  double V_Ca = 120.0, V_K = -84.0, V_L = -60.0;
  double I = 92.0;
  double C = 20.0;
  double phi = 0.04;
  double V1 = -1.2, V2 = 18.0, V3 = 2.0, V4 = 30.0;

  static MLParams class_one();
  static MLParams class_two();
  /// "class1"/"class2" (also "I", "II", "1", "2").
  static MLParams named(const std::string& name);
  void validate() const;
};

double ml_m_inf(double v, const MLParams& p);
double ml_w_inf(double v, const MLParams& p);
double ml_tau_w(double v, const MLParams& p);

/// (dv/dt, dw/dt) at s = (v [mV], w).
Vec2 ml_drift(Vec2 s, const MLParams& p);
Mat2 ml_jacobian(Vec2 s, const MLParams& p);

/// Solvers work in scaled coordinates (v / kVoltageScale, w) so that both
/// axes have comparable spread on a grid.
inline constexpr double kVoltageScale = 10.0;
inline Vec2 to_scaled(Vec2 s) { return {s.x / kVoltageScale, s.y}; }
inline Vec2 from_scaled(Vec2 x) { return {x.x * kVoltageScale, x.y}; }
std::vector<Vec2> to_scaled(const std::vector<Vec2>& states);

/// Stochastic model in scaled coordinates: noise g on the voltage axis,
/// w_noise_fraction * g on w, w clamped to [0, 1].
SdeModel morris_lecar_model(const MLParams& p, double g, double w_noise_fraction = 0.05);

enum class EquilibriumKind { StableNode, StableSpiral, UnstableNode, UnstableSpiral, Saddle, Center };
std::string to_string(EquilibriumKind kind);
bool is_stable(EquilibriumKind kind);

struct Equilibrium {
  Vec2 state;  // (v [mV], w)
  std::array<std::complex<double>, 2> eigenvalues;
  EquilibriumKind kind;
};

struct SearchBox {
  double v_lo = -80.0, v_hi = 60.0;
  double w_lo = 0.0, w_hi = 1.0;
};

std::array<std::complex<double>, 2> eigenvalues(const Mat2& m);
EquilibriumKind classify(const std::array<std::complex<double>, 2>& eigenvalues);

/// Newton's method from an n_seeds x n_seeds lattice over the box; roots
/// closer than 1e-6 (scaled units) are merged. Sorted by voltage.
std::vector<Equilibrium> find_equilibria(const MLParams& p, const SearchBox& box = {},
                                         int n_seeds = 20);

/// Deterministic Euler orbit: integrates for `transient`, then records for
/// `record`, keeping a state only when it is at least 1e-3 (scaled units)
/// away from the previously kept one. States are (v [mV], w).
std::vector<Vec2> sample_invariant_cycle(const MLParams& p, double transient, double record,
                                         double dt, Vec2 x0);

/// Orbit mapped to the unit box spanned by its own extent, so that both
/// coordinates weigh equally in geometric checks.
std::vector<Vec2> normalized_orbit(const std::vector<Vec2>& states);
/// Number of leading points covering the first full revolution of a recorded
/// orbit, or all of them when it never returns near its start.
std::size_t first_period_length(const std::vector<Vec2>& points);

/// Geometry of the first revolution, measured on the normalized orbit.
struct CycleGeometry {
  std::size_t period_points = 0;
  double diameter = 0.0;
  double closure_gap = 0.0;    // distance from the period end back to its start
  double max_step_gap = 0.0;   // largest gap between consecutive points
  double v_min = 0.0, v_max = 0.0;
  double w_min = 0.0, w_max = 0.0;
  bool closed = false;         // closure and step gaps below 5% of the diameter
};

CycleGeometry analyze_cycle(const std::vector<Vec2>& states);
/// Smallest scaled distance between the orbit and a state.
double distance_to_orbit(const std::vector<Vec2>& states, Vec2 point);
/// Winding number of the first revolution of the orbit around a state.
int winding_number(const std::vector<Vec2>& states, Vec2 point);

struct BoundaryOptions {
  Vec2 bandwidth{0.15, 0.015};   // KDE bandwidth, scaled units
  Vec2 node_spread{0.15, 0.015}; // standard deviation of rho0, scaled units
  double arc_fraction = 1.0;     // fraction of one revolution kept as target
  double arc_start = 0.0;        // phase offset from the voltage peak, in revolutions
  Vec2 cycle_x0{0.0, 0.3};
  double transient = 500.0;
  double record = 400.0;
  double dt = 0.01;
};

struct BoundaryDensities {
  DensityField rho0;
  DensityField rho1;
  Vec2 node;                  // scaled
  std::vector<Vec2> cycle;    // one revolution, scaled
  std::vector<Vec2> arc;      // target support points, scaled
};

/// rho0: Gaussian at the lowest-voltage stable equilibrium; rho1: KDE of one
/// revolution of the cycle, optionally restricted to an arc.
BoundaryDensities boundary_densities(const MLParams& p, const Grid2D& grid,
                                     const BoundaryOptions& options = {});

void write_states_csv(const std::string& path, const std::vector<Vec2>& states,
                      const std::string& header = "v,w");

}  // namespace sbtip
