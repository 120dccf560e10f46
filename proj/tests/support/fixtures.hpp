#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "sbtip/grid.hpp"
#include "sbtip/sde.hpp"

namespace sbtip::fixtures {

inline SdeModel brownian(double sigma) {
  SdeModel m;
  m.drift = [](double, Vec2) { return Vec2{0, 0}; };
  m.noise = NoiseSchedule::constant(sigma);
  m.autonomous = true;
  return m;
}

inline SdeModel brownian_1d(double sigma) {
  SdeModel m = brownian(sigma);
  m.axis_noise = {1.0, 0.0};
  return m;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Cell masses of N(mean, sd^2) along x on a single-row grid.
inline DensityField binned_gaussian(const Grid2D& g, double mean, double sd) {
  std::vector<double> m(g.cells());
  for (int ix = 0; ix < g.nx(); ++ix) {
    const double lo = g.xmin() + ix * g.dx();
    m[ix] = normal_cdf((lo + g.dx() - mean) / sd) - normal_cdf((lo - mean) / sd);
  }
  return normalize(DensityField(g, m));
}

inline DensityField delta(const Grid2D& g, Vec2 p) {
  std::vector<double> m(g.cells(), 0.0);
  m[g.locate(p).value()] = 1.0;
  return DensityField(g, m);
}

// 256 cells with centres on multiples of 1/64, so 0 and 1 are cell centres.
inline Grid2D bridge_line() { return Grid2D(-1.5 - 1.0 / 128, 2.5 - 1.0 / 128, -0.5, 0.5, 256, 1); }

}  // namespace sbtip::fixtures
