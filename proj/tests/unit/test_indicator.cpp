#include <cmath>
#include <vector>

#include "doctest.h"
#include "sbtip/error.hpp"
#include "sbtip/indicator.hpp"
#include "support/fixtures.hpp"

using namespace sbtip;
using namespace sbtip::fixtures;

namespace {

Grid2D gaussian_line() { return Grid2D(-2.5, 2.5, -0.5, 0.5, 256, 1); }

BridgeSolution gaussian_pair(double sigma) {
  const Grid2D g = gaussian_line();
  return ipf_solve(binned_gaussian(g, -1, 0.1), binned_gaussian(g, 1, 0.1), brownian_1d(sigma),
                   TimeGrid(1.0, 50));
}

}  // namespace

TEST_CASE("zero velocity gives a zero indicator") {
  const Grid2D g(-1, 1, -1, 1, 8, 8);
  const TimeGrid tg(1.0, 4);
  const DensityField uniform(g, std::vector<double>(g.cells(), 1.0 / g.cells()));
  BridgeSolution sol{PotentialPair{tg, g, {}, {}}, brownian(0.5), {}, {}, 1, 0.0, true, {}, {}};
  for (int n = 0; n <= tg.steps(); ++n) {
    sol.potentials.log_phi.emplace_back(g.cells(), 0.0);
    sol.potentials.log_phihat.emplace_back(g.cells(), std::log(1.0 / g.cells()));
    sol.marginals.push_back(uniform);
    sol.control.push_back(control_from_log_phi(sol.model, g, tg.time(n), sol.potentials.log_phi[n]));
  }
  for (auto mode : {VelocityMode::ControlledDrift, VelocityMode::ControlOnly}) {
    const auto s = action_series(sol, mode);
    REQUIRE(s.I.size() == 5);
    for (double v : s.I) CHECK(v == 0.0);
  }
}

TEST_CASE("unconverged solutions are rejected") {
  const Grid2D g = gaussian_line();
  IpfOptions o;
  o.max_iter = 1;
  o.require_convergence = false;
  const auto sol = ipf_solve(binned_gaussian(g, -1, 0.1), binned_gaussian(g, 1, 0.1),
                             brownian_1d(0.5), TimeGrid(1.0, 20), o);
  CHECK_THROWS_AS(action_series(sol), Error);
}

TEST_CASE("straight-line transport costs |b - a|^2 / T^2") {
  const Grid2D g = bridge_line();
  const auto sol = ipf_solve(delta(g, {0, 0}), delta(g, {1, 0}), brownian_1d(0.1), TimeGrid(1.0, 50));
  const auto s = action_series(sol);
  CHECK(s.I.back() == doctest::Approx(1.0).epsilon(0.10));
  for (double v : s.I) CHECK(std::isfinite(v));
}

TEST_CASE("grid quadrature agrees with controlled trajectories") {
  const auto sol = gaussian_pair(0.5);
  for (auto mode : {VelocityMode::ControlledDrift, VelocityMode::ControlOnly}) {
    const auto s = action_series(sol, mode);
    const auto mc = action_monte_carlo(sol, mode, 100000, 2024);
    CAPTURE(s.I.back());
    CAPTURE(mc.mean);
    CAPTURE(mc.std_error);
    CHECK(std::abs(s.I.back() - mc.mean) <= 3.0 * mc.std_error);
    for (double v : s.I) CHECK(v >= 0.0);
  }
}

TEST_CASE("indicator shrinks with the noise toward the transport cost") {
  const Grid2D g = gaussian_line();
  const double w2 = w2_reference(binned_gaussian(g, -1, 0.1), binned_gaussian(g, 1, 0.1));
  double previous = INFINITY;
  for (double sigma : {0.5, 0.25, 0.1}) {
    const double i_t = action_series(gaussian_pair(sigma)).I.back();
    CAPTURE(sigma);
    CAPTURE(i_t);
    CHECK(i_t <= previous);
    CHECK(i_t >= 0.95 * w2);
    previous = i_t;
  }
}

TEST_CASE("running average and per-slice cost") {
  const auto s = series_from_costs({0.0, 1.0, 2.0, 3.0}, {2.0, 2.0, 4.0, 0.0});
  CHECK(s.I[0] == 2.0);
  CHECK(s.I[1] == doctest::Approx(2.0));
  CHECK(s.I[2] == doctest::Approx(2.5));
  CHECK(s.I[3] == doctest::Approx(7.0 / 3.0));
  CHECK_THROWS_AS(series_from_costs({0.0}, {1.0, 2.0}), Error);
}

TEST_CASE("tipping detection") {
  const std::vector<double> t{0, 1, 2, 3};
  SUBCASE("constant series never tips") {
    for (double c : {1e-12, 0.1, 10.0}) CHECK(detect_tipping(t, {3, 3, 3, 3}, 1, c).empty());
    CHECK(detect_tipping(series_from_costs(t, {3, 3, 3, 3})).empty());
  }
  SUBCASE("constructed step") {
    const auto d = detect_tipping(t, {0, 0, 5, 5}, 1, 3.0);
    REQUIRE(d.size() == 1);
    CHECK(d[0].index == 1);
    CHECK(d[0].jump == 5.0);
  }
  SUBCASE("sorted by jump and offset by delta") {
    const std::vector<double> t6{0, 1, 2, 3, 4, 5};
    const auto d = detect_tipping(t6, {0, 1, 4, 4, 10, 10}, 1, 1.0);
    REQUIRE(d.size() == 3);
    CHECK(d[0].index == 3);
    CHECK(d[1].index == 1);
    CHECK(d[2].index == 0);
    const auto d2 = detect_tipping(t6, {0, 1, 4, 4, 10, 10}, 2, 5.0);
    REQUIRE(d2.size() == 2);
    CHECK(d2[0].index == 2);
    CHECK(d2[0].jump == 6.0);
  }
  SUBCASE("shift invariance") {
    const std::vector<double> v{0.3, 0.1, 2.5, 2.4, 0.2, 0.9, 4.0, 4.1};
    std::vector<double> tt(v.size());
    for (std::size_t i = 0; i < tt.size(); ++i) tt[i] = static_cast<double>(i);
    for (double c : {-7.0, 0.5, 1e3}) {
      std::vector<double> w = v;
      for (double& x : w) x += c;
      const auto a = detect_tipping(tt, v, 1, 1.0), b = detect_tipping(tt, w, 1, 1.0);
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].index == b[i].index);
        CHECK(a[i].jump == doctest::Approx(b[i].jump));
      }
    }
  }
  SUBCASE("default threshold") {
    CHECK(default_threshold({0, 1, 2, 3}) == 5.0);
    CHECK(default_threshold({0, 1, 1, 4, 4}) == doctest::Approx(2.5));
    TippingConfig cfg;
    cfg.threshold = 0.0;
    CHECK_THROWS_AS(detect_tipping(series_from_costs(t, {0, 0, 5, 5}), cfg), Error);
  }
  SUBCASE("bad input") {
    CHECK_THROWS_AS(detect_tipping({0}, {1}, 1, 1.0), Error);
    CHECK_THROWS_AS(detect_tipping(t, {0, 0, 5, 5}, 0, 1.0), Error);
  }
}

TEST_CASE("exact squared Wasserstein reference") {
  SUBCASE("identity") {
    const Grid2D g(-1, 1, -1, 1, 12, 12);
    const auto r = density_from_samples(std::vector<Vec2>{{0.1, -0.2}, {0.5, 0.4}}, g, 0.3);
    CHECK(w2_reference(r, r) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("single pair") {
    const Grid2D g(0, 4, 0, 4, 8, 8);
    const Vec2 a = g.center(g.index(1, 2)), b = g.center(g.index(6, 5));
    CHECK(w2_reference(delta(g, a), delta(g, b)) == doctest::Approx(squared_norm(a - b)));
  }
  SUBCASE("two to two picks the cheaper matching") {
    const Grid2D g(0, 4, -0.5, 0.5, 4, 1);
    const DensityField p(g, {0.5, 0.5, 0.0, 0.0}), q(g, {0.0, 0.0, 0.5, 0.5});
    // Monotone matching moves each half by 2.
    CHECK(w2_reference(p, q) == doctest::Approx(4.0));
  }
  SUBCASE("binned Gaussian pair") {
    const Grid2D g = gaussian_line();
    const double w2 = w2_reference(binned_gaussian(g, -1, 0.1), binned_gaussian(g, 1, 0.1));
    CHECK(w2 == doctest::Approx(4.0).epsilon(0.02));
  }
  SUBCASE("1D matches the quantile coupling") {
    // Independent oracle: in 1D the optimal plan is the monotone rearrangement.
    const Grid2D g(-3, 3, -0.5, 0.5, 60, 1);
    const auto p = binned_gaussian(g, -0.5, 0.4);
    const auto q = normalize(DensityField(g, [&] {
      std::vector<double> m(g.cells());
      for (int i = 0; i < g.nx(); ++i) m[i] = 0.6 * binned_gaussian(g, 1.0, 0.3)[i] +
                                             0.4 * binned_gaussian(g, -1.5, 0.2)[i];
      return m;
    }()));
    std::vector<double> pm, qm;
    double kp = 0, kq = 0;
    for (std::size_t c = 0; c < g.cells(); ++c) {
      if (p[c] > kW2SupportThreshold) kp += p[c];
      if (q[c] > kW2SupportThreshold) kq += q[c];
    }
    for (std::size_t c = 0; c < g.cells(); ++c) {
      pm.push_back(p[c] > kW2SupportThreshold ? p[c] / kp : 0.0);
      qm.push_back(q[c] > kW2SupportThreshold ? q[c] / kq : 0.0);
    }
    double expect = 0.0;
    std::size_t i = 0, j = 0;
    double ri = pm[0], rj = qm[0];
    while (i < pm.size() && j < qm.size()) {
      if (ri <= 0) { if (++i < pm.size()) ri = pm[i]; continue; }
      if (rj <= 0) { if (++j < qm.size()) rj = qm[j]; continue; }
      const double f = std::min(ri, rj);
      const double d = g.center(i).x - g.center(j).x;
      expect += f * d * d;
      ri -= f;
      rj -= f;
    }
    CHECK(w2_reference(p, q) == doctest::Approx(expect).epsilon(1e-6));
  }
  SUBCASE("budget") {
    const Grid2D g(0, 1, 0, 1, 40, 40);
    const DensityField u(g, std::vector<double>(g.cells(), 1.0 / g.cells()));
    CHECK_THROWS_AS(w2_reference(u, u), Error);
    try {
      w2_reference(u, u);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::TooLarge);
    }
  }
}

TEST_CASE("bimodality coefficient") {
  const Grid2D g(-4, 4, -0.5, 0.5, 800, 1);
  std::vector<double> flat(g.cells(), 0.0);
  for (int i = 200; i < 600; ++i) flat[i] = 1.0;
  CHECK(bimodality_coefficient(DensityField(g, flat)) == doctest::Approx(5.0 / 9.0).epsilon(1e-3));
  CHECK(bimodality_coefficient(binned_gaussian(g, 0.3, 0.5)) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-3));
  std::vector<double> two(g.cells());
  for (int i = 0; i < g.nx(); ++i)
    two[i] = binned_gaussian(g, -2, 0.3)[i] + binned_gaussian(g, 2, 0.3)[i];
  CHECK(bimodality_coefficient(DensityField(g, two)) > 0.8);

  // Rotated two-cluster density in 2D: principal axis is found.
  const Grid2D g2(-3, 3, -3, 3, 60, 60);
  const auto r = density_from_samples(std::vector<Vec2>{{-1.5, -1.5}, {1.5, 1.5}}, g2, 0.3);
  CHECK(bimodality_coefficient(r) > 0.8);
  const auto single = density_from_samples(std::vector<Vec2>{{0.2, 0.1}}, g2, 0.5);
  CHECK(bimodality_coefficient(single) < 0.4);
}
