#include <cmath>

#include "doctest.h"
#include "sbtip/morris_lecar.hpp"
#include "sbtip/rng.hpp"

using namespace sbtip;

TEST_CASE("auxiliary functions") {
  const auto p = MLParams::class_one();
  CHECK(ml_m_inf(p.V1, p) == 0.5);
  CHECK(ml_w_inf(p.V3, p) == 0.5);
  CHECK(ml_tau_w(p.V3, p) == 1.0);
  for (double v = -300; v <= 300; v += 7.3) {
    CHECK(ml_m_inf(v, p) > 0.0);
    CHECK(ml_m_inf(v, p) < 1.0);
    CHECK(ml_w_inf(v, p) > 0.0);
    CHECK(ml_w_inf(v, p) < 1.0);
    CHECK(ml_tau_w(v, p) > 0.0);
    CHECK(ml_tau_w(v, p) <= 1.0);
  }
}

TEST_CASE("analytic jacobian matches central differences") {
  RandomStream r(8, 0);
  for (const auto& p : {MLParams::class_one(), MLParams::class_two()}) {
    for (int k = 0; k < 100; ++k) {
      const Vec2 s{-80 + 140 * r.uniform(), r.uniform()};
      const Mat2 j = ml_jacobian(s, p);
      const double hv = 1e-5 * std::max(1.0, std::abs(s.x)), hw = 1e-6;
      const Vec2 dv = (1.0 / (2 * hv)) * (ml_drift({s.x + hv, s.y}, p) - ml_drift({s.x - hv, s.y}, p));
      const Vec2 dw = (1.0 / (2 * hw)) * (ml_drift({s.x, s.y + hw}, p) - ml_drift({s.x, s.y - hw}, p));
      const double scale_v = std::abs(j.xx) + std::abs(j.yx) + 1e-3;
      const double scale_w = std::abs(j.xy) + std::abs(j.yy) + 1e-3;
      CHECK(std::abs(j.xx - dv.x) < 1e-6 * scale_v);
      CHECK(std::abs(j.yx - dv.y) < 1e-6 * scale_v);
      CHECK(std::abs(j.xy - dw.x) < 1e-6 * scale_w);
      CHECK(std::abs(j.yy - dw.y) < 1e-6 * scale_w);
    }
  }
}

TEST_CASE("class one equilibrium") {
  const auto p = MLParams::class_one();
  const auto eq = find_equilibria(p);
  REQUIRE(eq.size() == 1);
  const auto& e = eq[0];
  // Independent Newton solve with a finite-difference Jacobian.
  CHECK(e.state.x == doctest::Approx(-25.911983899451766).epsilon(1e-10));
  CHECK(e.state.y == doctest::Approx(0.13460995772430678).epsilon(1e-10));
  CHECK(e.eigenvalues[0].real() == doctest::Approx(-0.00466836263735742).epsilon(1e-6));
  CHECK(std::abs(e.eigenvalues[0].imag()) == doctest::Approx(0.08021119773118317).epsilon(1e-6));
  CHECK(e.kind == EquilibriumKind::StableSpiral);
  const Vec2 f = ml_drift(e.state, p);
  CHECK(norm(Vec2{f.x / kVoltageScale, f.y}) < 1e-9);
}

TEST_CASE("class two equilibria") {
  const auto p = MLParams::class_two();
  const auto eq = find_equilibria(p);
  REQUIRE(eq.size() == 3);
  CHECK(eq[0].state.x == doctest::Approx(-35.71105939086665).epsilon(1e-10));
  CHECK(eq[0].state.y == doctest::Approx(0.004135389418217006).epsilon(1e-9));
  CHECK(eq[0].kind == EquilibriumKind::StableNode);
  CHECK(eq[0].eigenvalues[0].real() == doctest::Approx(-0.4721459636338677).epsilon(1e-6));
  CHECK(eq[0].eigenvalues[1].real() == doctest::Approx(-0.0443048438016948).epsilon(1e-6));
  CHECK(eq[1].state.x == doctest::Approx(-23.845145436598564).epsilon(1e-10));
  CHECK(eq[1].kind == EquilibriumKind::Saddle);
  CHECK(eq[2].state.x == doctest::Approx(4.4666209715125875).epsilon(1e-10));
  CHECK(eq[2].eigenvalues[0].real() == doctest::Approx(-0.00105757796221909).epsilon(1e-5));
  for (const auto& e : eq) {
    const Vec2 f = ml_drift(e.state, p);
    CHECK(norm(Vec2{f.x / kVoltageScale, f.y}) < 1e-9);
  }
}

TEST_CASE("equilibrium set is stable under lattice refinement") {
  for (const auto& p : {MLParams::class_one(), MLParams::class_two()}) {
    const auto a = find_equilibria(p, {}, 20), b = find_equilibria(p, {}, 31);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      CHECK(norm(to_scaled(a[k].state) - to_scaled(b[k].state)) < 1e-6);
      CHECK(a[k].kind == b[k].kind);
    }
  }
}

TEST_CASE("class one limit cycle") {
  const auto p = MLParams::class_one();
  const auto cyc = sample_invariant_cycle(p, 500.0, 400.0, 0.01, {0.0, 0.3});
  const auto g = analyze_cycle(cyc);
  CHECK(g.closed);
  CHECK(g.v_max - g.v_min > 40.0);
  const auto eq = find_equilibria(p);
  // The cycle winds once around the spiral without passing through it.
  CHECK(distance_to_orbit(cyc, eq[0].state) > 0.01);
  CHECK(std::abs(winding_number(cyc, eq[0].state)) == 1);
  for (const auto& s : cyc) {
    CHECK(s.y >= 0.0);
    CHECK(s.y <= 1.0);
  }
}

TEST_CASE("orbit started at an equilibrium stays there") {
  const auto p = MLParams::class_one();
  const auto eq = find_equilibria(p);
  const auto pts = sample_invariant_cycle(p, 10.0, 50.0, 0.01, eq[0].state);
  for (const auto& s : pts) CHECK(norm(to_scaled(s) - to_scaled(eq[0].state)) < 1e-6);
}

TEST_CASE("scaled stochastic model") {
  const auto p = MLParams::class_one();
  const auto m = morris_lecar_model(p, 0.3);
  const Vec2 s{-20.0, 0.2};
  const Vec2 f = ml_drift(s, p), fs = m.drift(0, to_scaled(s));
  CHECK(fs.x == doctest::Approx(f.x / kVoltageScale));
  CHECK(fs.y == doctest::Approx(f.y));
  CHECK(m.sigma(0).y == doctest::Approx(0.015));
  const Mat2 j = m.drift_jacobian(0, to_scaled(s));
  const double h = 1e-6;
  const Vec2 d = (1.0 / (2 * h)) * (m.drift(0, to_scaled(s) + Vec2{h, 0}) - m.drift(0, to_scaled(s) - Vec2{h, 0}));
  CHECK(j.xx == doctest::Approx(d.x).epsilon(1e-6));
  CHECK(j.yx == doctest::Approx(d.y).epsilon(1e-6));
}

TEST_CASE("boundary densities") {
  const auto p = MLParams::class_one();
  const Grid2D g(-6.0, 4.0, 0.0, 0.6, 96, 96);
  const auto full = boundary_densities(p, g);
  CHECK(full.rho0.total() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(full.rho1.total() == doctest::Approx(1.0).epsilon(1e-12));
  BoundaryOptions o;
  double near = 0;
  for (std::size_t c = 0; c < g.cells(); ++c) {
    const Vec2 d = g.center(c) - full.node;
    if (std::abs(d.x) <= 3 * o.node_spread.x && std::abs(d.y) <= 3 * o.node_spread.y) near += full.rho0[c];
  }
  CHECK(near >= 0.99);

  o.arc_fraction = 0.25;
  const auto part = boundary_densities(p, g, o);
  const auto length = [](const std::vector<Vec2>& pts) {
    double s = 0;
    for (std::size_t k = 1; k < pts.size(); ++k) s += norm(pts[k] - pts[k - 1]);
    return s;
  };
  CHECK(length(part.arc) / length(full.cycle) == doctest::Approx(0.25).epsilon(0.05));
}
