#include <cmath>

#include "doctest.h"
#include "sbtip/error.hpp"
#include "sbtip/ipf.hpp"
#include "sbtip/morris_lecar.hpp"
#include "support/fixtures.hpp"

using namespace sbtip;

using namespace sbtip::fixtures;

TEST_CASE("backward propagation fixes constants") {
  const Grid2D g(0, 1, 0, 1, 20, 20);
  const KernelSequence k(brownian(1.0), TimeGrid(0.1, 8), g);
  const std::vector<double> zero(g.cells(), 0.0);
  for (const auto& slice : propagate_phi_backward(zero, k))
    for (double v : slice) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("backward propagation of a Gaussian widens it by sigma^2 T") {
  const Grid2D g(-4, 4, -0.5, 0.5, 400, 1);
  const double s = 0.3, sigma = 0.5, T = 1.0;
  const KernelSequence k(brownian_1d(sigma), TimeGrid(T, 50), g);
  std::vector<double> lT(g.cells());
  for (std::size_t c = 0; c < lT.size(); ++c) lT[c] = -0.5 * std::pow(g.center(c).x / s, 2);
  const auto phi = propagate_phi_backward(lT, k);
  const double v = s * s + sigma * sigma * T;
  const double ref = phi[0][g.index(200, 0)] + 0.5 * std::pow(g.x_center(200), 2) / v;
  for (int ix = 120; ix <= 280; ix += 8) {
    const double expect = -0.5 * std::pow(g.x_center(ix), 2) / v;
    CHECK(std::abs(std::exp(phi[0][g.index(ix, 0)] - ref - expect) - 1.0) < 0.01);
  }
}

TEST_CASE("backward support grows as time decreases") {
  const Grid2D g(0, 1, 0, 1, 30, 30);
  const KernelSequence k(brownian(0.5), TimeGrid(0.2, 10), g);
  std::vector<double> lT(g.cells(), -std::numeric_limits<double>::infinity());
  lT[g.index(15, 15)] = 0.0;
  const auto phi = propagate_phi_backward(lT, k);
  std::size_t prev = 1;
  for (int n = 9; n >= 0; --n) {
    std::size_t count = 0;
    const double top = *std::max_element(phi[n].begin(), phi[n].end());
    for (double v : phi[n]) count += v > top - 10.0;
    CHECK(count >= prev);
    prev = count;
  }
}

TEST_CASE("forward propagation conserves mass and spreads like the heat kernel") {
  const Grid2D g(0, 1, 0, 1, 64, 64);
  const double sigma = 0.6;
  const TimeGrid tg(0.1, 20);
  const KernelSequence k(brownian(sigma), tg, g);
  const auto d = delta(g, g.center(32, 32));
  std::vector<double> l0(g.cells(), -std::numeric_limits<double>::infinity());
  l0[g.index(32, 32)] = 0.0;
  const auto ph = propagate_phihat_forward(l0, k);
  for (int n : {5, 10, 20}) {
    std::vector<double> m(g.cells());
    for (std::size_t c = 0; c < m.size(); ++c) m[c] = std::exp(ph[n][c]);
    const DensityField f(g, m);
    CHECK(f.total() == doctest::Approx(1.0).epsilon(1e-10));
    const Vec2 var = f.variance();
    CHECK(var.x == doctest::Approx(sigma * sigma * tg.time(n)).epsilon(0.05));
    CHECK(var.y == doctest::Approx(sigma * sigma * tg.time(n)).epsilon(0.05));
  }
  (void)d;
}

TEST_CASE("zero-drift kernels are self-adjoint away from the boundary") {
  const Grid2D g(-1, 1, -1, 1, 40, 40);
  const KernelSequence k(brownian(0.4), TimeGrid(0.05, 5), g);
  std::vector<double> l(g.cells());
  for (std::size_t c = 0; c < l.size(); ++c) l[c] = -squared_norm(g.center(c)) / 0.02;
  const auto fwd = propagate_phihat_forward(l, k);
  const auto bwd = propagate_phi_backward(l, k);
  for (int ix = 14; ix < 26; ++ix)
    for (int iy = 14; iy < 26; ++iy) {
      const std::size_t c = g.index(ix, iy);
      CHECK(fwd[5][c] == doctest::Approx(bwd[0][c]).epsilon(1e-12));
    }
}

TEST_CASE("hilbert distance ignores scale") {
  const std::vector<double> a{0.0, 1.0, -2.0}, b{3.0, 4.5, 1.0};
  CHECK(hilbert_distance(a, b) == doctest::Approx(0.5));
  const std::vector<double> c{5.0, 6.0, 3.0};
  CHECK(hilbert_distance(a, c) == 0.0);
}

TEST_CASE("symmetric problem gives time-reflected potentials") {
  // Wide enough that boundary rows, where the kernel is renormalized and
  // stops being symmetric, carry negligible mass.
  const Grid2D g(-2, 2, -2, 2, 48, 48);
  const auto rho = density_from_samples(std::vector<Vec2>{{0, 0}}, g, 0.25);
  const TimeGrid tg(0.5, 10);
  IpfOptions o;
  o.tol = 1e-11;
  o.max_iter = 2000;
  const auto sol = ipf_solve(rho, rho, brownian(0.5), tg, o);
  // Reversing time swaps the roles of phi and phihat, so phihat_t is
  // proportional to phi_{T-t}; at the midpoint the two coincide up to scale.
  const int N = tg.steps();
  for (int n = 0; n <= N; ++n) {
    const auto& a = sol.potentials.log_phi[N - n];
    const auto& b = sol.potentials.log_phihat[n];
    const std::size_t ref = g.index(24, 24);
    const double c = a[ref] - b[ref];
    for (std::size_t k = 0; k < g.cells(); ++k)
      if (sol.marginals[n][k] > 1e-8) CHECK(std::abs(a[k] - b[k] - c) < 1e-6);
  }
  const auto u = sol.control[5];
  // Centre of symmetry sits on the corner shared by four cells.
  CHECK(norm(u.interpolate({0, 0})) < 1e-6);
}

TEST_CASE("pinned brownian bridge marginals and control") {
  const Grid2D g = bridge_line();
  const double sigma = 0.5, T = 1.0;
  const TimeGrid tg(T, 50);
  const auto sol = ipf_solve(delta(g, {0, 0}), delta(g, {1, 0}), brownian_1d(sigma), tg);
  for (int n = 1; n < tg.steps(); ++n) {
    const double t = tg.time(n);
    const auto ref = binned_gaussian(g, t, sigma * std::sqrt(t * (1 - t)));
    CHECK(l1_distance(sol.marginals[n], ref) <= 0.02);
  }
  for (int n : {10, 25, 40}) {
    const double t = tg.time(n);
    const auto& rho = sol.marginals[n];
    for (std::size_t c = 0; c < g.cells(); ++c) {
      if (rho[c] < 1e-3) continue;
      const double x = g.center(c).x;
      const double expect = (1.0 - x) / (T - t);
      CHECK(std::abs(sol.control[n].vx()[c] - expect) <= 0.05 * std::abs(expect) + 0.05);
    }
  }
}

TEST_CASE("most probable path of a pinned bridge is the segment") {
  const Grid2D g = bridge_line();
  const TimeGrid tg(1.0, 50);
  const auto sol = ipf_solve(delta(g, {0, 0}), delta(g, {1, 0}), brownian_1d(0.5), tg);
  const auto path = most_probable_path(sol, {0, 0});
  REQUIRE(path.size() == 51);
  for (int n = 0; n <= 50; ++n) CHECK(std::abs(path[n].x - tg.time(n)) <= 0.02);
  const auto still = ipf_solve(delta(g, {1, 0}), delta(g, {1, 0}), brownian_1d(0.5), tg);
  for (const auto& p : most_probable_path(still, {1, 0})) CHECK(std::abs(p.x - 1.0) < g.dx());
}

TEST_CASE("gaussian pair converges and is resolution consistent") {
  const double sigma = 0.5;
  const TimeGrid tg(1.0, 50);
  const Grid2D coarse(-2.5, 2.5, -0.5, 0.5, 256, 1), fine(-2.5, 2.5, -0.5, 0.5, 1024, 1);
  const auto a = ipf_solve(binned_gaussian(coarse, -1, 0.1), binned_gaussian(coarse, 1, 0.1),
                           brownian_1d(sigma), tg);
  CHECK(a.terminal_error < 1e-6);
  const auto b = ipf_solve(binned_gaussian(fine, -1, 0.1), binned_gaussian(fine, 1, 0.1),
                           brownian_1d(sigma), tg);
  for (int n = 0; n <= 50; n += 5) {
    std::vector<double> agg(coarse.cells(), 0.0);
    for (std::size_t c = 0; c < fine.cells(); ++c) agg[c / 4] += b.marginals[n][c];
    CHECK(l1_distance(a.marginals[n], DensityField(coarse, agg)) <= 0.02);
  }
  for (std::size_t k = 0; k < a.marginals.size(); ++k)
    CHECK(a.marginals[k].total() == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("controlled ensembles reproduce the terminal density") {
  const double sigma = 0.5;
  const TimeGrid tg(1.0, 50);
  const Grid2D g(-2.5, 2.5, -0.5, 0.5, 256, 1);
  const auto sol = ipf_solve(binned_gaussian(g, -1, 0.1), binned_gaussian(g, 1, 0.1),
                             brownian_1d(sigma), tg);
  const auto ens = simulate_bridge(sol, 100000, 17, false, 20);
  const auto terminal = density_from_samples(ens.terminal(), g, 0.02);
  CHECK(l1_distance(terminal, sol.marginals[50]) < 0.05);

  const auto back = simulate_bridge(sol, 20000, 18, true, 20);
  for (int n : {10, 25, 40}) {
    const auto f = density_from_samples(ens.slice(n), g, 0.02);
    const auto r = density_from_samples(back.slice(n), g, 0.02);
    CHECK(l1_distance(f, r) < 0.1);
  }
}

TEST_CASE("gauge change leaves marginals and drifts unchanged") {
  const Grid2D g(-2, 2, -2, 2, 32, 32);
  const auto r0 = density_from_samples(std::vector<Vec2>{{-1, -0.5}}, g, 0.3);
  const auto r1 = density_from_samples(std::vector<Vec2>{{1, 0.5}}, g, 0.3);
  const TimeGrid tg(1.0, 20);
  const auto sol = ipf_solve(r0, r1, brownian(0.8), tg);
  PotentialPair p = sol.potentials;
  const double lc = std::log(37.5);
  for (auto& s : p.log_phi)
    for (double& v : s) v += lc;
  for (auto& s : p.log_phihat)
    for (double& v : s) v -= lc;
  const auto marg = marginals_from_potentials(p);
  for (int n = 0; n <= tg.steps(); ++n) {
    const auto u = control_from_log_phi(sol.model, g, tg.time(n), p.log_phi[n]);
    for (std::size_t c = 0; c < g.cells(); ++c) {
      CHECK(std::abs(marg[n][c] - sol.marginals[n][c]) <= 1e-10);
      CHECK(std::abs(u.vx()[c] - sol.control[n].vx()[c]) <= 1e-10);
      CHECK(std::abs(u.vy()[c] - sol.control[n].vy()[c]) <= 1e-10);
    }
  }
}

TEST_CASE("ipf iterates contract in the hilbert metric") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    RandomStream r(s, 0);
    const Grid2D g(-1, 1, -1, 1, 16, 16);
    std::vector<Vec2> a, b;
    for (int k = 0; k < 30; ++k) {
      a.push_back({0.5 * r.normal() - 0.3, 0.4 * r.normal()});
      b.push_back({0.3 * r.normal() + 0.4, 0.5 * r.normal() + 0.2});
    }
    IpfOptions o;
    o.tol = 1e-10;
    o.max_iter = 60;
    o.require_convergence = false;
    const auto sol = ipf_solve(density_from_samples(a, g, 0.15), density_from_samples(b, g, 0.15),
                               brownian(0.3 + 0.1 * r.uniform()), TimeGrid(1.0, 10), o);
    const auto& h = sol.hilbert_history;
    for (std::size_t k = 2; k < h.size(); ++k) CHECK(h[k] <= h[k - 1] * (1 + 1e-9) + 1e-12);
  }
}

TEST_CASE("ipf errors") {
  const Grid2D g(0, 1, 0, 1, 10, 10), h(0, 1, 0, 1, 12, 10);
  const auto a = density_from_samples(std::vector<Vec2>{{0.5, 0.5}}, g, 0.2);
  CHECK_THROWS_AS(ipf_solve(a, density_from_samples(std::vector<Vec2>{{0.5, 0.5}}, h, 0.2),
                            brownian(1.0), TimeGrid(1, 5)),
                  Error);
  IpfOptions o;
  o.max_iter = 1;
  o.tol = 1e-14;
  const auto b = density_from_samples(std::vector<Vec2>{{0.1, 0.9}}, g, 0.05);
  CHECK_THROWS_AS(ipf_solve(a, b, brownian(1.0), TimeGrid(1, 5), o), NotConvergedError);
  // Narrow kernels cannot carry mass across the box in one short step.
  const Grid2D line(0, 10, -0.5, 0.5, 40, 1);
  try {
    ipf_solve(delta(line, {0.5, 0}), delta(line, {9.5, 0}), brownian_1d(0.5), TimeGrid(0.1, 1));
    FAIL("expected SupportMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SupportMismatch);
  }
}

TEST_CASE("morris-lecar node to arc most probable path") {
  const auto p = MLParams::class_one();
  const Grid2D g(-6.0, 4.0, 0.0, 0.6, 48, 48);
  BoundaryOptions bo;
  bo.bandwidth = {0.25, 0.02};
  bo.node_spread = {0.25, 0.02};
  bo.arc_fraction = 0.25;
  const auto bd = boundary_densities(p, g, bo);
  IpfOptions o;
  o.tol = 1e-4;
  const auto sol = ipf_solve(bd.rho0, bd.rho1, morris_lecar_model(p, 0.3), TimeGrid(20.0, 200), o);
  const auto path = most_probable_path(sol, bd.node);
  const auto cell = g.locate(path.back()).value();
  CHECK(sol.marginals.back()[cell] >= 1e-6);
  CHECK(bd.rho1[cell] >= 1e-6);
}
