#include <cmath>
#include <vector>

#include "doctest.h"
#include "sbtip/error.hpp"
#include "sbtip/rng.hpp"
#include "sbtip/sdot.hpp"
#include "support/polygon.hpp"

using namespace sbtip;
using namespace sbtip::fixtures;

namespace {

DiscreteTarget two_targets() { return DiscreteTarget::normalized({{0, 0.5}, {1, 0.5}}, {1, 1}); }

DiscreteTarget corner_triangle(std::vector<double> nu) {
  return DiscreteTarget::normalized({{0, 0}, {1, 0}, {0, 1}}, std::move(nu));
}

const StateSampler unit_square = uniform_box_sampler(0, 1, 0, 1);

std::vector<Vec2> cluster(Vec2 centre, double sd, std::size_t n, std::uint64_t seed) {
  RandomStream rs(seed, 0);
  std::vector<Vec2> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(centre + sd * Vec2{rs.normal(), rs.normal()});
  return out;
}

}  // namespace

TEST_CASE("target validation") {
  const auto t = DiscreteTarget::normalized({{0, 0}, {1, 1}, {2, 0}}, {1, 2, 1});
  CHECK(t.weights[1] == 0.5);
  CHECK_THROWS_AS(DiscreteTarget::normalized({}, {}), Error);
  CHECK_THROWS_AS(DiscreteTarget::normalized({{0, 0}}, {-1}), Error);
  CHECK_THROWS_AS(DiscreteTarget::normalized({{0, 0}, {1, 0}}, {0, 0}), Error);
  CHECK_THROWS_AS(DiscreteTarget::normalized({{0, NAN}}, {1}), Error);
  DiscreteTarget bad{{{0, 0}, {1, 0}}, {0.5, 0.6}};
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("cell assignment follows the support planes") {
  const auto t = two_targets();
  const HeightVector h{0, 0};
  CHECK(assign_cell({0.25, 0.7}, t, h) == 0);
  CHECK(assign_cell({0.75, 0.2}, t, h) == 1);
  // The boundary is the perpendicular bisector x = 0.5; ties go to the lower index.
  CHECK(assign_cell({0.5, 0.9}, t, h) == 0);
  CHECK(assign_cell({0.5 + 1e-9, 0.9}, t, h) == 1);
  CHECK(assign_cell({0.5 - 1e-9, 0.1}, t, h) == 0);

  const double r3 = std::sqrt(3.0);
  const auto tri = DiscreteTarget::normalized({{1, 0}, {-0.5, r3 / 2}, {-0.5, -r3 / 2}}, {1, 1, 1});
  CHECK(assign_cell({0, 0}, tri, {0, 0, 0}) == 0);
  CHECK_THROWS_AS(assign_cell({0, 0}, tri, {0, 0}), Error);
}

TEST_CASE("assignment ignores a uniform height shift") {
  RandomStream rs(99, 0);
  int probes = 0;
  for (int k = 0; k < 1000; ++k) {
    const std::size_t n = 2 + rs.below(6);
    std::vector<Vec2> y;
    std::vector<double> w;
    HeightVector h, shifted;
    const double c = 20.0 * (rs.uniform() - 0.5);
    for (std::size_t i = 0; i < n; ++i) {
      y.push_back({4 * rs.uniform() - 2, 4 * rs.uniform() - 2});
      w.push_back(1.0);
      h.push_back(rs.uniform() - 0.5);
      shifted.push_back(h.back() + c);
    }
    const auto t = DiscreteTarget::normalized(y, w);
    const Vec2 x{6 * rs.uniform() - 3, 6 * rs.uniform() - 3};
    CHECK(assign_cell(x, t, h) == assign_cell(x, t, shifted));
    ++probes;
  }
  CHECK(probes == 1000);
}

TEST_CASE("weight estimates") {
  SUBCASE("symmetric pair") {
    const std::size_t N = 40000;
    const auto w = estimate_weights(unit_square, two_targets(), {0, 0}, N, 7);
    CHECK(w[0] + w[1] == doctest::Approx(1.0));
    CHECK(std::abs(w[0] - 0.5) <= 3 * std::sqrt(0.25 / N));
  }
  SUBCASE("dominant plane") {
    const auto t = corner_triangle({1, 1, 1});
    const auto w = estimate_weights(unit_square, t, {10, -10, -10}, 5000, 7);
    CHECK(w == std::vector<double>{1.0, 0.0, 0.0});
  }
  SUBCASE("exact polygon areas") {
    const std::size_t N = 100000;
    const auto t = corner_triangle({1, 1, 1});
    for (const HeightVector& h : {HeightVector{0, 0, 0}, HeightVector{0.2, -0.1, 0.05},
                                  HeightVector{-0.3, 0.25, 0.1}}) {
      const auto w = estimate_weights(unit_square, t, h, N, 11);
      double total = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        const double a = power_cell_area(t.points, h, i, 0, 1, 0, 1);
        total += a;
        CHECK(std::abs(w[i] - a) <= 4 * std::sqrt(a * (1 - a) / N) + 1e-12);
      }
      CHECK(total == doctest::Approx(1.0));
    }
  }
  SUBCASE("same seed and block reproduce, other blocks differ") {
    const auto t = corner_triangle({1, 1, 1});
    CHECK(estimate_weights(unit_square, t, {0, 0, 0}, 1000, 3, 5) ==
          estimate_weights(unit_square, t, {0, 0, 0}, 1000, 3, 5));
    CHECK(estimate_weights(unit_square, t, {0, 0, 0}, 1000, 3, 5) !=
          estimate_weights(unit_square, t, {0, 0, 0}, 1000, 3, 6));
  }
}

TEST_CASE("height fitting") {
  SUBCASE("symmetric pair stays at zero") {
    FitOptions o;
    o.samples = 40000;
    o.seed = 5;
    const auto fit = fit_heights(unit_square, two_targets(), o);
    // h1 - h0 moves the bisector by the same amount, so the weight error
    // bound transfers directly to the heights.
    const double se = std::sqrt(0.25 / o.samples);
    CHECK(std::abs(fit.h[0]) <= 3 * se);
    CHECK(std::abs(fit.h[1]) <= 3 * se);
    CHECK(std::abs(fit.h[0] + fit.h[1]) < 1e-12);
    CHECK_FALSE(fit.stalled);
  }
  SUBCASE("triangle reaches the prescribed weights") {
    const auto t = corner_triangle({0.5, 0.25, 0.25});
    FitOptions o;
    o.samples = 100000;
    o.seed = 21;
    const auto fit = fit_heights(unit_square, t, o);
    double mean = 0.0;
    for (double v : fit.h) mean += v;
    CHECK(std::abs(mean) < 1e-12);
    const auto w = estimate_weights(unit_square, t, fit.h, o.samples, 999);
    for (std::size_t i = 0; i < 3; ++i) {
      const double nu = t.weights[i];
      CHECK(std::abs(w[i] - nu) <= 0.01);
      CHECK(std::abs(w[i] - nu) < 3 * std::sqrt(0.25 / o.samples));
      CHECK(std::abs(power_cell_area(t.points, fit.h, i, 0, 1, 0, 1) - nu) <= 0.01);
    }
  }
  SUBCASE("degenerate weights push every sample to one plane") {
    FitOptions o;
    o.samples = 20000;
    o.max_steps = 300;
    const auto fit = fit_heights(unit_square, corner_triangle({1, 0, 0}), o);
    CHECK(fit.weights[0] > 0.99);
  }
  SUBCASE("step cap is reported") {
    FitOptions o;
    o.samples = 2000;
    o.max_steps = 3;
    o.step = 0.01;
    const auto fit = fit_heights(unit_square, corner_triangle({0.8, 0.1, 0.1}), o);
    CHECK(fit.steps == 3);
    CHECK(fit.stalled);
    CHECK(fit.energy_history.size() == 3);
  }
  SUBCASE("determinism") {
    FitOptions o;
    o.samples = 5000;
    o.seed = 77;
    o.max_steps = 200;
    const auto t = corner_triangle({0.4, 0.35, 0.25});
    const auto a = fit_heights(unit_square, t, o), b = fit_heights(unit_square, t, o);
    CHECK(a.h == b.h);
    CHECK(a.energy_history == b.energy_history);
  }
  SUBCASE("bad options") {
    FitOptions o;
    o.patience = 0;
    CHECK_THROWS_AS(fit_heights(unit_square, two_targets(), o), Error);
    o = {};
    o.step = 0;
    CHECK_THROWS_AS(fit_heights(unit_square, two_targets(), o), Error);
  }
}

TEST_CASE("energy is convex along random segments") {
  const auto t = corner_triangle({0.5, 0.25, 0.25});
  RandomStream rs(123, 0);
  for (int k = 0; k < 5; ++k) {
    HeightVector a(3), b(3), mid(3);
    for (std::size_t i = 0; i < 3; ++i) {
      a[i] = 0.6 * (rs.uniform() - 0.5);
      b[i] = 0.6 * (rs.uniform() - 0.5);
      mid[i] = 0.5 * (a[i] + b[i]);
    }
    const double e_mid = energy_difference(unit_square, t, a, mid, 20000, 10 + k);
    const double e_b = energy_difference(unit_square, t, a, b, 20000, 40 + k);
    CHECK(e_mid <= 0.5 * e_b + 5e-3);
  }
}

TEST_CASE("region pairing") {
  SUBCASE("single region") {
    const auto src = cluster({0, 0}, 1, 200, 1);
    const auto tgt = cluster({3, 3}, 0.5, 50, 2);
    const auto p = pair_regions(src, tgt, std::vector<int>(tgt.size(), 4));
    REQUIRE(p.source_region.size() == src.size());
    for (int r : p.source_region) CHECK(r == 4);
  }
  SUBCASE("symmetric regions split the source evenly") {
    const auto src = cluster({0, 0}, 1, 4000, 3);
    auto tgt = cluster({-2, 3}, 0.3, 300, 4);
    const auto right = cluster({2, 3}, 0.3, 300, 5);
    tgt.insert(tgt.end(), right.begin(), right.end());
    std::vector<int> labels(600, 0);
    for (std::size_t i = 300; i < 600; ++i) labels[i] = 1;
    FitOptions o;
    o.samples = 20000;
    const auto p = pair_regions(src, tgt, labels, o);
    double left = 0;
    for (int r : p.source_region) left += r == 0;
    CHECK(std::abs(left / src.size() - 0.5) <= 3 * std::sqrt(0.25 / src.size()) +
                                                   3 * std::sqrt(0.25 / o.samples));
  }
  SUBCASE("unequal masses carry over to source labels") {
    const auto src = cluster({0, 0}, 0.5, 5000, 6);
    auto tgt = cluster({-1.5, 2}, 0.3, 700, 7);
    const auto small = cluster({1.5, 2.5}, 0.3, 300, 8);
    tgt.insert(tgt.end(), small.begin(), small.end());
    std::vector<int> labels(1000, 10);
    for (std::size_t i = 700; i < 1000; ++i) labels[i] = 20;
    const auto p = pair_regions(src, tgt, labels);
    REQUIRE(p.regions == std::vector<int>{10, 20});
    CHECK(p.target.weights[0] == doctest::Approx(0.7));
    double first = 0;
    for (int r : p.source_region) first += r == 10;
    CHECK(std::abs(first / src.size() - 0.7) <= 0.02);
  }
  SUBCASE("label count must match") {
    CHECK_THROWS_AS(pair_regions({{0, 0}}, {{1, 1}, {2, 2}}, {1}), Error);
  }
}
