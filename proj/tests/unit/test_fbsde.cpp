#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "sbtip/error.hpp"
#include "sbtip/fbsde.hpp"
#include "sbtip/rng.hpp"
#include "support/fixtures.hpp"

using namespace sbtip;
using namespace sbtip::fixtures;

namespace {

// Nonlinear drift with an exact Jacobian, so the adjoint is exact too.
SdeModel curved_model(double sigma) {
  SdeModel m;
  m.drift = [](double t, Vec2 x) {
    return Vec2{-x.x + 0.3 * std::sin(x.y) + 0.1 * t, -0.5 * x.y + 0.2 * x.x * x.x};
  };
  m.jacobian = [](double, Vec2 x) { return Mat2{-1.0, 0.3 * std::cos(x.y), 0.4 * x.x, -0.5}; };
  m.noise = NoiseSchedule::constant(sigma);
  return m;
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

InputScaling unit_scaling(double T = 1.0) { return {{0, 0}, {1, 1}, T}; }

Approximator constant_policy(Vec2 c) {
  Approximator a(4, unit_scaling());
  const auto n = a.parameters().size();
  a.parameters()(n - 2) = c.x;
  a.parameters()(n - 1) = c.y;
  return a;
}

}  // namespace

TEST_CASE("approximator gradients match central differences") {
  const auto a = Approximator::initialized(7, {{0.2, -0.1}, {1.5, 0.8}, 2.0}, 11, 1.0);
  CHECK(a.parameters().size() == static_cast<Eigen::Index>(Approximator::parameter_count(7)));
  RandomStream rs(5, 0);
  Batch2 x(2, 6), w(2, 6);
  for (Eigen::Index m = 0; m < 6; ++m) {
    x(0, m) = rs.normal();
    x(1, m) = rs.normal();
    w(0, m) = rs.normal();
    w(1, m) = rs.normal();
  }
  const double t = 0.7;
  const auto J = [&](const Approximator& net, const Batch2& at) {
    return (w.array() * net.evaluate(t, at).array()).sum();
  };
  Approximator::Tape tape;
  a.forward(t, x, tape);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(a.parameters().size());
  const Batch2 dx = a.backward(tape, w, &grad);

  for (int probe = 0; probe < 10; ++probe) {
    const auto k = static_cast<Eigen::Index>(rs.below(static_cast<std::uint64_t>(grad.size())));
    Approximator up = a, down = a;
    const double h = 1e-5;
    up.parameters()(k) += h;
    down.parameters()(k) -= h;
    const double fd = (J(up, x) - J(down, x)) / (2 * h);
    CAPTURE(k);
    CHECK(relative_error(grad(k), fd) < 1e-4);
  }
  for (Eigen::Index m = 0; m < 6; ++m)
    for (int d = 0; d < 2; ++d) {
      Batch2 up = x, down = x;
      up(d, m) += 1e-5;
      down(d, m) -= 1e-5;
      CHECK(relative_error(dx(d, m), (J(a, up) - J(a, down)) / 2e-5) < 1e-4);
    }
}

TEST_CASE("loss gradients match central differences") {
  const SdeModel model = curved_model(0.7);
  const TimeGrid tg(1.0, 6);
  const auto Z = Approximator::initialized(6, unit_scaling(), 1, 1.0);
  const auto Zhat = Approximator::initialized(6, unit_scaling(), 2, 1.0);
  const Batch2 x0 = sample_initial_states(gaussian_sampler({0.3, -0.2}, {0.5, 0.5}), 8, 3);
  const LogDensityTerminal terminal(gaussian_log_density({1.0, 0.5}, {0.6, 0.4}));
  const std::uint64_t seed = 17;
  const auto batch = forward_rollout(model, Z, x0, tg, seed);
  const auto g = loss_gradient(batch, model, Z, Zhat, terminal);

  const auto loss = [&](const Approximator& z, const Approximator& zh) {
    return evaluate_loss(model, z, zh, x0, tg, seed, terminal).total();
  };
  CHECK(g.loss.total() == doctest::Approx(loss(Z, Zhat)).epsilon(1e-12));
  CHECK(sb_likelihood_loss(batch, model, Z, Zhat, terminal).total() ==
        doctest::Approx(g.loss.total()).epsilon(1e-12));

  RandomStream rs(8, 0);
  const double h = 1e-5;
  for (int probe = 0; probe < 10; ++probe) {
    const auto k = static_cast<Eigen::Index>(rs.below(static_cast<std::uint64_t>(g.grad_Z.size())));
    Approximator up = Z, down = Z;
    up.parameters()(k) += h;
    down.parameters()(k) -= h;
    const double fd = (loss(up, Zhat) - loss(down, Zhat)) / (2 * h);
    CAPTURE(k);
    CHECK(relative_error(g.grad_Z(k), fd) < 1e-4);
  }
  for (int probe = 0; probe < 10; ++probe) {
    const auto k =
        static_cast<Eigen::Index>(rs.below(static_cast<std::uint64_t>(g.grad_Zhat.size())));
    Approximator up = Zhat, down = Zhat;
    up.parameters()(k) += h;
    down.parameters()(k) -= h;
    const double fd = (loss(Z, up) - loss(Z, down)) / (2 * h);
    CAPTURE(k);
    CHECK(relative_error(g.grad_Zhat(k), fd) < 1e-4);
  }

  // Holding the states fixed leaves the backward-policy gradient unchanged.
  const auto local = loss_gradient(batch, model, Z, Zhat, terminal, false);
  CHECK((local.grad_Zhat - g.grad_Zhat).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((local.grad_Z - g.grad_Z).norm() > 1e-6);
}

TEST_CASE("Hutchinson estimate of a linear field's divergence") {
  const Mat2 A{1.3, -0.7, 2.1, -0.4};
  const auto V = [&](Vec2 x) { return A * x; };
  RandomStream rs(31, 0, StreamPurpose::Probes);
  const int trials = 4000;
  double sum = 0.0, sq = 0.0;
  for (int k = 0; k < trials; ++k) {
    const double d = hutchinson_divergence(V, {0.4 * k / trials, -1.0}, 4, 1e-3, rs);
    sum += d;
    sq += d * d;
  }
  const double mean = sum / trials;
  const double se = std::sqrt((sq / trials - mean * mean) / trials);
  CHECK(se > 0.0);
  CHECK(std::abs(mean - A.trace()) <= 3 * se);
}

TEST_CASE("rollouts") {
  SdeModel model = curved_model(0.6);
  model.clamp_y = Interval{-0.8, 0.8};
  const TimeGrid tg(2.0, 40);
  const auto rho0 = gaussian_sampler({0.5, 0.0}, {0.4, 0.4});

  SUBCASE("zero policy reproduces the prior ensemble") {
    const std::size_t M = 64;
    const auto prior = simulate_ensemble(model, rho0, tg, M, 9);
    const auto b = forward_rollout(model, Approximator(5, unit_scaling(2.0)),
                                   sample_initial_states(rho0, M, 9), tg, 9);
    bool same = true;
    for (std::size_t m = 0; m < M; ++m)
      for (int n = 0; n <= tg.steps(); ++n) {
        const Vec2 p = prior.state(m, static_cast<std::size_t>(n));
        const auto& X = b.X[static_cast<std::size_t>(n)];
        same = same && p.x == X(0, static_cast<Eigen::Index>(m)) &&
               p.y == X(1, static_cast<Eigen::Index>(m));
      }
    CHECK(same);
  }
  SUBCASE("constant policy shifts the terminal mean by sigma c T") {
    const double sigma = 0.5, c = 0.8, T = 2.0;
    const SdeModel free = brownian(sigma);
    const std::size_t M = 4000;
    const auto b = forward_rollout(free, constant_policy({c, 0}), sample_initial_states(rho0, M, 4),
                                   TimeGrid(T, 20), 4);
    const Eigen::VectorXd end = b.X.back().row(0).transpose();
    const double mean = end.mean();
    const double sd = std::sqrt((end.array() - mean).square().sum() / (M - 1));
    CHECK(std::abs(mean - (0.5 + sigma * c * T)) <= 3 * sd / std::sqrt(static_cast<double>(M)));
  }
  SUBCASE("same seed gives the same batch") {
    const auto Z = Approximator::initialized(8, unit_scaling(2.0), 3);
    const auto Zh = Approximator::initialized(8, unit_scaling(2.0), 4);
    const auto x0 = sample_initial_states(rho0, 32, 5);
    const auto a = forward_rollout(model, Z, x0, tg, 6, {}, &Zh);
    const auto b = forward_rollout(model, Z, x0, tg, 6, {}, &Zh);
    bool same = a.Y == b.Y && a.Yhat == b.Yhat;
    for (std::size_t n = 0; n < a.X.size(); ++n) same = same && a.X[n] == b.X[n];
    CHECK(same);
    const auto other = forward_rollout(model, Z, x0, tg, 7);
    CHECK(other.X.back() != a.X.back());
    CHECK(a.Y.rows() == tg.steps() + 1);
  }
  SUBCASE("clamped coordinates are flagged") {
    const auto b = forward_rollout(model, constant_policy({0, 50}), sample_initial_states(rho0, 16, 2),
                                   tg, 2);
    CHECK(b.X.back().row(1).maxCoeff() == 0.8);
    CHECK(b.inside[10].row(1).sum() == 0.0);
    CHECK(b.inside[10].row(0).sum() == 16.0);
  }
  SUBCASE("non-finite policy output") {
    try {
      forward_rollout(model, constant_policy({NAN, 0}), sample_initial_states(rho0, 4, 2), tg, 2);
      FAIL("expected NonFinitePolicy");
    } catch (const NonFinitePolicyError& e) {
      CHECK(e.code() == ErrorCode::NonFinitePolicy);
      CHECK(e.time() == 0.0);
      CHECK(e.trajectory() == 0);
    }
  }
}

TEST_CASE("uniform terminal density leaves a constant loss") {
  const Grid2D g(-50, 50, -50, 50, 10, 10);
  const DensityField uniform(g, std::vector<double>(g.cells(), 1.0));
  const LogDensityTerminal terminal(grid_log_density(uniform));
  const Approximator zero(4, unit_scaling());
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto x0 = sample_initial_states(gaussian_sampler({0, 0}, {1, 1}), 50, seed);
    const auto L = evaluate_loss(brownian(0.8), zero, zero, x0, TimeGrid(1.0, 10), seed, terminal);
    CHECK(L.running == 0.0);
    CHECK(L.total() == doctest::Approx(std::log(100.0 * 100.0)).epsilon(1e-12));
  }
}

TEST_CASE("terminal objectives") {
  SUBCASE("assigned targets") {
    Batch2 x(2, 1);
    x << 1.0, 0.0;
    CHECK(TargetTerminal({{0, 0}}).evaluate(x, nullptr) == 1.0);
    Batch2 two(2, 2);
    two << 0.5, -1.0, 2.0, 3.0;
    CHECK(TargetTerminal({{0.5, 2.0}, {-1.0, 3.0}}).evaluate(two, nullptr) == 0.0);
    try {
      TargetTerminal({{0, 0}}).evaluate(two, nullptr);
      FAIL("expected UnassignedSample");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::UnassignedSample);
    }
  }
  SUBCASE("cell assignment feeds the modified loss") {
    const auto target = DiscreteTarget::normalized({{-1, 0}, {1, 0}}, {1, 1});
    const auto spec = TerminalSpec::cells(target, {0, 0});
    Batch2 x0(2, 3);
    x0 << -0.3, 0.2, 5.0, 0.0, 1.0, -2.0;
    const auto y = spec.assigned_targets(x0);
    CHECK(y == std::vector<Vec2>{{-1, 0}, {1, 0}, {1, 0}});
    const Approximator zero(3, unit_scaling());
    const auto b = forward_rollout(brownian(0.3), zero, x0, TimeGrid(1.0, 5), 1);
    double expect = 0.0;
    for (int m = 0; m < 3; ++m)
      expect += squared_norm(Vec2{b.X.back()(0, m), b.X.back()(1, m)} - y[static_cast<std::size_t>(m)]);
    CHECK(sdot_terminal_loss(b, brownian(0.3), zero, zero, y).terminal ==
          doctest::Approx(expect / 3));
  }
  SUBCASE("log density underflow") {
    const LogDensityTerminal far(gaussian_log_density({100, 0}, {0.1, 0.1}), -69.0);
    Batch2 x = Batch2::Zero(2, 4);
    try {
      far.evaluate(x, nullptr);
      FAIL("expected TerminalDensityUnderflow");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::TerminalDensityUnderflow);
    }
    x(0, 0) = x(0, 1) = 100;
    CHECK(std::isfinite(far.evaluate(x, nullptr)));
  }
  SUBCASE("grid log density interpolates the binned Gaussian") {
    const Grid2D g = bridge_line();
    const auto f = grid_log_density(binned_gaussian(g, 0.2, 0.3));
    const auto exact = gaussian_log_density({0.2, 0}, {0.3, 0});
    Vec2 grad, grad_exact;
    for (double x : {-0.4, 0.1, 0.25, 0.7}) {
      CHECK(f({x, 0.1}, &grad) == doctest::Approx(exact({x, 0}, &grad_exact)).epsilon(2e-3));
      // Linear interpolation between centres: slope error at most dx/2 times the curvature.
      CHECK(std::abs(grad.x - grad_exact.x) <= 0.5 * g.dx() / (0.3 * 0.3) + 1e-9);
      CHECK(grad.y == 0.0);
    }
  }
}

TEST_CASE("checkpoints round-trip") {
  const auto a = Approximator::initialized(9, {{1, 2}, {3, 4}, 5}, 42);
  const auto path = (std::filesystem::temp_directory_path() / "sbtip_policy.sbpz").string();
  save_checkpoint(path, a);
  const auto b = load_checkpoint(path);
  CHECK(b.width() == 9);
  CHECK(b.parameters() == a.parameters());
  CHECK(b.scaling().horizon == 5.0);
  CHECK(b.evaluate(0.3, Vec2{0.1, 0.2}) == a.evaluate(0.3, Vec2{0.1, 0.2}));
  {
    std::ifstream in(path, std::ios::binary);
    char magic[5] = {};
    in.read(magic, 4);
    CHECK(std::string(magic) == "SBPZ");
  }
  std::filesystem::resize_file(path, 60);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  std::remove(path.c_str());
}

TEST_CASE("training") {
  const SdeModel model = brownian_1d(0.5);
  const TimeGrid tg(1.0, 20);
  const auto rho0 = gaussian_sampler({-1, 0}, {0.1, 0});
  const auto terminal = TerminalSpec::density(gaussian_log_density({1, 0}, {0.1, 0}));
  TrainConfig cfg;
  cfg.width = 16;
  cfg.batch = 64;
  cfg.seed = 3;

  SUBCASE("zero iterations return the initial policies") {
    cfg.iterations = 0;
    const auto r = train(model, tg, rho0, terminal, cfg);
    CHECK(r.loss_history.empty());
    CHECK(r.Z.parameters() ==
          Approximator::initialized(16, cfg.scaling, derive_seed(3, 1), cfg.output_scale).parameters());
  }
  SUBCASE("short run lowers the loss and reproduces") {
    cfg.iterations = 120;
    cfg.stage_length = 40;
    cfg.lr = 1e-2;
    const auto r = train(model, tg, rho0, terminal, cfg);
    REQUIRE(r.loss_history.size() == 120);
    CHECK(r.stages[0] == TrainStage::Forward);
    CHECK(r.stages[40] == TrainStage::Backward);
    CHECK(r.stages[80] == TrainStage::Forward);
    double tail = 0.0;
    for (std::size_t k = 100; k < 120; ++k) tail += r.loss_history[k] / 20;
    CHECK(tail < r.loss_history[0]);
    const auto again = train(model, tg, rho0, terminal, cfg);
    CHECK(again.loss_history == r.loss_history);
  }
  SUBCASE("configuration checks") {
    cfg.lr = 0;
    CHECK_THROWS_AS(train(model, tg, rho0, terminal, cfg), Error);
    cfg = {};
    cfg.batch = 0;
    CHECK_THROWS_AS(train(model, tg, rho0, terminal, cfg), Error);
  }
}
