#include "sbtip/sde.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "sbtip/error.hpp"
#include "sbtip/text.hpp"

namespace sbtip {

double NoiseSchedule::operator()(double t) const {
  switch (kind) {
    case NoiseKind::Constant:
      return sigma_start;
    case NoiseKind::Linear: {
      const double s = std::clamp(t / horizon, 0.0, 1.0);
      return sigma_start + (sigma_end - sigma_start) * s;
    }
    case NoiseKind::Cosine: {
      const double s = std::clamp(t / horizon, 0.0, 1.0);
      return sigma_end + (sigma_start - sigma_end) * 0.5 * (1.0 + std::cos(std::numbers::pi * s));
    }
  }
  return sigma_start;
}

void NoiseSchedule::validate() const {
  if (!(sigma_start >= 0.0) || !(sigma_end >= 0.0) || !std::isfinite(sigma_start) ||
      !std::isfinite(sigma_end))
    throw Error(ErrorCode::InvalidArgument, "noise levels must be finite and >= 0");
  if (kind != NoiseKind::Constant && !(horizon > 0.0))
    throw Error(ErrorCode::InvalidArgument, "noise schedule horizon must be > 0");
}

TimeGrid::TimeGrid(double T, int N) : T_(T), N_(N) {
  if (!(T > 0.0) || !std::isfinite(T)) throw Error(ErrorCode::InvalidArgument, "horizon T must be > 0");
  if (N < 1) throw Error(ErrorCode::InvalidArgument, "number of steps N must be >= 1");
}

Vec2 SdeModel::clamp(Vec2 x) const {
  if (clamp_x) x.x = std::clamp(x.x, clamp_x->lo, clamp_x->hi);
  if (clamp_y) x.y = std::clamp(x.y, clamp_y->lo, clamp_y->hi);
  return x;
}

Mat2 SdeModel::drift_jacobian(double t, Vec2 x) const {
  if (jacobian) return jacobian(t, x);
  const double hx = 1e-6 * std::max(1.0, std::abs(x.x));
  const double hy = 1e-6 * std::max(1.0, std::abs(x.y));
  const Vec2 dfx = (1.0 / (2 * hx)) * (drift(t, {x.x + hx, x.y}) - drift(t, {x.x - hx, x.y}));
  const Vec2 dfy = (1.0 / (2 * hy)) * (drift(t, {x.x, x.y + hy}) - drift(t, {x.x, x.y - hy}));
  return {dfx.x, dfy.x, dfx.y, dfy.y};
}

void SdeModel::validate() const {
  if (!drift) throw Error(ErrorCode::InvalidArgument, "model has no drift");
  noise.validate();
  if (!(axis_noise.x >= 0.0) || !(axis_noise.y >= 0.0))
    throw Error(ErrorCode::InvalidArgument, "axis noise multipliers must be >= 0");
  for (const auto& c : {clamp_x, clamp_y})
    if (c && !(c->lo <= c->hi)) throw Error(ErrorCode::InvalidArgument, "clamp interval reversed");
}

Vec2 euler_maruyama_step(const SdeModel& model, Vec2 x, double t, double dt, Vec2 xi) {
  if (!(dt > 0.0)) throw Error(ErrorCode::InvalidArgument, "dt must be > 0");
  const Vec2 f = model.drift(t, x);
  if (!is_finite(f)) throw NonFiniteDriftError(t, 0, 0);
  return model.clamp(euler_increment(x, f, model.sigma(t), dt, xi));
}

StateSampler point_sampler(Vec2 x0) {
  return [x0](RandomStream&) { return x0; };
}

StateSampler gaussian_sampler(Vec2 mean, Vec2 stddev) {
  return [mean, stddev](RandomStream& rng) {
    const double a = rng.normal();
    const double b = rng.normal();
    return Vec2{mean.x + stddev.x * a, mean.y + stddev.y * b};
  };
}

StateSampler density_sampler(const DensityField& density) {
  const DensityField p = normalize(density);
  auto cdf = std::make_shared<std::vector<double>>(p.mass().size());
  double acc = 0.0;
  for (std::size_t c = 0; c < cdf->size(); ++c) (*cdf)[c] = acc += p[c];
  const Grid2D g = p.grid();
  return [cdf, g](RandomStream& rng) {
    const double u = rng.uniform() * cdf->back();
    auto it = std::upper_bound(cdf->begin(), cdf->end(), u);
    if (it == cdf->end()) --it;
    const std::size_t c = static_cast<std::size_t>(it - cdf->begin());
    const double ux = rng.uniform() - 0.5;
    const double uy = rng.uniform() - 0.5;
    const Vec2 ctr = g.center(c);
    return Vec2{ctr.x + ux * g.dx(), ctr.y + uy * g.dy()};
  };
}

StateSampler points_sampler(std::vector<Vec2> points) {
  if (points.empty()) throw Error(ErrorCode::EmptyInput, "no points to sample from");
  auto pts = std::make_shared<std::vector<Vec2>>(std::move(points));
  return [pts](RandomStream& rng) { return (*pts)[rng.below(pts->size())]; };
}

PathEnsemble::PathEnsemble(TimeGrid time_grid, std::size_t trajectories)
    : tg_(time_grid), m_(trajectories), states_(trajectories * slices()) {}

std::vector<Vec2> PathEnsemble::slice(std::size_t step) const {
  std::vector<Vec2> out(m_);
  for (std::size_t m = 0; m < m_; ++m) out[m] = state(m, step);
  return out;
}

PathEnsemble simulate_ensemble(const SdeModel& model, const StateSampler& x0_sampler,
                               const TimeGrid& tg, std::size_t M, std::uint64_t seed) {
  if (M < 1) throw Error(ErrorCode::InvalidArgument, "ensemble size must be >= 1");
  model.validate();
  PathEnsemble ens(tg, M);
  const double dt = tg.dt();
  for (std::size_t m = 0; m < M; ++m) {
    RandomStream init(seed, m, StreamPurpose::InitialState);
    RandomStream noise(seed, m, StreamPurpose::Increments);
    Vec2 x = model.clamp(x0_sampler(init));
    ens.state(m, 0) = x;
    for (int n = 0; n < tg.steps(); ++n) {
      const double t = tg.time(n);
      const Vec2 f = model.drift(t, x);
      if (!is_finite(f)) throw NonFiniteDriftError(t, m, static_cast<std::size_t>(n));
      const Vec2 xi{noise.normal(), noise.normal()};
      x = model.clamp(euler_increment(x, f, model.sigma(t), dt, xi));
      ens.state(m, n + 1) = x;
    }
  }
  return ens;
}

void write_ensemble_csv(const std::string& path, const PathEnsemble& ensemble) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "trajectory_id,step,t,x,y\n";
  const auto& tg = ensemble.time_grid();
  for (std::size_t m = 0; m < ensemble.trajectories(); ++m)
    for (std::size_t n = 0; n < ensemble.slices(); ++n) {
      const Vec2 s = ensemble.state(m, n);
      out << m << ',' << n << ',' << format_double(tg.time(static_cast<int>(n))) << ','
          << format_double(s.x) << ',' << format_double(s.y) << '\n';
    }
}

namespace {

struct AxisWindow {
  int first = 0;
  std::vector<double> w;
};

void gaussian_window(double mean, double sd, double reach, double lo, double d, int n,
                     AxisWindow& out) {
  out.w.clear();
  if (n == 1) {
    out.first = 0;
    out.w.push_back(1.0);
    return;
  }
  // Cells whose centre lies within `reach` of the mean.
  out.first = std::max(0, static_cast<int>(std::ceil((mean - reach - lo) / d - 0.5)));
  const int last = std::min(n - 1, static_cast<int>(std::floor((mean + reach - lo) / d - 0.5)));
  for (int i = out.first; i <= last; ++i) {
    const double z = (lo + (i + 0.5) * d - mean) / sd;
    out.w.push_back(std::exp(-0.5 * z * z));
  }
}

}  // namespace

void check_noise_resolution(const SdeModel& model, double t, double dt, const Grid2D& grid) {
  const Vec2 sig = model.sigma(t);
  const double sq = std::sqrt(dt);
  const double sdx = sig.x * sq, sdy = sig.y * sq;
  if (sdx < 0.25 * grid.dx() || (grid.ny() > 1 && sdy < 0.25 * grid.dy()))
    throw Error(ErrorCode::DegenerateNoise,
                "one-step spread sigma*sqrt(dt) is below a quarter cell (x: " +
                    format_double(sdx) + " vs " + format_double(grid.dx()) + ", y: " +
                    format_double(sdy) + " vs " + format_double(grid.dy()) + ")");
}

KernelMatrix step_kernel(const SdeModel& model, double t, double dt, const Grid2D& grid,
                         double truncation_sigmas) {
  if (!(dt > 0.0)) throw Error(ErrorCode::InvalidArgument, "dt must be > 0");
  if (!(truncation_sigmas > 0.0)) throw Error(ErrorCode::InvalidArgument, "truncation must be > 0");
  check_noise_resolution(model, t, dt, grid);
  const Vec2 sig = model.sigma(t);
  const double sq = std::sqrt(dt);
  const double sdx = sig.x * sq, sdy = sig.y * sq;
  const int rx = static_cast<int>(std::ceil(truncation_sigmas * sdx / grid.dx()));
  const int ry = grid.ny() > 1 ? static_cast<int>(std::ceil(truncation_sigmas * sdy / grid.dy())) : 0;

  // Means are kept on the span of cell centres so every row has support.
  const double cx_lo = grid.x_center(0), cx_hi = grid.x_center(grid.nx() - 1);
  const double cy_lo = grid.y_center(0), cy_hi = grid.y_center(grid.ny() - 1);

  const std::size_t n = grid.cells();
  std::vector<std::size_t> offsets(n + 1, 0);
  std::vector<std::uint32_t> cols;
  std::vector<double> vals;
  cols.reserve(n * (2 * rx + 2) * (2 * ry + 2));
  vals.reserve(cols.capacity());
  AxisWindow wx, wy;
  for (std::size_t c = 0; c < n; ++c) {
    const Vec2 x = grid.center(c);
    const Vec2 f = model.drift(t, x);
    if (!is_finite(f)) throw NonFiniteDriftError(t, c, 0);
    Vec2 mu = model.clamp({x.x + f.x * dt, x.y + f.y * dt});
    mu.x = std::clamp(mu.x, cx_lo, cx_hi);
    mu.y = std::clamp(mu.y, cy_lo, cy_hi);
    gaussian_window(mu.x, sdx, truncation_sigmas * sdx, grid.xmin(), grid.dx(), grid.nx(), wx);
    gaussian_window(mu.y, sdy, truncation_sigmas * sdy, grid.ymin(), grid.dy(), grid.ny(), wy);
    double sx = 0.0, sy = 0.0;
    for (double v : wx.w) sx += v;
    for (double v : wy.w) sy += v;
    const double z = 1.0 / (sx * sy);
    for (std::size_t b = 0; b < wy.w.size(); ++b) {
      const std::size_t base = grid.index(wx.first, wy.first + static_cast<int>(b));
      for (std::size_t a = 0; a < wx.w.size(); ++a) {
        cols.push_back(static_cast<std::uint32_t>(base + a));
        vals.push_back(wy.w[b] * wx.w[a] * z);
      }
    }
    offsets[c + 1] = cols.size();
  }
  return KernelMatrix(grid, std::move(offsets), std::move(cols), std::move(vals), rx, ry,
                      truncation_sigmas);
}

KernelSequence::KernelSequence(SdeModel model, TimeGrid tg, Grid2D grid, double truncation_sigmas,
                               std::size_t memory_budget_bytes)
    : model_(std::move(model)),
      tg_(tg),
      grid_(grid),
      truncation_(truncation_sigmas),
      budget_(memory_budget_bytes),
      shared_(model_.autonomous && model_.noise.is_constant()),
      cache_(shared_ ? 1 : static_cast<std::size_t>(tg.steps())) {
  model_.validate();
}

std::shared_ptr<const KernelMatrix> KernelSequence::operator()(int n) const {
  if (n < 0 || n >= tg_.steps()) throw Error(ErrorCode::InvalidArgument, "step index out of range");
  const std::size_t slot = shared_ ? 0 : static_cast<std::size_t>(n);
  if (cache_[slot]) return cache_[slot];
  auto k = std::make_shared<const KernelMatrix>(step_kernel(model_, tg_.time(n), tg_.dt(), grid_, truncation_));
  const std::size_t bytes = 2 * k->nonzeros() * (sizeof(double) + sizeof(std::uint32_t));
  if (shared_ || cached_bytes_ + bytes <= budget_) {
    cache_[slot] = k;
    cached_bytes_ += bytes;
  }
  return k;
}

}  // namespace sbtip
