#include "sbtip/sdot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <utility>

#include "sbtip/error.hpp"
#include "sbtip/text.hpp"

namespace sbtip {

DiscreteTarget DiscreteTarget::normalized(std::vector<Vec2> points, std::vector<double> weights) {
  if (points.empty() || points.size() != weights.size())
    throw Error(ErrorCode::InvalidArgument, "target needs one weight per point");
  double z = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w))
      throw Error(ErrorCode::InvalidArgument, "target weights must be finite and nonnegative");
    z += w;
  }
  if (!(z > 0.0)) throw Error(ErrorCode::InvalidArgument, "target weights sum to zero");
  for (double& w : weights) w /= z;
  DiscreteTarget t{std::move(points), std::move(weights)};
  t.validate();
  return t;
}

void DiscreteTarget::validate() const {
  if (points.empty() || points.size() != weights.size())
    throw Error(ErrorCode::InvalidArgument, "target needs one weight per point");
  double z = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!is_finite(points[i])) throw Error(ErrorCode::InvalidArgument, "target point is not finite");
    if (!(weights[i] >= 0.0)) throw Error(ErrorCode::InvalidArgument, "target weight must be >= 0");
    z += weights[i];
  }
  if (std::abs(z - 1.0) > 1e-12)
    throw Error(ErrorCode::InvalidArgument, "target weights must sum to one");
}

void gauge_fix(HeightVector& h) {
  if (h.empty()) return;
  const double m = std::accumulate(h.begin(), h.end(), 0.0) / static_cast<double>(h.size());
  for (double& v : h) v -= m;
}

std::size_t assign_cell(Vec2 x, const DiscreteTarget& target, const HeightVector& h) {
  if (h.size() != target.size())
    throw Error(ErrorCode::InvalidArgument, "height vector size does not match the target");
  const auto plane = [&](std::size_t i) {
    const Vec2 y = target.points[i];
    return dot(x, y) - 0.5 * squared_norm(y) + h[i];
  };
  // Values within a relative 1e-12 count as ties, so that symmetric
  // configurations resolve to the lowest index despite rounding.
  std::size_t best = 0;
  double top = plane(0);
  for (std::size_t i = 1; i < h.size(); ++i) {
    const double v = plane(i);
    if (v > top + 1e-12 * std::max(1.0, std::abs(top))) {
      top = v;
      best = i;
    }
  }
  return best;
}

std::vector<double> estimate_weights(const StateSampler& source, const DiscreteTarget& target,
                                     const HeightVector& h, std::size_t N, std::uint64_t seed,
                                     std::uint64_t block) {
  if (N < 1) throw Error(ErrorCode::InvalidArgument, "sample count must be >= 1");
  std::vector<std::size_t> counts(target.size(), 0);
  RandomStream rs(seed, block, StreamPurpose::Sampling);
  for (std::size_t k = 0; k < N; ++k) ++counts[assign_cell(source(rs), target, h)];
  std::vector<double> w(counts.size());
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = static_cast<double>(counts[i]) / static_cast<double>(N);
  return w;
}

namespace {

// Weights from the even-numbered and odd-numbered halves of one sample
// batch. Descent directions and energy increments use different halves so
// that the energy estimate is not biased by the step it measures.
std::pair<std::vector<double>, std::vector<double>> split_weights(
    const StateSampler& source, const DiscreteTarget& target, const HeightVector& h, std::size_t N,
    std::uint64_t seed, std::uint64_t block) {
  std::vector<std::size_t> even(target.size(), 0), odd(target.size(), 0);
  RandomStream rs(seed, block, StreamPurpose::Sampling);
  for (std::size_t k = 0; k < N; ++k) ++(k % 2 == 0 ? even : odd)[assign_cell(source(rs), target, h)];
  const double ne = static_cast<double>((N + 1) / 2), no = static_cast<double>(N / 2);
  std::vector<double> a(target.size()), b(target.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<double>(even[i]) / ne;
    b[i] = static_cast<double>(odd[i]) / no;
  }
  return {a, b};
}

}  // namespace

StateSampler uniform_box_sampler(double xmin, double xmax, double ymin, double ymax) {
  if (!(xmax >= xmin) || !(ymax >= ymin))
    throw Error(ErrorCode::InvalidArgument, "box bounds are inverted");
  return [=](RandomStream& rs) {
    const double u = rs.uniform(), v = rs.uniform();
    return Vec2{xmin + (xmax - xmin) * u, ymin + (ymax - ymin) * v};
  };
}

StateSampler source_sampler(const std::vector<Vec2>& points, SourceMeasure measure) {
  if (points.empty()) throw Error(ErrorCode::EmptyInput, "source point cloud is empty");
  if (measure == SourceMeasure::Empirical) return points_sampler(points);
  Vec2 lo = points[0], hi = points[0];
  for (const auto& p : points) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
  }
  return uniform_box_sampler(lo.x, hi.x, lo.y, hi.y);
}

FitResult fit_heights(const StateSampler& source, const DiscreteTarget& target,
                      const FitOptions& o) {
  target.validate();
  if (o.patience < 1) throw Error(ErrorCode::InvalidArgument, "patience must be >= 1");
  if (!(o.step > 0.0) || !(o.min_step > 0.0))
    throw Error(ErrorCode::InvalidArgument, "step sizes must be > 0");
  if (o.max_steps < 0) throw Error(ErrorCode::InvalidArgument, "max_steps must be >= 0");
  const std::size_t n = target.size();
  const auto& nu = target.weights;

  if (o.samples < 2) throw Error(ErrorCode::InvalidArgument, "fitting needs at least two samples");
  FitResult r;
  r.h.assign(n, 0.0);
  auto [dir, probe] = split_weights(source, target, r.h, o.samples, o.seed, 0);
  double step = o.step, energy = 0.0, best = 0.0;
  int since_best = 0;
  bool finished = false;
  for (int k = 1; k <= o.max_steps; ++k) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = dir[i] - nu[i];
    gauge_fix(g);
    HeightVector next(n);
    for (std::size_t i = 0; i < n; ++i) next[i] = r.h[i] - step * g[i];
    gauge_fix(next);
    auto [dir_next, probe_next] =
        split_weights(source, target, next, o.samples, o.seed, static_cast<std::uint64_t>(k));
    for (std::size_t i = 0; i < n; ++i)
      energy += (0.5 * (probe[i] + probe_next[i]) - nu[i]) * (next[i] - r.h[i]);
    r.h = std::move(next);
    dir = std::move(dir_next);
    probe = std::move(probe_next);
    r.energy_history.push_back(energy);
    r.step_history.push_back(step);
    r.steps = k;
    if (energy < best) {
      best = energy;
      since_best = 0;
    } else if (++since_best >= o.patience) {
      if (0.5 * step < o.min_step) {
        finished = true;
        break;
      }
      step *= 0.5;
      since_best = 0;
    }
  }
  // Pool both halves for the reported weights.
  const double fe = static_cast<double>((o.samples + 1) / 2) / static_cast<double>(o.samples);
  r.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.weights[i] = fe * dir[i] + (1.0 - fe) * probe[i];
  r.stalled = !finished && o.max_steps > 0;
  return r;
}

double energy_difference(const StateSampler& source, const DiscreteTarget& target,
                         const HeightVector& a, const HeightVector& b, std::size_t N,
                         std::uint64_t seed, int pieces) {
  if (a.size() != target.size() || b.size() != target.size())
    throw Error(ErrorCode::InvalidArgument, "height vector size does not match the target");
  if (pieces < 1) throw Error(ErrorCode::InvalidArgument, "pieces must be >= 1");
  // dE/ds along h(s) = a + s (b - a) is (w(h(s)) - nu) . (b - a).
  double total = 0.0;
  for (int k = 0; k <= pieces; ++k) {
    const double s = static_cast<double>(k) / pieces;
    HeightVector h(a.size());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = a[i] + s * (b[i] - a[i]);
    const auto w = estimate_weights(source, target, h, N, seed, static_cast<std::uint64_t>(k));
    double slope = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) slope += (w[i] - target.weights[i]) * (b[i] - a[i]);
    total += (k == 0 || k == pieces ? 0.5 : 1.0) * slope;
  }
  return total / pieces;
}

RegionPairing pair_regions(const std::vector<Vec2>& source, const std::vector<Vec2>& targets,
                           const std::vector<int>& labels, const FitOptions& options,
                           SourceMeasure measure) {
  if (targets.empty()) throw Error(ErrorCode::EmptyInput, "no target points");
  if (labels.size() != targets.size())
    throw Error(ErrorCode::InvalidArgument, "every target point needs a region label");
  RegionPairing out;
  out.regions = labels;
  std::sort(out.regions.begin(), out.regions.end());
  out.regions.erase(std::unique(out.regions.begin(), out.regions.end()), out.regions.end());
  const std::size_t n = out.regions.size();
  std::vector<Vec2> centroid(n, Vec2{0, 0});
  std::vector<double> count(n, 0.0);
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto r = static_cast<std::size_t>(
        std::lower_bound(out.regions.begin(), out.regions.end(), labels[k]) - out.regions.begin());
    centroid[r] += targets[k];
    count[r] += 1.0;
  }
  for (std::size_t r = 0; r < n; ++r) centroid[r] = (1.0 / count[r]) * centroid[r];
  out.target = DiscreteTarget::normalized(centroid, count);
  if (n == 1) {
    out.fit.h = {0.0};
    out.fit.weights = {1.0};
  } else {
    out.fit = fit_heights(source_sampler(source, measure), out.target, options);
  }
  out.source_cell.reserve(source.size());
  out.source_region.reserve(source.size());
  for (const auto& p : source) {
    const std::size_t c = assign_cell(p, out.target, out.fit.h);
    out.source_cell.push_back(c);
    out.source_region.push_back(out.regions[c]);
  }
  return out;
}

void write_heights_csv(const std::string& path, const DiscreteTarget& target, const HeightVector& h) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "index,x,y,weight,h\n";
  for (std::size_t i = 0; i < target.size(); ++i)
    out << i << ',' << format_double(target.points[i].x) << ',' << format_double(target.points[i].y)
        << ',' << format_double(target.weights[i]) << ',' << format_double(h.at(i)) << '\n';
}

void write_energy_csv(const std::string& path, const FitResult& fit) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "step,energy,step_size\n";
  for (std::size_t k = 0; k < fit.energy_history.size(); ++k)
    out << k + 1 << ',' << format_double(fit.energy_history[k]) << ','
        << format_double(fit.step_history[k]) << '\n';
}

}  // namespace sbtip
