#include "sbtip/morris_lecar.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "sbtip/error.hpp"
#include "sbtip/text.hpp"

namespace sbtip {

MLParams MLParams::class_one() { return MLParams{}; }

MLParams MLParams::class_two() {
  MLParams p;
  p.g_Ca = 4.0;
  p.phi = 0.23;
  p.V3 = 12.0;
  p.V4 = 17.4;
  p.I = 37.0;
  return p;
}

MLParams MLParams::named(const std::string& name) {
  if (name == "class1" || name == "I" || name == "1") return class_one();
  if (name == "class2" || name == "II" || name == "2") return class_two();
  throw Error(ErrorCode::InvalidArgument, "unknown Morris-Lecar parameter class '" + name + "'");
}

void MLParams::validate() const {
  if (!(C > 0.0)) throw Error(ErrorCode::InvalidArgument, "capacitance must be > 0");
  if (V2 == 0.0 || V4 == 0.0) throw Error(ErrorCode::InvalidArgument, "V2 and V4 must be nonzero");
  if (g_Ca < 0.0 || g_K < 0.0 || g_L < 0.0)
    throw Error(ErrorCode::InvalidArgument, "conductances must be >= 0");
}

double ml_m_inf(double v, const MLParams& p) { return 0.5 * (1.0 + std::tanh((v - p.V1) / p.V2)); }
double ml_w_inf(double v, const MLParams& p) { return 0.5 * (1.0 + std::tanh((v - p.V3) / p.V4)); }
double ml_tau_w(double v, const MLParams& p) { return 1.0 / std::cosh((v - p.V3) / (2.0 * p.V4)); }

Vec2 ml_drift(Vec2 s, const MLParams& p) {
  const double v = s.x, w = s.y;
  const double dv = (-p.g_Ca * ml_m_inf(v, p) * (v - p.V_Ca) - p.g_K * w * (v - p.V_K) -
                     p.g_L * (v - p.V_L) + p.I) /
                    p.C;
  const double dw = p.phi * (ml_w_inf(v, p) - w) * std::cosh((v - p.V3) / (2.0 * p.V4));
  return {dv, dw};
}

Mat2 ml_jacobian(Vec2 s, const MLParams& p) {
  const double v = s.x, w = s.y;
  const double tm = std::tanh((v - p.V1) / p.V2);
  const double dm = 0.5 * (1.0 - tm * tm) / p.V2;
  const double tw = std::tanh((v - p.V3) / p.V4);
  const double dwinf = 0.5 * (1.0 - tw * tw) / p.V4;
  const double a = (v - p.V3) / (2.0 * p.V4);
  const double m = 0.5 * (1.0 + tm);
  const double winf = 0.5 * (1.0 + tw);
  Mat2 j;
  j.xx = (-p.g_Ca * (dm * (v - p.V_Ca) + m) - p.g_K * w - p.g_L) / p.C;
  j.xy = -p.g_K * (v - p.V_K) / p.C;
  j.yx = p.phi * (dwinf * std::cosh(a) + (winf - w) * std::sinh(a) / (2.0 * p.V4));
  j.yy = -p.phi * std::cosh(a);
  return j;
}

std::vector<Vec2> to_scaled(const std::vector<Vec2>& states) {
  std::vector<Vec2> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(to_scaled(s));
  return out;
}

SdeModel morris_lecar_model(const MLParams& p, double g, double w_noise_fraction) {
  p.validate();
  SdeModel m;
  m.drift = [p](double, Vec2 x) {
    const Vec2 f = ml_drift(from_scaled(x), p);
    return Vec2{f.x / kVoltageScale, f.y};
  };
  m.jacobian = [p](double, Vec2 x) {
    const Mat2 j = ml_jacobian(from_scaled(x), p);
    return Mat2{j.xx, j.xy / kVoltageScale, j.yx * kVoltageScale, j.yy};
  };
  m.noise = NoiseSchedule::constant(g);
  m.axis_noise = {1.0, w_noise_fraction};
  m.clamp_y = Interval{0.0, 1.0};
  m.autonomous = true;
  return m;
}

std::string to_string(EquilibriumKind kind) {
  switch (kind) {
    case EquilibriumKind::StableNode: return "stable node";
    case EquilibriumKind::StableSpiral: return "stable spiral";
    case EquilibriumKind::UnstableNode: return "unstable node";
    case EquilibriumKind::UnstableSpiral: return "unstable spiral";
    case EquilibriumKind::Saddle: return "saddle";
    case EquilibriumKind::Center: return "center";
  }
  return "unknown";
}

bool is_stable(EquilibriumKind kind) {
  return kind == EquilibriumKind::StableNode || kind == EquilibriumKind::StableSpiral;
}

std::array<std::complex<double>, 2> eigenvalues(const Mat2& m) {
  const double tr = m.trace();
  const double disc = 0.25 * tr * tr - m.det();
  if (disc >= 0.0) {
    const double r = std::sqrt(disc);
    return {std::complex<double>(0.5 * tr - r, 0.0), std::complex<double>(0.5 * tr + r, 0.0)};
  }
  const double im = std::sqrt(-disc);
  return {std::complex<double>(0.5 * tr, -im), std::complex<double>(0.5 * tr, im)};
}

EquilibriumKind classify(const std::array<std::complex<double>, 2>& ev) {
  if (ev[0].imag() != 0.0) {
    if (ev[0].real() < 0.0) return EquilibriumKind::StableSpiral;
    if (ev[0].real() > 0.0) return EquilibriumKind::UnstableSpiral;
    return EquilibriumKind::Center;
  }
  const double a = ev[0].real(), b = ev[1].real();
  if (a < 0.0 && b < 0.0) return EquilibriumKind::StableNode;
  if (a > 0.0 && b > 0.0) return EquilibriumKind::UnstableNode;
  return EquilibriumKind::Saddle;
}

namespace {

Vec2 scaled_residual(Vec2 x, const MLParams& p) {
  const Vec2 f = ml_drift(from_scaled(x), p);
  return {f.x / kVoltageScale, f.y};
}

Mat2 scaled_jacobian(Vec2 x, const MLParams& p) {
  const Mat2 j = ml_jacobian(from_scaled(x), p);
  return {j.xx, j.xy / kVoltageScale, j.yx * kVoltageScale, j.yy};
}

bool newton(Vec2& x, const MLParams& p) {
  for (int it = 0; it < 100; ++it) {
    const Vec2 f = scaled_residual(x, p);
    if (!is_finite(f)) return false;
    if (norm(f) < 1e-13) return true;
    const Mat2 j = scaled_jacobian(x, p);
    const double det = j.det();
    if (det == 0.0 || !std::isfinite(det)) return false;
    Vec2 step{(j.yy * f.x - j.xy * f.y) / det, (-j.yx * f.x + j.xx * f.y) / det};
    // Damp steps that would jump across the whole state space.
    const double len = norm(step);
    if (len > 2.0) step = (2.0 / len) * step;
    x = x - step;
    if (std::abs(x.x) > 50.0 || std::abs(x.y) > 10.0) return false;
  }
  return norm(scaled_residual(x, p)) < 1e-11;
}

}  // namespace

std::vector<Equilibrium> find_equilibria(const MLParams& p, const SearchBox& box, int n_seeds) {
  p.validate();
  if (n_seeds < 1) throw Error(ErrorCode::InvalidArgument, "n_seeds must be >= 1");
  std::vector<Vec2> roots;
  for (int a = 0; a < n_seeds; ++a) {
    for (int b = 0; b < n_seeds; ++b) {
      const double fa = n_seeds == 1 ? 0.5 : static_cast<double>(a) / (n_seeds - 1);
      const double fb = n_seeds == 1 ? 0.5 : static_cast<double>(b) / (n_seeds - 1);
      Vec2 x = to_scaled({box.v_lo + fa * (box.v_hi - box.v_lo), box.w_lo + fb * (box.w_hi - box.w_lo)});
      if (!newton(x, p)) continue;
      const bool seen = std::any_of(roots.begin(), roots.end(),
                                    [&](Vec2 r) { return norm(r - x) < 1e-6; });
      if (!seen) roots.push_back(x);
    }
  }
  std::sort(roots.begin(), roots.end(), [](Vec2 a, Vec2 b) { return a.x < b.x; });
  std::vector<Equilibrium> out;
  for (const Vec2& r : roots) {
    Equilibrium e;
    e.state = from_scaled(r);
    e.eigenvalues = eigenvalues(ml_jacobian(e.state, p));
    e.kind = classify(e.eigenvalues);
    out.push_back(e);
  }
  return out;
}

std::vector<Vec2> sample_invariant_cycle(const MLParams& p, double transient, double record,
                                         double dt, Vec2 x0) {
  p.validate();
  if (!(dt > 0.0) || transient < 0.0 || record < 0.0)
    throw Error(ErrorCode::InvalidArgument, "need dt > 0 and nonnegative durations");
  constexpr double kMinSpacing = 1e-3;
  Vec2 s = x0;
  const auto advance = [&](double t) {
    const Vec2 f = ml_drift(s, p);
    if (!is_finite(f)) throw NonFiniteDriftError(t, 0, 0);
    s = s + dt * f;
    s.y = std::clamp(s.y, 0.0, 1.0);
    if (!(s.x >= -200.0 && s.x <= 200.0))
      throw Error(ErrorCode::Diverged, "voltage left [-200, 200] mV at t=" + format_double(t));
  };
  const long long n_transient = std::llround(transient / dt);
  const long long n_record = std::llround(record / dt);
  for (long long k = 0; k < n_transient; ++k) advance(k * dt);
  std::vector<Vec2> out{s};
  for (long long k = 0; k < n_record; ++k) {
    advance((n_transient + k) * dt);
    if (norm(to_scaled(s) - to_scaled(out.back())) >= kMinSpacing) out.push_back(s);
  }
  return out;
}

std::vector<Vec2> normalized_orbit(const std::vector<Vec2>& states) {
  if (states.empty()) return {};
  Vec2 lo = states[0], hi = states[0];
  for (const auto& s : states) {
    lo = {std::min(lo.x, s.x), std::min(lo.y, s.y)};
    hi = {std::max(hi.x, s.x), std::max(hi.y, s.y)};
  }
  const Vec2 span{hi.x > lo.x ? hi.x - lo.x : 1.0, hi.y > lo.y ? hi.y - lo.y : 1.0};
  std::vector<Vec2> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back({(s.x - lo.x) / span.x, (s.y - lo.y) / span.y});
  return out;
}

std::size_t first_period_length(const std::vector<Vec2>& pts) {
  const std::size_t n = pts.size();
  if (n < 3) return n;
  double diam = 0.0;
  for (const auto& q : pts) diam = std::max(diam, norm(q - pts[0]));
  if (diam == 0.0) return n;
  std::size_t k = 1;
  while (k < n && norm(pts[k] - pts[0]) < 0.25 * diam) ++k;
  // After leaving, the revolution ends at the closest return to the start.
  std::size_t best = n;
  double best_d = 0.1 * diam;
  for (; k < n; ++k) {
    const double d = norm(pts[k] - pts[0]);
    if (d < best_d) {
      best_d = d;
      best = k;
    } else if (best != n && d > 2.0 * best_d + 1e-12) {
      break;
    }
  }
  return best == n ? n : best;
}

CycleGeometry analyze_cycle(const std::vector<Vec2>& states) {
  CycleGeometry g;
  if (states.empty()) return g;
  const auto pts = normalized_orbit(states);
  const std::size_t len = first_period_length(pts);
  g.period_points = len;
  g.v_min = g.v_max = states[0].x;
  g.w_min = g.w_max = states[0].y;
  for (std::size_t i = 0; i < len; ++i) {
    g.v_min = std::min(g.v_min, states[i].x);
    g.v_max = std::max(g.v_max, states[i].x);
    g.w_min = std::min(g.w_min, states[i].y);
    g.w_max = std::max(g.w_max, states[i].y);
    for (std::size_t j = i + 1; j < len; ++j) g.diameter = std::max(g.diameter, norm(pts[i] - pts[j]));
    if (i + 1 < len) g.max_step_gap = std::max(g.max_step_gap, norm(pts[i + 1] - pts[i]));
  }
  g.closure_gap = len < pts.size() ? norm(pts[len] - pts[0]) : norm(pts[len - 1] - pts[0]);
  g.closed = g.diameter > 0.0 && len < pts.size() && g.closure_gap < 0.05 * g.diameter &&
             g.max_step_gap < 0.05 * g.diameter;
  return g;
}

double distance_to_orbit(const std::vector<Vec2>& states, Vec2 point) {
  double d = std::numeric_limits<double>::infinity();
  const Vec2 q = to_scaled(point);
  for (const auto& s : states) d = std::min(d, norm(to_scaled(s) - q));
  return d;
}

int winding_number(const std::vector<Vec2>& states, Vec2 point) {
  const auto pts = to_scaled(states);
  const std::size_t len = first_period_length(normalized_orbit(states));
  if (len < 3) return 0;
  const Vec2 q = to_scaled(point);
  double turn = 0.0;
  for (std::size_t k = 0; k < len; ++k) {
    const Vec2 a = pts[k] - q, b = pts[(k + 1) % len] - q;
    turn += std::atan2(a.x * b.y - a.y * b.x, dot(a, b));
  }
  return static_cast<int>(std::lround(turn / (2.0 * std::numbers::pi)));
}

namespace {

// Points covering `fraction` of the loop's arc length, starting `start`
// revolutions after the voltage peak.
std::vector<Vec2> cut_arc(const std::vector<Vec2>& loop, double start, double fraction) {
  const std::size_t n = loop.size();
  if (fraction >= 1.0 || n < 2) return loop;
  const std::size_t peak = static_cast<std::size_t>(
      std::max_element(loop.begin(), loop.end(), [](Vec2 a, Vec2 b) { return a.x < b.x; }) -
      loop.begin());
  std::vector<double> cum(n + 1, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec2 a = loop[(peak + k) % n], b = loop[(peak + k + 1) % n];
    cum[k + 1] = cum[k] + norm(b - a);
  }
  const double total = cum[n];
  const double lo = (start - std::floor(start)) * total;
  const double hi = lo + fraction * total;
  std::vector<Vec2> out;
  for (std::size_t k = 0; k < 2 * n; ++k) {
    const double s = cum[k % n] + (k >= n ? total : 0.0);
    if (s >= lo && s <= hi) out.push_back(loop[(peak + k) % n]);
  }
  return out;
}

}  // namespace

BoundaryDensities boundary_densities(const MLParams& p, const Grid2D& grid,
                                     const BoundaryOptions& o) {
  if (!(o.arc_fraction > 0.0) || o.arc_fraction > 1.0)
    throw Error(ErrorCode::InvalidArgument, "arc fraction must be in (0, 1]");
  const auto eq = find_equilibria(p);
  const auto stable = std::find_if(eq.begin(), eq.end(), [](const Equilibrium& e) { return is_stable(e.kind); });
  if (stable == eq.end()) throw Error(ErrorCode::InvalidArgument, "no stable equilibrium found");
  const Vec2 node = to_scaled(stable->state);

  const auto raw = sample_invariant_cycle(p, o.transient, o.record, o.dt, o.cycle_x0);
  const auto orbit = to_scaled(raw);
  const auto len = static_cast<std::ptrdiff_t>(first_period_length(normalized_orbit(raw)));
  std::vector<Vec2> loop(orbit.begin(), orbit.begin() + len);
  auto arc = cut_arc(loop, o.arc_start, o.arc_fraction);

  const Vec2 node_pt[1] = {node};
  DensityField rho0 = density_from_samples(node_pt, grid, o.node_spread);
  DensityField rho1 = density_from_samples(arc, grid, o.bandwidth);
  return {std::move(rho0), std::move(rho1), node, std::move(loop), std::move(arc)};
}

void write_states_csv(const std::string& path, const std::vector<Vec2>& states,
                      const std::string& header) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << header << '\n';
  for (const auto& s : states) out << format_double(s.x) << ',' << format_double(s.y) << '\n';
}

}  // namespace sbtip
