#include "sbtip/indicator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <boost/graph/adjacency_list.hpp>
#include <boost/graph/successive_shortest_path_nonnegative_weights.hpp>
#include <boost/graph/find_flow_cost.hpp>

#include "sbtip/error.hpp"
#include "sbtip/text.hpp"

namespace sbtip {

std::string to_string(VelocityMode mode) {
  return mode == VelocityMode::ControlledDrift ? "controlled_drift" : "control_only";
}

VelocityMode parse_velocity_mode(const std::string& name) {
  if (name == "controlled_drift") return VelocityMode::ControlledDrift;
  if (name == "control_only") return VelocityMode::ControlOnly;
  throw Error(ErrorCode::InvalidArgument, "unknown velocity mode '" + name + "'");
}

VectorField indicator_velocity(const BridgeSolution& sol, int n, VelocityMode mode) {
  if (mode == VelocityMode::ControlledDrift) return controlled_drift(sol, n);
  if (n < 0 || n >= static_cast<int>(sol.control.size()))
    throw Error(ErrorCode::InvalidArgument, "time slice out of range");
  return sol.control[n];
}

namespace {

void require_converged(const BridgeSolution& sol) {
  if (!sol.converged)
    throw Error(ErrorCode::NotConverged, "indicator needs a converged bridge solution");
}

// Trapezoid weights for int_0^{t_N} over the slice times.
std::vector<double> trapezoid_weights(const std::vector<double>& t) {
  std::vector<double> w(t.size(), 0.0);
  for (std::size_t n = 0; n + 1 < t.size(); ++n) {
    const double h = 0.5 * (t[n + 1] - t[n]);
    w[n] += h;
    w[n + 1] += h;
  }
  return w;
}

}  // namespace

IndicatorSeries series_from_costs(std::vector<double> times, std::vector<double> cost) {
  if (times.size() != cost.size() || times.empty())
    throw Error(ErrorCode::InvalidArgument, "times and costs must be nonempty and equally long");
  IndicatorSeries s{std::move(times), std::move(cost), {}};
  s.I.resize(s.cost.size());
  s.I[0] = s.cost[0];
  double acc = 0.0;
  for (std::size_t n = 1; n < s.cost.size(); ++n) {
    acc += 0.5 * (s.times[n] - s.times[n - 1]) * (s.cost[n] + s.cost[n - 1]);
    const double span = s.times[n] - s.times[0];
    s.I[n] = span > 0.0 ? acc / span : s.cost[n];
  }
  return s;
}

IndicatorSeries action_series(const BridgeSolution& sol, VelocityMode mode) {
  require_converged(sol);
  const TimeGrid& tg = sol.time_grid();
  const int N = tg.steps();
  std::vector<double> times(static_cast<std::size_t>(N) + 1), cost(times.size());
  for (int n = 0; n <= N; ++n) {
    times[n] = tg.time(n);
    const VectorField v = indicator_velocity(sol, n, mode);
    const DensityField& rho = sol.marginals[n];
    double c = 0.0;
    for (std::size_t k = 0; k < rho.mass().size(); ++k) {
      if (rho[k] == 0.0) continue;
      c += (v.vx()[k] * v.vx()[k] + v.vy()[k] * v.vy()[k]) * rho[k];
    }
    cost[n] = c;
  }
  return series_from_costs(std::move(times), std::move(cost));
}

MonteCarloEstimate action_monte_carlo(const BridgeSolution& sol, VelocityMode mode, std::size_t M,
                                      std::uint64_t seed, int substeps) {
  require_converged(sol);
  const TimeGrid& tg = sol.time_grid();
  const int N = tg.steps();
  std::vector<double> times(static_cast<std::size_t>(N) + 1);
  for (int n = 0; n <= N; ++n) times[n] = tg.time(n);
  const auto w = trapezoid_weights(times);
  std::vector<VectorField> v;
  for (int n = 0; n <= N; ++n) v.push_back(indicator_velocity(sol, n, mode));
  const PathEnsemble ens = simulate_bridge(sol, M, seed, false, substeps);
  // Welford accumulation of the per-trajectory action.
  double mean = 0.0, m2 = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    double a = 0.0;
    for (int n = 0; n <= N; ++n) a += w[n] * squared_norm(v[n].interpolate(ens.state(m, n)));
    a /= tg.horizon();
    const double d = a - mean;
    mean += d / static_cast<double>(m + 1);
    m2 += d * (a - mean);
  }
  const double var = M > 1 ? m2 / static_cast<double>(M - 1) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(M)), M};
}

double default_threshold(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  std::vector<double> d(values.size() - 1);
  for (std::size_t i = 0; i + 1 < values.size(); ++i) d[i] = std::abs(values[i + 1] - values[i]);
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
  return 5.0 * med;
}

std::vector<Detection> detect_tipping(const std::vector<double>& times,
                                      const std::vector<double>& values, int step_offset,
                                      double threshold) {
  if (values.size() < 2 || times.size() != values.size())
    throw Error(ErrorCode::InvalidArgument, "tipping detection needs at least two points");
  if (step_offset < 1) throw Error(ErrorCode::InvalidArgument, "step offset must be >= 1");
  if (!(threshold >= 0.0)) throw Error(ErrorCode::InvalidArgument, "threshold must be >= 0");
  std::vector<Detection> out;
  const auto k = static_cast<std::size_t>(step_offset);
  for (std::size_t i = 0; i + k < values.size(); ++i) {
    const double jump = std::abs(values[i + k] - values[i]);
    if (jump >= threshold && jump > 0.0) out.push_back({i, times[i], jump});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.jump > b.jump; });
  return out;
}

std::vector<Detection> detect_tipping(const IndicatorSeries& series, const TippingConfig& cfg) {
  const auto& values = cfg.column == IndicatorColumn::Running ? series.I : series.cost;
  if (cfg.threshold && !(*cfg.threshold > 0.0))
    throw Error(ErrorCode::InvalidArgument, "tipping threshold C must be > 0");
  const double c = cfg.threshold ? *cfg.threshold : default_threshold(values);
  return detect_tipping(series.times, values, cfg.step_offset, c);
}

namespace {

using Traits = boost::adjacency_list_traits<boost::vecS, boost::vecS, boost::directedS>;
using FlowGraph = boost::adjacency_list<
    boost::vecS, boost::vecS, boost::directedS, boost::no_property,
    boost::property<boost::edge_capacity_t, long long,
                    boost::property<boost::edge_residual_capacity_t, long long,
                                    boost::property<boost::edge_reverse_t, Traits::edge_descriptor,
                                                    boost::property<boost::edge_weight_t, long long>>>>>;

struct Support {
  std::vector<std::size_t> cells;
  std::vector<long long> units;
};

// Integer masses summing to exactly kMassUnits; rounding residue goes to the
// heaviest cell.
constexpr long long kMassUnits = 1'000'000'000'000LL;
constexpr double kCostUnits = 1e6;

Support quantized_support(const DensityField& rho, std::size_t budget) {
  Support s;
  double kept = 0.0;
  for (std::size_t c = 0; c < rho.mass().size(); ++c)
    if (rho[c] > kW2SupportThreshold) {
      s.cells.push_back(c);
      kept += rho[c];
    }
  if (s.cells.size() > budget)
    throw Error(ErrorCode::TooLarge, "support of " + std::to_string(s.cells.size()) +
                                         " cells exceeds the exact transport budget of " +
                                         std::to_string(budget));
  if (s.cells.empty()) throw Error(ErrorCode::ZeroMass, "no cell above the support threshold");
  long long total = 0;
  std::size_t heaviest = 0;
  for (std::size_t i = 0; i < s.cells.size(); ++i) {
    const long long u = std::llround(rho[s.cells[i]] / kept * static_cast<double>(kMassUnits));
    s.units.push_back(u);
    total += u;
    if (u > s.units[heaviest]) heaviest = i;
  }
  s.units[heaviest] += kMassUnits - total;
  return s;
}

}  // namespace

double w2_reference(const DensityField& rho0, const DensityField& rho1, std::size_t budget) {
  if (!(rho0.grid() == rho1.grid()))
    throw Error(ErrorCode::GridMismatch, "densities live on different grids");
  const Grid2D& g = rho0.grid();
  const Support a = quantized_support(rho0, budget), b = quantized_support(rho1, budget);
  double max_cost = 0.0;
  for (std::size_t i : a.cells)
    for (std::size_t j : b.cells) max_cost = std::max(max_cost, squared_norm(g.center(i) - g.center(j)));
  if (max_cost == 0.0) return 0.0;
  // Costs are quantized so that the largest is kCostUnits; total flow cost
  // then stays below 2^63.
  const double scale = kCostUnits / max_cost;

  const std::size_t na = a.cells.size(), nb = b.cells.size();
  FlowGraph graph(na + nb + 2);
  const std::size_t src = na + nb, snk = na + nb + 1;
  auto cap = boost::get(boost::edge_capacity, graph);
  auto rev = boost::get(boost::edge_reverse, graph);
  auto wt = boost::get(boost::edge_weight, graph);
  auto add = [&](std::size_t u, std::size_t v, long long c, long long w) {
    const auto e = boost::add_edge(u, v, graph).first;
    const auto r = boost::add_edge(v, u, graph).first;
    cap[e] = c;
    cap[r] = 0;
    wt[e] = w;
    wt[r] = -w;
    rev[e] = r;
    rev[r] = e;
  };
  for (std::size_t i = 0; i < na; ++i) add(src, i, a.units[i], 0);
  for (std::size_t j = 0; j < nb; ++j) add(na + j, snk, b.units[j], 0);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      const double c = squared_norm(g.center(a.cells[i]) - g.center(b.cells[j]));
      add(i, na + j, kMassUnits, std::llround(c * scale));
    }
  boost::successive_shortest_path_nonnegative_weights(graph, src, snk);

  // Re-evaluate the optimal plan with unrounded costs.
  auto res = boost::get(boost::edge_residual_capacity, graph);
  double w2 = 0.0;
  for (std::size_t i = 0; i < na; ++i) {
    for (auto [e, end] = boost::out_edges(i, graph); e != end; ++e) {
      const std::size_t j = boost::target(*e, graph);
      if (j < na || j >= na + nb || cap[*e] == 0) continue;
      const long long flow = cap[*e] - res[*e];
      if (flow <= 0) continue;
      w2 += static_cast<double>(flow) / static_cast<double>(kMassUnits) *
            squared_norm(g.center(a.cells[i]) - g.center(b.cells[j - na]));
    }
  }
  return w2;
}

double bimodality_coefficient(const DensityField& rho) {
  const DensityField p = normalize(rho);
  const Grid2D& g = p.grid();
  Vec2 mean{0, 0};
  for (std::size_t c = 0; c < g.cells(); ++c) mean += p[c] * g.center(c);
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t c = 0; c < g.cells(); ++c) {
    const Vec2 d = g.center(c) - mean;
    sxx += p[c] * d.x * d.x;
    sxy += p[c] * d.x * d.y;
    syy += p[c] * d.y * d.y;
  }
  // Leading eigenvector of the 2x2 covariance.
  const double half = 0.5 * (sxx - syy);
  const double lam = 0.5 * (sxx + syy) + std::sqrt(half * half + sxy * sxy);
  Vec2 axis = std::abs(sxy) > 0.0 ? Vec2{lam - syy, sxy} : (sxx >= syy ? Vec2{1, 0} : Vec2{0, 1});
  axis = (1.0 / norm(axis)) * axis;
  double m2 = 0, m3 = 0, m4 = 0;
  for (std::size_t c = 0; c < g.cells(); ++c) {
    const double z = dot(g.center(c) - mean, axis);
    const double z2 = z * z;
    m2 += p[c] * z2;
    m3 += p[c] * z2 * z;
    m4 += p[c] * z2 * z2;
  }
  if (!(m2 > 0.0)) throw Error(ErrorCode::InvalidArgument, "bimodality of a point mass is undefined");
  const double skew = m3 / std::pow(m2, 1.5);
  const double kurt = m4 / (m2 * m2);
  return (skew * skew + 1.0) / kurt;
}

void write_indicator_csv(const std::string& path, const IndicatorSeries& s) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "t,I,cost\n";
  for (std::size_t n = 0; n < s.times.size(); ++n)
    out << format_double(s.times[n]) << ',' << format_double(s.I[n]) << ','
        << format_double(s.cost[n]) << '\n';
}

void write_detections_csv(const std::string& path, const std::vector<Detection>& detections) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "index,t,jump\n";
  for (const auto& d : detections)
    out << d.index << ',' << format_double(d.t) << ',' << format_double(d.jump) << '\n';
}

}  // namespace sbtip
