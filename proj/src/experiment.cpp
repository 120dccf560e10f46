#include "sbtip/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "sbtip/error.hpp"
#include "sbtip/morris_lecar.hpp"
#include "sbtip/rng.hpp"
#include "sbtip/text.hpp"

namespace sbtip {

namespace fs = std::filesystem;

namespace {

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::string slice_name(const char* stem, int n, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_n%04d.%s", stem, n, ext);
  return buf;
}

TippingConfig tipping_config(const IndicatorSettings& s) {
  TippingConfig t;
  t.threshold = s.threshold;
  t.step_offset = s.step_offset;
  t.column = s.column;
  return t;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_ipf_history(const std::string& path, const BridgeSolution& sol) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "iteration,terminal_l1,hilbert\n";
  for (std::size_t k = 0; k < sol.error_history.size(); ++k) {
    out << k + 1 << ',' << format_double(sol.error_history[k]) << ',';
    if (k < sol.hilbert_history.size()) out << format_double(sol.hilbert_history[k]);
    out << '\n';
  }
}

void write_series_csv(const std::string& path, const char* column, const std::vector<double>& times,
                      const std::vector<double>& values) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "t," << column << '\n';
  for (std::size_t n = 0; n < times.size(); ++n)
    out << format_double(times[n]) << ',' << format_double(values[n]) << '\n';
}

void write_snapshots(const std::string& dir, const std::vector<int>& slices,
                     const std::function<DensityField(int)>& marginal) {
  for (int n : slices) {
    const DensityField f = marginal(n);
    write_density_csv(join(dir, slice_name("marginal", n, "csv")), f);
    write_density_pgm(join(dir, slice_name("marginal", n, "pgm")), f);
  }
}

std::vector<double> slice_times(const TimeGrid& tg) {
  std::vector<double> t;
  for (int n = 0; n <= tg.steps(); ++n) t.push_back(tg.time(n));
  return t;
}

void add_detection_metrics(Metrics& m, const std::vector<Detection>& d, const IndicatorSeries& s) {
  m["I_T"] = s.I.back();
  m["detections"] = static_cast<double>(d.size());
  if (!d.empty()) m["top_detection_slice"] = static_cast<double>(d.front().index);
}

InputScaling grid_scaling(const Grid2D& g, double horizon) {
  InputScaling s;
  s.center = {0.5 * (g.xmin() + g.xmax()), 0.5 * (g.ymin() + g.ymax())};
  s.scale = {0.25 * (g.xmax() - g.xmin()), g.is_one_dimensional() ? 1.0 : 0.25 * (g.ymax() - g.ymin())};
  s.horizon = horizon;
  return s;
}

}  // namespace

std::vector<int> snapshot_slices(int steps, int count) {
  std::vector<int> out;
  for (int k = 0; k < count; ++k) {
    const int n = count == 1 ? steps : static_cast<int>(std::lround(static_cast<double>(k) * steps / (count - 1)));
    if (out.empty() || out.back() != n) out.push_back(n);
  }
  return out;
}

BridgeBoundaries build_boundaries(const ExperimentConfig& cfg, const Grid2D& grid) {
  const bool line = grid.is_one_dimensional();
  std::optional<BoundaryDensities> ml;
  if (cfg.source.kind == BoundaryKind::Node || cfg.target.kind == BoundaryKind::Cycle) {
    BoundaryOptions o;
    o.bandwidth = cfg.bandwidth;
    o.node_spread = cfg.node_spread;
    o.arc_fraction = cfg.arc_fraction;
    o.arc_start = cfg.arc_start;
    ml = boundary_densities(cfg.model == ModelKind::MorrisLecarClass2 ? MLParams::class_two() : MLParams::class_one(),
                            grid, o);
  }
  auto side = [&](const BoundarySpec& b, DensityField& rho, StateSampler* sampler, std::vector<Vec2>* atoms) {
    switch (b.kind) {
      case BoundaryKind::Node:
        rho = ml->rho0;
        if (sampler) *sampler = gaussian_sampler(ml->node, cfg.node_spread);
        break;
      case BoundaryKind::Cycle:
        rho = ml->rho1;
        if (atoms) *atoms = ml->arc;
        break;
      case BoundaryKind::Gaussian: {
        const Vec2 sd{b.sd.x, line ? 0.0 : b.sd.y};
        const Vec2 centre[1] = {b.mean};
        rho = density_from_samples(centre, grid, b.sd);
        if (sampler) *sampler = gaussian_sampler(b.mean, sd);
        break;
      }
      case BoundaryKind::Delta: {
        const Vec2 centre[1] = {b.mean};
        rho = density_from_samples(centre, grid, 0.0);
        if (sampler) *sampler = point_sampler(b.mean);
        if (atoms) *atoms = {b.mean};
        break;
      }
      case BoundaryKind::Points: {
        const auto cloud = load_point_cloud(b.path);
        rho = density_from_samples(cloud.points, grid, cfg.bandwidth);
        if (sampler) *sampler = points_sampler(cloud.points);
        if (atoms) *atoms = cloud.points;
        break;
      }
    }
  };
  BridgeBoundaries out{DensityField::zeros(grid), DensityField::zeros(grid), {}, {}, {}};
  side(cfg.source, out.rho0, &out.source_sampler, nullptr);
  side(cfg.target, out.rho1, nullptr, &out.target_points);
  if (ml) out.cycle = ml->cycle;
  return out;
}

void write_cost_csv(const std::string& path, const std::vector<double>& times,
                    const std::vector<double>& controlled_drift, const std::vector<double>& control_only) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "t,cost_controlled_drift,cost_control_only\n";
  for (std::size_t n = 0; n < times.size(); ++n)
    out << format_double(times[n]) << ',' << format_double(controlled_drift[n]) << ','
        << format_double(control_only[n]) << '\n';
}

IndicatorSeries read_cost_csv(const std::string& path, VelocityMode mode) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  if (!next_nonblank_line(in, line, lineno)) throw Error(ErrorCode::EmptyFile, path + " is empty");
  if (trim(line) != "t,cost_controlled_drift,cost_control_only")
    throw ParseError(lineno, path + ": expected header t,cost_controlled_drift,cost_control_only");
  std::vector<double> t, c;
  while (next_nonblank_line(in, line, lineno)) {
    const auto row = split_csv_doubles(line, lineno);
    if (row.size() != 3) throw ParseError(lineno, path + ": expected 3 columns");
    t.push_back(row[0]);
    c.push_back(mode == VelocityMode::ControlledDrift ? row[1] : row[2]);
  }
  if (t.empty()) throw Error(ErrorCode::EmptyFile, path + " has no data rows");
  return series_from_costs(std::move(t), std::move(c));
}

BridgeRun run_ipf_bridge(const ExperimentConfig& cfg, const ChildPlan& child, const std::string& dir) {
  fs::create_directories(dir);
  const Grid2D grid = cfg.grid.make();
  const auto b = build_boundaries(cfg, grid);
  const SdeModel model = build_model(cfg, child.sigma, child.horizon);
  const TimeGrid tg(child.horizon, cfg.steps);
  BridgeRun r{ipf_solve(b.rho0, b.rho1, model, tg, cfg.ipf), {}, {}, {}};
  const auto& sol = r.solution;

  const auto slices = snapshot_slices(tg.steps(), cfg.output.snapshots);
  write_snapshots(dir, slices, [&](int n) { return sol.marginals[static_cast<std::size_t>(n)]; });
  if (cfg.output.controls)
    for (int n : slices)
      write_vector_field_csv(join(dir, slice_name("control", n, "csv")), sol.control[static_cast<std::size_t>(n)]);
  write_ipf_history(join(dir, "ipf_history.csv"), sol);

  const auto cd = action_series(sol, VelocityMode::ControlledDrift);
  const auto co = action_series(sol, VelocityMode::ControlOnly);
  write_cost_csv(join(dir, "cost.csv"), cd.times, cd.cost, co.cost);
  r.indicator = cfg.indicator.mode == VelocityMode::ControlledDrift ? cd : co;
  r.detections = detect_tipping(r.indicator, tipping_config(cfg.indicator));
  write_indicator_csv(join(dir, "indicator.csv"), r.indicator);
  write_detections_csv(join(dir, "detections.csv"), r.detections);

  r.metrics["iterations"] = sol.iterations;
  r.metrics["terminal_l1"] = sol.terminal_error;
  r.metrics["converged"] = sol.converged ? 1.0 : 0.0;
  r.metrics["entropy_mid"] = entropy(sol.marginals[static_cast<std::size_t>(tg.steps() / 2)]);
  add_detection_metrics(r.metrics, r.detections, r.indicator);
  return r;
}

FbsdeRun run_fbsde_bridge(const ExperimentConfig& cfg, const ChildPlan& child, const std::string& dir,
                          const Logger& log) {
  fs::create_directories(dir);
  const Grid2D grid = cfg.grid.make();
  const auto b = build_boundaries(cfg, grid);
  const SdeModel model = build_model(cfg, child.sigma, child.horizon);
  const TimeGrid tg(child.horizon, cfg.steps);

  TrainConfig tc;
  tc.iterations = cfg.fbsde.iterations;
  tc.batch = cfg.fbsde.batch;
  tc.width = cfg.fbsde.width;
  tc.lr = cfg.fbsde.lr;
  tc.stage_length = cfg.fbsde.stage_length;
  tc.scaling = grid_scaling(grid, child.horizon);
  tc.seed = child.seed;

  TerminalSpec terminal;
  if (cfg.fbsde.mode == FbsdeMode::Density) {
    terminal = TerminalSpec::density(grid_log_density(b.rho1));
  } else {
    auto target = DiscreteTarget::normalized(b.target_points, std::vector<double>(b.target_points.size(), 1.0));
    FitOptions fo;
    fo.seed = derive_seed(child.seed, 4);
    const auto fit = fit_heights(b.source_sampler, target, fo);
    write_heights_csv(join(dir, "heights.csv"), target, fit.h);
    terminal = TerminalSpec::cells(std::move(target), fit.h);
  }
  if (log) log(child.name + ": training " + std::to_string(tc.iterations) + " iterations");
  FbsdeRun r{train(model, tg, b.source_sampler, terminal, tc), {}, {}, {}};
  const auto& tr = r.training;
  save_checkpoint(join(dir, "Z.sbpz"), tr.Z);
  save_checkpoint(join(dir, "Zhat.sbpz"), tr.Zhat);
  write_loss_csv(join(dir, "loss.csv"), tr);

  // Evaluation ensemble with its own seeds, separate from the training draws.
  const Batch2 x0 = sample_initial_states(b.source_sampler, tc.batch, derive_seed(child.seed, 5));
  const auto batch = forward_rollout(model, tr.Z, x0, tg, derive_seed(child.seed, 6));
  std::vector<double> cd, co;
  for (int n = 0; n <= tg.steps(); ++n) {
    const double t = tg.time(n);
    const Batch2& X = batch.X[static_cast<std::size_t>(n)];
    const Batch2 Z = n < tg.steps() ? batch.Z[static_cast<std::size_t>(n)] : tr.Z.evaluate(t, X);
    const Vec2 s = model.sigma(t);
    double a = 0.0, c = 0.0;
    for (Eigen::Index m = 0; m < X.cols(); ++m) {
      const Vec2 u = hadamard(s, Vec2{Z(0, m), Z(1, m)});
      a += squared_norm(model.drift(t, Vec2{X(0, m), X(1, m)}) + u);
      c += squared_norm(u);
    }
    cd.push_back(a / static_cast<double>(X.cols()));
    co.push_back(c / static_cast<double>(X.cols()));
  }
  const auto times = slice_times(tg);
  write_cost_csv(join(dir, "cost.csv"), times, cd, co);
  r.indicator = series_from_costs(times, cfg.indicator.mode == VelocityMode::ControlledDrift ? cd : co);
  r.detections = detect_tipping(r.indicator, tipping_config(cfg.indicator));
  write_indicator_csv(join(dir, "indicator.csv"), r.indicator);
  write_detections_csv(join(dir, "detections.csv"), r.detections);

  const auto slices = snapshot_slices(tg.steps(), cfg.output.snapshots);
  write_snapshots(dir, slices, [&](int n) {
    return density_from_samples(to_points(batch.X[static_cast<std::size_t>(n)]), grid, cfg.bandwidth);
  });
  if (cfg.output.controls) {
    Batch2 centres(2, static_cast<Eigen::Index>(grid.cells()));
    for (std::size_t c = 0; c < grid.cells(); ++c) {
      centres(0, static_cast<Eigen::Index>(c)) = grid.center(c).x;
      centres(1, static_cast<Eigen::Index>(c)) = grid.center(c).y;
    }
    for (int n : slices) {
      const double t = tg.time(n);
      const Batch2 Z = tr.Z.evaluate(t, centres);
      const Vec2 s = model.sigma(t);
      std::vector<double> vx(grid.cells()), vy(grid.cells());
      for (std::size_t c = 0; c < grid.cells(); ++c) {
        vx[c] = s.x * Z(0, static_cast<Eigen::Index>(c));
        vy[c] = s.y * Z(1, static_cast<Eigen::Index>(c));
      }
      write_vector_field_csv(join(dir, slice_name("control", n, "csv")), VectorField(grid, vx, vy));
    }
  }

  const std::size_t tail = std::min<std::size_t>(100, tr.loss_history.size());
  double last = 0.0;
  for (std::size_t k = tr.loss_history.size() - tail; k < tr.loss_history.size(); ++k) last += tr.loss_history[k];
  r.metrics["iterations"] = tc.iterations;
  r.metrics["final_loss"] = tail ? last / static_cast<double>(tail) : NAN;
  add_detection_metrics(r.metrics, r.detections, r.indicator);
  return r;
}

TippingResult tipping_pipeline(const PointCloud& source, const PointCloud& target, const SdeModel& model,
                               const TimeGrid& tg, const Grid2D& grid, const TippingOptions& o) {
  source.validate();
  target.validate();
  if (source.points.empty() || target.points.empty())
    throw Error(ErrorCode::EmptyInput, "tipping pipeline needs source and target points");
  const std::vector<int> labels = target.labeled() ? target.labels : std::vector<int>(target.size(), 0);

  TippingResult r;
  r.pairing = pair_regions(source.points, target.points, labels, o.fit);
  const std::size_t slices = static_cast<std::size_t>(tg.steps()) + 1;
  std::vector<std::vector<double>> mix(slices, std::vector<double>(grid.cells(), 0.0));
  std::vector<double> cd(slices, 0.0), co(slices, 0.0);

  for (int label : r.pairing.regions) {
    std::vector<Vec2> src, tgt;
    for (std::size_t i = 0; i < source.size(); ++i)
      if (r.pairing.source_region[i] == label) src.push_back(source.points[i]);
    for (std::size_t i = 0; i < target.size(); ++i)
      if (labels[i] == label) tgt.push_back(target.points[i]);
    const double mass = static_cast<double>(src.size()) / static_cast<double>(source.size());
    r.region_mass.push_back(mass);
    if (src.empty()) continue;  // the region received no source mass

    const auto rho0 = density_from_samples(src, grid, o.bandwidth);
    const auto rho1 = density_from_samples(tgt, grid, o.bandwidth);
    r.regions.push_back(ipf_solve(rho0, rho1, model, tg, o.ipf));
    const auto& sol = r.regions.back();
    const auto a = action_series(sol, VelocityMode::ControlledDrift);
    const auto b = action_series(sol, VelocityMode::ControlOnly);
    for (std::size_t n = 0; n < slices; ++n) {
      cd[n] += mass * a.cost[n];
      co[n] += mass * b.cost[n];
      const auto m = sol.marginals[n].mass();
      for (std::size_t c = 0; c < grid.cells(); ++c) mix[n][c] += mass * m[c];
    }
  }

  for (auto& m : mix) r.mixture.push_back(normalize(DensityField(grid, std::move(m))));
  r.cost_controlled_drift = cd;
  r.cost_control_only = co;
  r.indicator = series_from_costs(slice_times(tg), o.indicator.mode == VelocityMode::ControlledDrift ? cd : co);
  r.detections = detect_tipping(r.indicator, tipping_config(o.indicator));
  for (const auto& m : r.mixture) r.bimodality.push_back(bimodality_coefficient(m));
  r.max_bimodality_slice = static_cast<std::size_t>(
      std::max_element(r.bimodality.begin(), r.bimodality.end()) - r.bimodality.begin());
  return r;
}

TippingResult run_tipping(const ExperimentConfig& cfg, const ChildPlan& child, const std::string& dir) {
  fs::create_directories(dir);
  PointCloud source, target;
  if (cfg.tipping.synthetic) {
    auto c = synthetic_cohort(child.seed, cfg.tipping.cohort);
    source = std::move(c.source);
    target = std::move(c.target);
  } else {
    source = load_point_cloud(cfg.tipping.source_path);
    target = load_point_cloud(cfg.tipping.target_path);
  }
  const Grid2D grid = cfg.grid.make();
  const SdeModel model = build_model(cfg, child.sigma, child.horizon);
  const TimeGrid tg(child.horizon, cfg.steps);
  TippingOptions o;
  o.bandwidth = cfg.bandwidth;
  o.ipf = cfg.ipf;
  o.fit.samples = cfg.tipping.pairing_samples;
  o.fit.seed = derive_seed(child.seed, 1);
  o.indicator = cfg.indicator;
  auto r = tipping_pipeline(source, target, model, tg, grid, o);

  PointCloud assigned = source;
  assigned.labels = r.pairing.source_region;
  write_point_cloud_csv(join(dir, "source.csv"), assigned);
  write_point_cloud_csv(join(dir, "target.csv"), target);
  write_heights_csv(join(dir, "heights.csv"), r.pairing.target, r.pairing.fit.h);
  write_energy_csv(join(dir, "energy.csv"), r.pairing.fit);
  std::size_t k = 0;
  for (std::size_t i = 0; i < r.pairing.regions.size(); ++i)
    if (r.region_mass[i] > 0.0)
      write_ipf_history(join(dir, "region_" + std::to_string(r.pairing.regions[i]) + "_ipf_history.csv"),
                        r.regions[k++]);
  const auto slices = snapshot_slices(tg.steps(), cfg.output.snapshots);
  write_snapshots(dir, slices, [&](int n) { return r.mixture[static_cast<std::size_t>(n)]; });
  const auto times = slice_times(tg);
  write_cost_csv(join(dir, "cost.csv"), times, r.cost_controlled_drift, r.cost_control_only);
  write_indicator_csv(join(dir, "indicator.csv"), r.indicator);
  write_detections_csv(join(dir, "detections.csv"), r.detections);
  write_series_csv(join(dir, "bimodality.csv"), "bimodality", times, r.bimodality);
  return r;
}

RunSummary run_experiment(const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  RunSummary run;
  run.dir = join(cfg.output_dir, cfg.name);
  fs::create_directories(run.dir);
  {
    std::ofstream out(join(run.dir, "config.ini"));
    if (!out) throw Error(ErrorCode::IoError, "cannot write into " + run.dir);
    out << cfg.to_ini();
  }
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  for (const auto& [k, v] : cfg.echo()) config[k] = v;

  const auto plan = plan_children(cfg);
  nlohmann::ordered_json children = nlohmann::ordered_json::array();
  for (const auto& child : plan) {
    ChildSummary cs;
    cs.plan = child;
    cs.dir = join(run.dir, child.name);
    fs::create_directories(cs.dir);
    fs::remove(join(cs.dir, "FAILED"));
    if (log) log(child.name + ": sigma " + format_double(child.sigma) + ", T " + format_double(child.horizon));
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if (cfg.pipeline == PipelineKind::Tipping) {
        const auto r = run_tipping(cfg, child, cs.dir);
        cs.metrics["max_bimodality_slice"] = static_cast<double>(r.max_bimodality_slice);
        cs.metrics["regions"] = static_cast<double>(r.pairing.regions.size());
        add_detection_metrics(cs.metrics, r.detections, r.indicator);
      } else if (cfg.solver == SolverKind::Ipf) {
        cs.metrics = run_ipf_bridge(cfg, child, cs.dir).metrics;
      } else {
        cs.metrics = run_fbsde_bridge(cfg, child, cs.dir, log).metrics;
      }
    } catch (const std::exception& e) {
      cs.failed = true;
      cs.error = e.what();
      std::ofstream(join(cs.dir, "FAILED")) << cs.error << '\n';
      ++run.failed;
      if (log) log(child.name + ": FAILED: " + cs.error);
    }
    cs.wall_seconds = seconds_since(t0);

    nlohmann::ordered_json j;
    j["name"] = child.name;
    j["index"] = child.index;
    j["sigma"] = child.sigma;
    j["T"] = child.horizon;
    j["seed"] = child.seed;
    j["status"] = cs.failed ? "failed" : "ok";
    if (cs.failed) j["error"] = cs.error;
    j["metrics"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : cs.metrics) j["metrics"][k] = v;
    j["wall_seconds"] = cs.wall_seconds;
    children.push_back(j);

    nlohmann::ordered_json own = j;
    own["version"] = kVersion;
    own["master_seed"] = *cfg.seed;
    own["config"] = config;
    std::ofstream(join(cs.dir, "summary.json")) << own.dump(2) << '\n';
    run.children.push_back(std::move(cs));
  }
  run.wall_seconds = seconds_since(start);

  nlohmann::ordered_json s;
  s["experiment"] = cfg.name;
  s["version"] = kVersion;
  s["seed"] = *cfg.seed;
  s["seed_rule"] = "child i uses derive_seed(seed, i)";
  s["config"] = config;
  s["children"] = children;
  s["failed"] = run.failed;
  s["wall_seconds"] = run.wall_seconds;
  std::ofstream(join(run.dir, "summary.json")) << s.dump(2) << '\n';
  return run;
}

}  // namespace sbtip
