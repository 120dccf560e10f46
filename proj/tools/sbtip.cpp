// Command line front end: one subcommand per pipeline stage plus the
// config-driven `run`.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "sbtip/config.hpp"
#include "sbtip/error.hpp"
#include "sbtip/experiment.hpp"
#include "sbtip/io.hpp"
#include "sbtip/morris_lecar.hpp"
#include "sbtip/sdot.hpp"
#include "sbtip/text.hpp"

using namespace sbtip;
namespace fs = std::filesystem;

namespace {

struct Source {
  std::string config;
  std::string preset;
};

ExperimentConfig resolve_config(const Source& s, const std::string& fallback_preset) {
  if (!s.config.empty()) return load_config(s.config);
  return load_preset(s.preset.empty() ? fallback_preset : s.preset);
}

void add_source(CLI::App* app, Source& s) {
  auto* c = app->add_option("--config", s.config, "INI configuration file")->check(CLI::ExistingFile);
  app->add_option("--preset", s.preset, "named preset (see `run --list-presets`)")->excludes(c);
}

void print_metrics(const Metrics& m) {
  for (const auto& [k, v] : m) std::printf("  %-22s %s\n", k.c_str(), format_double(v).c_str());
}

void save_config(const std::string& dir, const ExperimentConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream((fs::path(dir) / "config.ini").string()) << cfg.to_ini();
}

// Single bridge from a configuration: the first child of its plan, with
// command-line overrides applied and sweeps dropped.
ChildPlan single_child(ExperimentConfig& cfg, std::optional<double> sigma, std::optional<double> T,
                       std::optional<int> N, std::optional<std::uint64_t> seed) {
  if (sigma) cfg.sigma = *sigma;
  if (T) cfg.horizon = *T;
  if (N) cfg.steps = *N;
  if (seed) cfg.seed = *seed;
  cfg.sigma_sweep.reset();
  cfg.horizon_sweep.reset();
  cfg.validate();
  return plan_children(cfg).front();
}

int ml_info(int cls, const std::string& out_dir) {
  const MLParams p = cls == 1 ? MLParams::class_one() : MLParams::class_two();
  std::printf("Morris-Lecar class %s (I = %s)\n", cls == 1 ? "I" : "II", format_double(p.I).c_str());
  const auto eq = find_equilibria(p);
  std::printf("equilibria:\n");
  for (const auto& e : eq)
    std::printf("  v = %10.5f mV  w = %.6f  lambda = %.5g%+.5gi, %.5g%+.5gi  %s\n", e.state.x, e.state.y,
                e.eigenvalues[0].real(), e.eigenvalues[0].imag(), e.eigenvalues[1].real(), e.eigenvalues[1].imag(),
                to_string(e.kind).c_str());
  const auto orbit = sample_invariant_cycle(p, 500.0, 400.0, 0.01, {0.0, 0.3});
  const auto g = analyze_cycle(orbit);
  std::printf("orbit after transient: %s\n", g.closed ? "closed (limit cycle)" : "not closed");
  std::printf("  v in [%.3f, %.3f] mV, w in [%.4f, %.4f]\n", g.v_min, g.v_max, g.w_min, g.w_max);
  std::printf("  closure gap %.4g, max step gap %.4g (normalized diameter %.4g)\n", g.closure_gap, g.max_step_gap,
              g.diameter);
  for (const auto& e : eq)
    if (g.closed)
      std::printf("  equilibrium at v = %.3f: distance to orbit %.4g, winding %d\n", e.state.x,
                  distance_to_orbit(orbit, e.state), winding_number(orbit, e.state));
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const std::vector<Vec2> period(orbit.begin(), orbit.begin() + static_cast<std::ptrdiff_t>(g.period_points));
    write_states_csv((fs::path(out_dir) / "cycle.csv").string(), period);
    std::ofstream out((fs::path(out_dir) / "equilibria.csv").string());
    out << "v,w,kind,re1,im1,re2,im2\n";
    for (const auto& e : eq)
      out << format_double(e.state.x) << ',' << format_double(e.state.y) << ',' << to_string(e.kind) << ','
          << format_double(e.eigenvalues[0].real()) << ',' << format_double(e.eigenvalues[0].imag()) << ','
          << format_double(e.eigenvalues[1].real()) << ',' << format_double(e.eigenvalues[1].imag()) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Schrodinger bridges, semi-discrete transport and tipping indicators"};
  app.require_subcommand(1);

  // ml-info
  int ml_class = 1;
  std::string ml_out;
  auto* ml = app.add_subcommand("ml-info", "Morris-Lecar equilibria, their types and the limit cycle");
  ml->add_option("--class", ml_class, "parameter class (1 or 2)")->check(CLI::IsMember({1, 2}));
  ml->add_option("--out-dir", ml_out, "write cycle.csv and equilibria.csv here");

  // bridge-ipf
  Source ipf_src;
  std::optional<double> ipf_sigma, ipf_T;
  std::optional<int> ipf_N;
  std::optional<std::uint64_t> ipf_seed;
  std::string ipf_out = "bridge_ipf";
  auto* ipf = app.add_subcommand("bridge-ipf", "Solve one bridge with iterative proportional fitting");
  add_source(ipf, ipf_src);
  ipf->add_option("--sigma", ipf_sigma, "noise level g");
  ipf->add_option("--T", ipf_T, "horizon");
  ipf->add_option("--N", ipf_N, "time steps");
  ipf->add_option("--seed", ipf_seed);
  ipf->add_option("--out-dir", ipf_out, "output directory");

  // bridge-fbsde
  Source fb_src;
  std::string fb_mode = "density";
  std::optional<int> fb_width, fb_iters, fb_N;
  std::optional<std::size_t> fb_batch;
  std::optional<double> fb_lr, fb_sigma, fb_T;
  std::optional<std::uint64_t> fb_seed;
  std::string fb_out = "bridge_fbsde";
  auto* fb = app.add_subcommand("bridge-fbsde", "Train forward and backward policies for one bridge");
  add_source(fb, fb_src);
  fb->add_option("--mode", fb_mode, "terminal condition")->check(CLI::IsMember({"density", "sdot"}));
  fb->add_option("--hidden-width", fb_width);
  fb->add_option("--iters", fb_iters, "training iterations K");
  fb->add_option("--batch", fb_batch, "trajectories per iteration M");
  fb->add_option("--lr", fb_lr, "initial learning rate");
  fb->add_option("--sigma", fb_sigma);
  fb->add_option("--T", fb_T);
  fb->add_option("--N", fb_N);
  fb->add_option("--seed", fb_seed);
  fb->add_option("--out-dir", fb_out);

  // sdot
  std::string sd_source, sd_target, sd_out = "sdot", sd_measure = "empirical";
  std::size_t sd_samples = 100000;
  std::uint64_t sd_seed = 0;
  auto* sd = app.add_subcommand("sdot", "Fit semi-discrete transport heights between two clouds");
  sd->add_option("--source", sd_source, "CSV x,y")->required()->check(CLI::ExistingFile);
  sd->add_option("--target", sd_target, "CSV x,y[,label]; labels pair whole regions")->required()->check(CLI::ExistingFile);
  sd->add_option("--samples", sd_samples, "Monte Carlo samples per step");
  sd->add_option("--measure", sd_measure, "source measure")->check(CLI::IsMember({"empirical", "box"}));
  sd->add_option("--seed", sd_seed);
  sd->add_option("--out-dir", sd_out);

  // indicator
  std::string in_dir, in_out, in_mode = "controlled_drift", in_column = "running";
  std::optional<double> in_C;
  int in_drho = 1;
  auto* ind = app.add_subcommand("indicator", "Indicator series and tipping detections of a solved bridge");
  ind->add_option("--solution-dir", in_dir, "output of bridge-ipf or bridge-fbsde")->required()->check(CLI::ExistingDirectory);
  ind->add_option("--mode", in_mode)->check(CLI::IsMember({"controlled_drift", "control_only"}));
  ind->add_option("--C", in_C, "jump threshold (default 5x median absolute successive difference)");
  ind->add_option("--drho", in_drho, "step offset in slices")->check(CLI::PositiveNumber);
  ind->add_option("--column", in_column)->check(CLI::IsMember({"running", "per_slice"}));
  ind->add_option("--out-dir", in_out, "defaults to the solution directory");

  // run
  Source run_src;
  std::string run_out, run_print;
  bool run_list = false, run_schema = false;
  auto* run = app.add_subcommand("run", "Run a configured experiment with all its sweep children");
  add_source(run, run_src);
  run->add_option("--out-dir", run_out, "override experiment.output_dir");
  run->add_flag("--list-presets", run_list);
  run->add_option("--print-preset", run_print, "print a preset's INI text");
  run->add_flag("--schema", run_schema, "print every configuration key");

  // make-cohort
  std::string co_out = "cohort";
  std::uint64_t co_seed = 0;
  auto* co = app.add_subcommand("make-cohort", "Write the synthetic source and crescent target clouds");
  co->add_option("--seed", co_seed);
  co->add_option("--out-dir", co_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ml) return ml_info(ml_class, ml_out);

    if (*ipf) {
      auto cfg = resolve_config(ipf_src, "gaussian_pair");
      cfg.solver = SolverKind::Ipf;
      const auto child = single_child(cfg, ipf_sigma, ipf_T, ipf_N, ipf_seed);
      save_config(ipf_out, cfg);
      const auto r = run_ipf_bridge(cfg, child, ipf_out);
      std::printf("bridge-ipf: %s\n", ipf_out.c_str());
      print_metrics(r.metrics);
      return 0;
    }

    if (*fb) {
      auto cfg = resolve_config(fb_src, "gaussian_pair");
      cfg.solver = SolverKind::Fbsde;
      cfg.fbsde.mode = fb_mode == "sdot" ? FbsdeMode::SemiDiscrete : FbsdeMode::Density;
      if (fb_width) cfg.fbsde.width = *fb_width;
      if (fb_iters) cfg.fbsde.iterations = *fb_iters;
      if (fb_batch) cfg.fbsde.batch = *fb_batch;
      if (fb_lr) cfg.fbsde.lr = *fb_lr;
      const auto child = single_child(cfg, fb_sigma, fb_T, fb_N, fb_seed);
      save_config(fb_out, cfg);
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = run_fbsde_bridge(cfg, child, fb_out, [](const std::string& m) { std::printf("%s\n", m.c_str()); });
      std::printf("bridge-fbsde: %s (%.1f s)\n", fb_out.c_str(),
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      print_metrics(r.metrics);
      return 0;
    }

    if (*sd) {
      const auto src = load_point_cloud(sd_source);
      const auto tgt = load_point_cloud(sd_target);
      std::printf("source: %s\ntarget: %s\n", format_summary(describe(src)).c_str(),
                  format_summary(describe(tgt)).c_str());
      FitOptions o;
      o.samples = sd_samples;
      o.seed = sd_seed;
      const auto measure = sd_measure == "box" ? SourceMeasure::UniformBox : SourceMeasure::Empirical;
      fs::create_directories(sd_out);
      DiscreteTarget target;
      FitResult fit;
      std::vector<int> labels(src.size());
      if (tgt.labeled()) {
        const auto p = pair_regions(src.points, tgt.points, tgt.labels, o, measure);
        target = p.target;
        fit = p.fit;
        labels = p.source_region;
      } else {
        target = DiscreteTarget::normalized(tgt.points, std::vector<double>(tgt.size(), 1.0));
        fit = fit_heights(source_sampler(src.points, measure), target, o);
        for (std::size_t i = 0; i < src.size(); ++i) labels[i] = static_cast<int>(assign_cell(src.points[i], target, fit.h));
      }
      write_heights_csv((fs::path(sd_out) / "heights.csv").string(), target, fit.h);
      write_energy_csv((fs::path(sd_out) / "energy.csv").string(), fit);
      PointCloud assigned{src.points, labels};
      write_point_cloud_csv((fs::path(sd_out) / "assignment.csv").string(), assigned);
      std::printf("%d steps%s\n  target   weight   fitted   height\n", fit.steps, fit.stalled ? " (stalled)" : "");
      for (std::size_t i = 0; i < target.size(); ++i)
        std::printf("  %6zu  %7.4f  %7.4f  %+8.5f\n", i, target.weights[i], fit.weights[i], fit.h[i]);
      return 0;
    }

    if (*ind) {
      const auto mode = parse_velocity_mode(in_mode);
      const auto series = read_cost_csv((fs::path(in_dir) / "cost.csv").string(), mode);
      TippingConfig tc;
      tc.threshold = in_C;
      tc.step_offset = in_drho;
      tc.column = in_column == "running" ? IndicatorColumn::Running : IndicatorColumn::PerSlice;
      const auto d = detect_tipping(series, tc);
      const std::string out = in_out.empty() ? in_dir : in_out;
      fs::create_directories(out);
      write_indicator_csv((fs::path(out) / "indicator.csv").string(), series);
      write_detections_csv((fs::path(out) / "detections.csv").string(), d);
      std::printf("I(T) = %s over %zu slices, %zu detections\n", format_double(series.I.back()).c_str(),
                  series.I.size(), d.size());
      for (std::size_t k = 0; k < std::min<std::size_t>(5, d.size()); ++k)
        std::printf("  slice %zu  t = %s  jump %s\n", d[k].index, format_double(d[k].t).c_str(),
                    format_double(d[k].jump).c_str());
      return 0;
    }

    if (*run) {
      if (run_list) {
        for (const auto& n : preset_names()) std::printf("%s\n", n.c_str());
        return 0;
      }
      if (!run_print.empty()) {
        std::printf("%s", preset_text(run_print).c_str());
        return 0;
      }
      if (run_schema) {
        for (const auto& e : config_schema()) std::printf("%-26s %s\n", e.key.c_str(), e.help.c_str());
        return 0;
      }
      if (run_src.config.empty() && run_src.preset.empty()) {
        std::fprintf(stderr, "run: --config or --preset is required\n");
        return 2;
      }
      auto cfg = resolve_config(run_src, "");
      if (!run_out.empty()) cfg.output_dir = run_out;
      const auto s = run_experiment(cfg, [](const std::string& m) { std::printf("%s\n", m.c_str()); });
      std::printf("%s: %zu children, %zu failed, %.1f s\n", s.dir.c_str(), s.children.size(), s.failed,
                  s.wall_seconds);
      for (const auto& c : s.children) {
        std::printf("%s (sigma %s, T %s)%s\n", c.plan.name.c_str(), format_double(c.plan.sigma).c_str(),
                    format_double(c.plan.horizon).c_str(), c.failed ? " FAILED" : "");
        if (c.failed)
          std::printf("  %s\n", c.error.c_str());
        else
          print_metrics(c.metrics);
      }
      return s.failed == 0 ? 0 : 1;
    }

    if (*co) {
      const auto c = synthetic_cohort(co_seed);
      fs::create_directories(co_out);
      write_point_cloud_csv((fs::path(co_out) / "source.csv").string(), c.source);
      write_point_cloud_csv((fs::path(co_out) / "target.csv").string(), c.target);
      std::printf("source: %s\ntarget: %s\n", format_summary(describe(c.source)).c_str(),
                  format_summary(describe(c.target)).c_str());
      return 0;
    }
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: invalid configuration\n");
    for (const auto& v : e.violations()) std::fprintf(stderr, "  - %s\n", v.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
