#include "sbtip/config.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "sbtip/error.hpp"
#include "sbtip/morris_lecar.hpp"
#include "sbtip/rng.hpp"
#include "sbtip/text.hpp"

namespace sbtip {

namespace fs = std::filesystem;

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::MorrisLecarClass1: return "morris_lecar_class1";
    case ModelKind::MorrisLecarClass2: return "morris_lecar_class2";
    case ModelKind::Brownian: return "brownian";
    case ModelKind::CustomDrift: return "custom";
  }
  return "unknown";
}

std::string to_string(SolverKind k) { return k == SolverKind::Ipf ? "ipf" : "fbsde"; }
std::string to_string(PipelineKind k) { return k == PipelineKind::Bridge ? "bridge" : "tipping"; }
std::string to_string(FbsdeMode k) { return k == FbsdeMode::Density ? "density" : "sdot"; }

std::string to_string(BoundaryKind k) {
  switch (k) {
    case BoundaryKind::Node: return "node";
    case BoundaryKind::Cycle: return "cycle";
    case BoundaryKind::Gaussian: return "gaussian";
    case BoundaryKind::Delta: return "delta";
    case BoundaryKind::Points: return "points";
  }
  return "unknown";
}

namespace {

std::string noise_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::Constant: return "constant";
    case NoiseKind::Linear: return "linear";
    case NoiseKind::Cosine: return "cosine";
  }
  return "unknown";
}

// Raised by value parsers; turned into a ParseError naming key and line.
struct BadValue {
  std::string what;
};

template <class E>
E parse_enum(const std::string& v, std::initializer_list<std::pair<const char*, E>> names) {
  for (const auto& [n, e] : names)
    if (v == n) return e;
  std::string options;
  for (const auto& [n, e] : names) options += (options.empty() ? "" : "|") + std::string(n);
  throw BadValue{"'" + v + "' is not one of " + options};
}

double to_double(const std::string& v) {
  try {
    return parse_double(v, 0);
  } catch (const ParseError&) {
    throw BadValue{"'" + v + "' is not a number"};
  }
}

long long to_integer(const std::string& v) {
  try {
    return parse_integer(v, 0);
  } catch (const ParseError&) {
    throw BadValue{"'" + v + "' is not an integer"};
  }
}

std::vector<double> to_list(const std::string& v) {
  std::vector<double> out;
  if (trim(v).empty()) return out;
  std::string_view rest = v;
  while (true) {
    const auto comma = rest.find(',');
    out.push_back(to_double(std::string(trim(rest.substr(0, comma)))));
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  return out;
}

Vec2 to_vec2(const std::string& v) {
  const auto l = to_list(v);
  if (l.size() == 1) return {l[0], l[0]};
  if (l.size() != 2) throw BadValue{"'" + v + "' is not one or two numbers"};
  return {l[0], l[1]};
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "yes" || v == "1" || v == "on") return true;
  if (v == "false" || v == "no" || v == "0" || v == "off") return false;
  throw BadValue{"'" + v + "' is not a boolean"};
}

std::string fmt(double v) { return format_double(v); }
std::string fmt(Vec2 v) { return fmt(v.x) + ", " + fmt(v.y); }
std::string fmt(const std::vector<double>& l) {
  std::string out;
  for (double v : l) out += (out.empty() ? "" : ", ") + fmt(v);
  return out;
}

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return fs::absolute(fs::path(base) / p).lexically_normal().string();
}

struct Field {
  const char* key;
  const char* help;
  std::function<void(ExperimentConfig&, const std::string& value, const std::string& base)> set;
  std::function<std::optional<std::string>(const ExperimentConfig&)> get;
};

using C = ExperimentConfig;
using S = std::string;
using Out = std::optional<std::string>;

BoundaryKind to_boundary(const S& v) {
  return parse_enum<BoundaryKind>(v, {{"node", BoundaryKind::Node},
                                      {"cycle", BoundaryKind::Cycle},
                                      {"gaussian", BoundaryKind::Gaussian},
                                      {"delta", BoundaryKind::Delta},
                                      {"points", BoundaryKind::Points}});
}

ModelKind to_model(const S& v) {
  return parse_enum<ModelKind>(v, {{"morris_lecar_class1", ModelKind::MorrisLecarClass1},
                                   {"morris_lecar_class2", ModelKind::MorrisLecarClass2},
                                   {"brownian", ModelKind::Brownian},
                                   {"custom", ModelKind::CustomDrift}});
}

PipelineKind to_pipeline(const S& v) {
  return parse_enum<PipelineKind>(v, {{"bridge", PipelineKind::Bridge}, {"tipping", PipelineKind::Tipping}});
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"experiment.name", "run directory name under output_dir",
       [](C& c, const S& v, const S&) { c.name = v; }, [](const C& c) -> Out { return c.name; }},
      {"experiment.pipeline", "bridge | tipping",
       [](C& c, const S& v, const S&) { c.pipeline = to_pipeline(v); },
       [](const C& c) -> Out { return to_string(c.pipeline); }},
      {"experiment.solver", "ipf | fbsde (bridge pipeline only)",
       [](C& c, const S& v, const S&) {
         c.solver = parse_enum<SolverKind>(v, {{"ipf", SolverKind::Ipf}, {"fbsde", SolverKind::Fbsde}});
       },
       [](const C& c) -> Out { return to_string(c.solver); }},
      {"experiment.seed", "master seed (required); child i uses derive_seed(seed, i)",
       [](C& c, const S& v, const S&) {
         const long long s = to_integer(v);
         if (s < 0) throw BadValue{"seed must be >= 0"};
         c.seed = static_cast<std::uint64_t>(s);
       },
       [](const C& c) -> Out { return c.seed ? Out(std::to_string(*c.seed)) : std::nullopt; }},
      {"experiment.output_dir", "parent directory of the run directory",
       [](C& c, const S& v, const S& b) { c.output_dir = resolve(b, v); },
       [](const C& c) -> Out { return c.output_dir; }},

      {"model.kind", "morris_lecar_class1 | morris_lecar_class2 | brownian | custom",
       [](C& c, const S& v, const S&) { c.model = to_model(v); },
       [](const C& c) -> Out { return to_string(c.model); }},
      {"model.drift_table", "custom drift: CSV x,y,vx,vy with one row per grid cell",
       [](C& c, const S& v, const S& b) { c.drift_table = resolve(b, v); },
       [](const C& c) -> Out { return c.drift_table; }},
      {"model.w_noise_fraction", "Morris-Lecar noise on w relative to g",
       [](C& c, const S& v, const S&) { c.w_noise_fraction = to_double(v); },
       [](const C& c) -> Out { return fmt(c.w_noise_fraction); }},

      {"grid.xmin", "left edge of the state grid", [](C& c, const S& v, const S&) { c.grid.xmin = to_double(v); },
       [](const C& c) -> Out { return fmt(c.grid.xmin); }},
      {"grid.xmax", "right edge", [](C& c, const S& v, const S&) { c.grid.xmax = to_double(v); },
       [](const C& c) -> Out { return fmt(c.grid.xmax); }},
      {"grid.ymin", "bottom edge", [](C& c, const S& v, const S&) { c.grid.ymin = to_double(v); },
       [](const C& c) -> Out { return fmt(c.grid.ymin); }},
      {"grid.ymax", "top edge", [](C& c, const S& v, const S&) { c.grid.ymax = to_double(v); },
       [](const C& c) -> Out { return fmt(c.grid.ymax); }},
      {"grid.nx", "cells along x (>= 2)",
       [](C& c, const S& v, const S&) { c.grid.nx = static_cast<int>(to_integer(v)); },
       [](const C& c) -> Out { return std::to_string(c.grid.nx); }},
      {"grid.ny", "cells along y (1 gives a line grid)",
       [](C& c, const S& v, const S&) { c.grid.ny = static_cast<int>(to_integer(v)); },
       [](const C& c) -> Out { return std::to_string(c.grid.ny); }},

      {"time.T", "horizon", [](C& c, const S& v, const S&) { c.horizon = to_double(v); },
       [](const C& c) -> Out { return fmt(c.horizon); }},
      {"time.N", "number of steps", [](C& c, const S& v, const S&) { c.steps = static_cast<int>(to_integer(v)); },
       [](const C& c) -> Out { return std::to_string(c.steps); }},

      {"noise.kind", "constant | linear | cosine",
       [](C& c, const S& v, const S&) {
         c.noise_kind = parse_enum<NoiseKind>(
             v, {{"constant", NoiseKind::Constant}, {"linear", NoiseKind::Linear}, {"cosine", NoiseKind::Cosine}});
       },
       [](const C& c) -> Out { return noise_name(c.noise_kind); }},
      {"noise.sigma", "noise level g at t = 0",
       [](C& c, const S& v, const S&) { c.sigma = to_double(v); },
       [](const C& c) -> Out { return fmt(c.sigma); }},
      {"noise.sigma_end", "schedule value at t = T (linear, cosine)",
       [](C& c, const S& v, const S&) { c.sigma_end = to_double(v); },
       [](const C& c) -> Out { return fmt(c.sigma_end); }},

      {"boundary.source", "node | gaussian | delta | points",
       [](C& c, const S& v, const S&) { c.source.kind = to_boundary(v); },
       [](const C& c) -> Out { return to_string(c.source.kind); }},
      {"boundary.source_mean", "gaussian mean or delta location",
       [](C& c, const S& v, const S&) { c.source.mean = to_vec2(v); },
       [](const C& c) -> Out { return fmt(c.source.mean); }},
      {"boundary.source_sd", "gaussian standard deviation per axis",
       [](C& c, const S& v, const S&) { c.source.sd = to_vec2(v); },
       [](const C& c) -> Out { return fmt(c.source.sd); }},
      {"boundary.source_path", "CSV x,y[,label] for points",
       [](C& c, const S& v, const S& b) { c.source.path = resolve(b, v); },
       [](const C& c) -> Out { return c.source.path; }},
      {"boundary.target", "cycle | gaussian | delta | points",
       [](C& c, const S& v, const S&) { c.target.kind = to_boundary(v); },
       [](const C& c) -> Out { return to_string(c.target.kind); }},
      {"boundary.target_mean", "as source_mean, for the target", [](C& c, const S& v, const S&) { c.target.mean = to_vec2(v); },
       [](const C& c) -> Out { return fmt(c.target.mean); }},
      {"boundary.target_sd", "as source_sd, for the target", [](C& c, const S& v, const S&) { c.target.sd = to_vec2(v); },
       [](const C& c) -> Out { return fmt(c.target.sd); }},
      {"boundary.target_path", "as source_path, for the target", [](C& c, const S& v, const S& b) { c.target.path = resolve(b, v); },
       [](const C& c) -> Out { return c.target.path; }},
      {"boundary.bandwidth", "KDE bandwidth per axis for cycle and point boundaries; -1 = Silverman",
       [](C& c, const S& v, const S&) { c.bandwidth = to_vec2(v); },
       [](const C& c) -> Out { return fmt(c.bandwidth); }},
      {"boundary.node_spread", "standard deviation of the node density per axis",
       [](C& c, const S& v, const S&) { c.node_spread = to_vec2(v); },
       [](const C& c) -> Out { return fmt(c.node_spread); }},
      {"boundary.arc_fraction", "fraction of one revolution kept as cycle target",
       [](C& c, const S& v, const S&) { c.arc_fraction = to_double(v); },
       [](const C& c) -> Out { return fmt(c.arc_fraction); }},
      {"boundary.arc_start", "arc phase offset in revolutions",
       [](C& c, const S& v, const S&) { c.arc_start = to_double(v); },
       [](const C& c) -> Out { return fmt(c.arc_start); }},

      {"sweep.sigma", "comma-separated noise levels; one child per value",
       [](C& c, const S& v, const S&) { c.sigma_sweep = to_list(v); },
       [](const C& c) -> Out { return c.sigma_sweep ? Out(fmt(*c.sigma_sweep)) : std::nullopt; }},
      {"sweep.T", "comma-separated horizons; one child per value",
       [](C& c, const S& v, const S&) { c.horizon_sweep = to_list(v); },
       [](const C& c) -> Out { return c.horizon_sweep ? Out(fmt(*c.horizon_sweep)) : std::nullopt; }},

      {"ipf.max_iter", "iteration cap", [](C& c, const S& v, const S&) { c.ipf.max_iter = static_cast<int>(to_integer(v)); },
       [](const C& c) -> Out { return std::to_string(c.ipf.max_iter); }},
      {"ipf.tol", "terminal L1 tolerance", [](C& c, const S& v, const S&) { c.ipf.tol = to_double(v); },
       [](const C& c) -> Out { return fmt(c.ipf.tol); }},
      {"ipf.truncation_sigmas", "transition kernels are cut this many step deviations from the mean",
       [](C& c, const S& v, const S&) { c.ipf.truncation_sigmas = to_double(v); },
       [](const C& c) -> Out { return fmt(c.ipf.truncation_sigmas); }},

      {"fbsde.mode", "density | sdot",
       [](C& c, const S& v, const S&) {
         c.fbsde.mode = parse_enum<FbsdeMode>(v, {{"density", FbsdeMode::Density}, {"sdot", FbsdeMode::SemiDiscrete}});
       },
       [](const C& c) -> Out { return to_string(c.fbsde.mode); }},
      {"fbsde.width", "hidden width", [](C& c, const S& v, const S&) { c.fbsde.width = static_cast<int>(to_integer(v)); },
       [](const C& c) -> Out { return std::to_string(c.fbsde.width); }},
      {"fbsde.iterations", "K",
       [](C& c, const S& v, const S&) { c.fbsde.iterations = static_cast<int>(to_integer(v)); },
       [](const C& c) -> Out { return std::to_string(c.fbsde.iterations); }},
      {"fbsde.batch", "M",
       [](C& c, const S& v, const S&) {
         const long long b = to_integer(v);
         if (b < 0) throw BadValue{"batch must be >= 0"};
         c.fbsde.batch = static_cast<std::size_t>(b);
       },
       [](const C& c) -> Out { return std::to_string(c.fbsde.batch); }},
      {"fbsde.lr", "initial learning rate (cosine decay)", [](C& c, const S& v, const S&) { c.fbsde.lr = to_double(v); },
       [](const C& c) -> Out { return fmt(c.fbsde.lr); }},
      {"fbsde.stage_length", "iterations per alternating stage",
       [](C& c, const S& v, const S&) { c.fbsde.stage_length = static_cast<int>(to_integer(v)); },
       [](const C& c) -> Out { return std::to_string(c.fbsde.stage_length); }},

      {"indicator.mode", "controlled_drift | control_only",
       [](C& c, const S& v, const S&) {
         try {
           c.indicator.mode = parse_velocity_mode(v);
         } catch (const Error& e) {
           throw BadValue{e.what()};
         }
       },
       [](const C& c) -> Out { return to_string(c.indicator.mode); }},
      {"indicator.threshold", "jump threshold C; default 5x median absolute successive difference",
       [](C& c, const S& v, const S&) { c.indicator.threshold = to_double(v); },
       [](const C& c) -> Out { return c.indicator.threshold ? Out(fmt(*c.indicator.threshold)) : std::nullopt; }},
      {"indicator.step_offset", "delta rho in slices",
       [](C& c, const S& v, const S&) { c.indicator.step_offset = static_cast<int>(to_integer(v)); },
       [](const C& c) -> Out { return std::to_string(c.indicator.step_offset); }},
      {"indicator.column", "running | per_slice",
       [](C& c, const S& v, const S&) {
         c.indicator.column = parse_enum<IndicatorColumn>(
             v, {{"running", IndicatorColumn::Running}, {"per_slice", IndicatorColumn::PerSlice}});
       },
       [](const C& c) -> Out {
         return c.indicator.column == IndicatorColumn::Running ? "running" : "per_slice";
       }},

      {"tipping.synthetic", "use the bundled crescent cohort instead of CSV clouds",
       [](C& c, const S& v, const S&) { c.tipping.synthetic = to_bool(v); },
       [](const C& c) -> Out { return c.tipping.synthetic ? "true" : "false"; }},
      {"tipping.source_path", "CSV x,y", [](C& c, const S& v, const S& b) { c.tipping.source_path = resolve(b, v); },
       [](const C& c) -> Out { return c.tipping.source_path; }},
      {"tipping.target_path", "CSV x,y,label",
       [](C& c, const S& v, const S& b) { c.tipping.target_path = resolve(b, v); },
       [](const C& c) -> Out { return c.tipping.target_path; }},
      {"tipping.source_points", "synthetic cohort size",
       [](C& c, const S& v, const S&) { c.tipping.cohort.source_points = static_cast<std::size_t>(std::max(0LL, to_integer(v))); },
       [](const C& c) -> Out { return std::to_string(c.tipping.cohort.source_points); }},
      {"tipping.target_points", "synthetic crescent points (split evenly)",
       [](C& c, const S& v, const S&) { c.tipping.cohort.target_points = static_cast<std::size_t>(std::max(0LL, to_integer(v))); },
       [](const C& c) -> Out { return std::to_string(c.tipping.cohort.target_points); }},
      {"tipping.crescent_noise", "standard deviation added to crescent points",
       [](C& c, const S& v, const S&) { c.tipping.cohort.crescent_noise = to_double(v); },
       [](const C& c) -> Out { return fmt(c.tipping.cohort.crescent_noise); }},
      {"tipping.pairing_samples", "Monte Carlo samples per height-fit step",
       [](C& c, const S& v, const S&) { c.tipping.pairing_samples = static_cast<std::size_t>(std::max(0LL, to_integer(v))); },
       [](const C& c) -> Out { return std::to_string(c.tipping.pairing_samples); }},

      {"output.snapshots", "evenly spaced slices written (ends included)",
       [](C& c, const S& v, const S&) { c.output.snapshots = static_cast<int>(to_integer(v)); },
       [](const C& c) -> Out { return std::to_string(c.output.snapshots); }},
      {"output.controls", "write control fields at the snapshot slices",
       [](C& c, const S& v, const S&) { c.output.controls = to_bool(v); },
       [](const C& c) -> Out { return c.output.controls ? "true" : "false"; }},
  };
  return f;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return &f;
  return nullptr;
}

// Line of every "section.key" in the text, for error messages.
std::map<std::string, std::size_t> key_lines(const std::string& text) {
  std::map<std::string, std::size_t> out;
  std::istringstream in(text);
  std::string line, section;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#' || t.front() == ';') continue;
    if (t.front() == '[') {
      section = std::string(trim(t.substr(1, t.find(']') - 1)));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) continue;
    const std::string key = (section.empty() ? "" : section + ".") + std::string(trim(t.substr(0, eq)));
    out.emplace(key, n);
  }
  return out;
}

void check_file(std::vector<std::string>& bad, const char* key, const std::string& path) {
  if (path.empty())
    bad.push_back(std::string(key) + " is required");
  else if (!fs::is_regular_file(path))
    bad.push_back(std::string(key) + ": file not found: " + path);
}

SdeModel noise_only(const ExperimentConfig& cfg, double sigma, double horizon) {
  SdeModel m;
  m.drift = [](double, Vec2) { return Vec2{0.0, 0.0}; };
  const double ratio = cfg.sigma > 0.0 ? sigma / cfg.sigma : 1.0;
  if (cfg.noise_kind == NoiseKind::Constant)
    m.noise = NoiseSchedule::constant(sigma);
  else
    m.noise = NoiseSchedule{cfg.noise_kind, sigma, cfg.sigma_end * ratio, horizon};
  const bool ml = cfg.model == ModelKind::MorrisLecarClass1 || cfg.model == ModelKind::MorrisLecarClass2;
  m.axis_noise = {1.0, ml ? cfg.w_noise_fraction : 1.0};
  return m;
}

std::vector<double> sweep_or(const std::optional<std::vector<double>>& s, double base) {
  return s && !s->empty() ? *s : std::vector<double>{base};
}

}  // namespace

ExperimentConfig default_config(ModelKind model, PipelineKind pipeline) {
  ExperimentConfig c;
  c.model = model;
  c.pipeline = pipeline;
  c.source = {BoundaryKind::Gaussian, {-1.0, 0.0}, {0.25, 0.25}, ""};
  c.target = {BoundaryKind::Gaussian, {1.0, 0.0}, {0.25, 0.25}, ""};
  if (model == ModelKind::MorrisLecarClass1 || model == ModelKind::MorrisLecarClass2) {
    // Scaled coordinates (v / 10 mV, w); the box holds the class I cycle.
    c.grid = {-6.0, 4.0, 0.0, 0.6, 96, 96};
    c.horizon = 20.0;
    c.steps = 200;
    c.sigma = c.sigma_end = 0.3;
    c.source.kind = BoundaryKind::Node;
    c.target.kind = BoundaryKind::Cycle;
    c.bandwidth = {0.15, 0.015};
  }
  if (pipeline == PipelineKind::Tipping) {
    c.grid = {-2.0, 3.0, -1.75, 2.25, 64, 64};
    c.horizon = 1.0;
    c.steps = 50;
    c.sigma = c.sigma_end = 0.5;
    c.source.kind = c.target.kind = BoundaryKind::Points;
    c.bandwidth = {0.12, 0.12};
  }
  return c;
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::echo() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) {
    const auto v = f.get(*this);
    out.emplace_back(f.key, v.value_or(""));
  }
  return out;
}

std::string ExperimentConfig::to_ini() const {
  std::string out, section;
  for (const auto& f : fields()) {
    const auto v = f.get(*this);
    if (!v) continue;
    const std::string key = f.key;
    const auto dot = key.find('.');
    if (key.substr(0, dot) != section) {
      section = key.substr(0, dot);
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += key.substr(dot + 1) + " = " + *v + "\n";
  }
  return out;
}

void ExperimentConfig::validate() const {
  std::vector<std::string> bad;
  auto positive = [&](const char* key, double v) {
    if (!(v > 0.0) || !std::isfinite(v)) bad.push_back(std::string(key) + " must be > 0");
  };
  if (!seed) bad.push_back("experiment.seed is required");
  if (name.empty() || name.find('/') != std::string::npos || name == "." || name == "..")
    bad.push_back("experiment.name must be a plain directory name");
  if (output_dir.empty()) bad.push_back("experiment.output_dir must not be empty");

  bool grid_ok = true;
  if (grid.nx < 2) bad.push_back("grid.nx must be >= 2"), grid_ok = false;
  if (grid.ny < 1) bad.push_back("grid.ny must be >= 1"), grid_ok = false;
  if (!(grid.xmax > grid.xmin) || !std::isfinite(grid.xmax - grid.xmin))
    bad.push_back("grid.xmax must exceed grid.xmin"), grid_ok = false;
  if (!(grid.ymax > grid.ymin) || !std::isfinite(grid.ymax - grid.ymin))
    bad.push_back("grid.ymax must exceed grid.ymin"), grid_ok = false;

  positive("time.T", horizon);
  if (steps < 1) bad.push_back("time.N must be >= 1");
  positive("noise.sigma", sigma);
  if (noise_kind != NoiseKind::Constant) positive("noise.sigma_end", sigma_end);
  for (const auto& [key, sweep] : {std::pair{"sweep.sigma", &sigma_sweep}, std::pair{"sweep.T", &horizon_sweep}}) {
    if (!*sweep) continue;
    if ((*sweep)->empty()) bad.push_back(std::string(key) + " is empty");
    for (double v : **sweep) positive(key, v);
  }

  const bool ml = model == ModelKind::MorrisLecarClass1 || model == ModelKind::MorrisLecarClass2;
  if (model == ModelKind::CustomDrift) check_file(bad, "model.drift_table", drift_table);
  if (ml) positive("model.w_noise_fraction", w_noise_fraction);
  for (double b : {bandwidth.x, bandwidth.y})
    if (!(b >= 0.0 || b == kSilvermanBandwidth)) bad.push_back("boundary.bandwidth must be >= 0 or -1");
  if (!(arc_fraction > 0.0 && arc_fraction <= 1.0)) bad.push_back("boundary.arc_fraction must lie in (0, 1]");

  if (pipeline == PipelineKind::Bridge) {
    if (source.kind == BoundaryKind::Cycle) bad.push_back("boundary.source cannot be a cycle");
    if (target.kind == BoundaryKind::Node) bad.push_back("boundary.target cannot be a node");
    for (const auto* b : {&source, &target}) {
      const char* side = b == &source ? "boundary.source" : "boundary.target";
      if (!ml && (b->kind == BoundaryKind::Node || b->kind == BoundaryKind::Cycle))
        bad.push_back(std::string(side) + " " + to_string(b->kind) + " needs a Morris-Lecar model");
      if (b->kind == BoundaryKind::Gaussian && !(b->sd.x > 0.0 && b->sd.y > 0.0))
        bad.push_back(std::string(side) + "_sd must be > 0");
      if (b->kind == BoundaryKind::Points)
        check_file(bad, b == &source ? "boundary.source_path" : "boundary.target_path", b->path);
    }
    if (source.kind == BoundaryKind::Node) positive("boundary.node_spread", std::min(node_spread.x, node_spread.y));
  } else {
    if (solver == SolverKind::Fbsde) bad.push_back("experiment.solver fbsde is only available for the bridge pipeline");
    if (!tipping.synthetic) {
      check_file(bad, "tipping.source_path", tipping.source_path);
      check_file(bad, "tipping.target_path", tipping.target_path);
    } else {
      if (tipping.cohort.source_points < 1) bad.push_back("tipping.source_points must be >= 1");
      if (tipping.cohort.target_points < 2) bad.push_back("tipping.target_points must be >= 2");
      if (!(tipping.cohort.crescent_noise >= 0.0)) bad.push_back("tipping.crescent_noise must be >= 0");
    }
    if (tipping.pairing_samples < 1) bad.push_back("tipping.pairing_samples must be >= 1");
  }

  if (ipf.max_iter < 1) bad.push_back("ipf.max_iter must be >= 1");
  positive("ipf.tol", ipf.tol);
  positive("ipf.truncation_sigmas", ipf.truncation_sigmas);
  if (solver == SolverKind::Fbsde) {
    if (fbsde.width < 1) bad.push_back("fbsde.width must be >= 1");
    if (fbsde.iterations < 0) bad.push_back("fbsde.iterations must be >= 0");
    if (fbsde.batch < 1) bad.push_back("fbsde.batch must be >= 1");
    positive("fbsde.lr", fbsde.lr);
    if (fbsde.stage_length < 1) bad.push_back("fbsde.stage_length must be >= 1");
    if (fbsde.mode == FbsdeMode::SemiDiscrete && target.kind != BoundaryKind::Delta &&
        target.kind != BoundaryKind::Points)
      bad.push_back("fbsde.mode sdot needs a delta or points target");
  }
  if (indicator.step_offset < 1) bad.push_back("indicator.step_offset must be >= 1");
  if (indicator.threshold) positive("indicator.threshold", *indicator.threshold);
  if (output.snapshots < 2) bad.push_back("output.snapshots must be >= 2");

  // Kernel resolution of every child, checked before anything runs.
  if (grid_ok && steps >= 1 && sigma > 0.0 && (solver == SolverKind::Ipf || pipeline == PipelineKind::Tipping)) {
    const Grid2D g = grid.make();
    for (const auto& child : plan_children(*this)) {
      if (!(child.sigma > 0.0) || !(child.horizon > 0.0)) continue;
      const SdeModel m = noise_only(*this, child.sigma, child.horizon);
      const TimeGrid tg(child.horizon, steps);
      const int checks = m.noise.is_constant() ? 1 : steps;
      for (int n = 0; n < checks; ++n) {
        try {
          check_noise_resolution(m, tg.time(n), tg.dt(), g);
        } catch (const Error& e) {
          bad.push_back(child.name + ": " + e.what());
          break;
        }
      }
    }
  }
  if (!bad.empty()) throw ValidationError(std::move(bad));
}

ExperimentConfig parse_config(std::istream& in, const std::string& base_dir) {
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream s(text);
    pt::read_ini(s, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError(e.line(), e.message());
  }
  const auto lines = key_lines(text);
  auto line_of = [&](const std::string& key) {
    const auto it = lines.find(key);
    return it == lines.end() ? std::size_t{0} : it->second;
  };

  // Flatten, rejecting anything outside the schema before applying values.
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ParseError(line_of(section), "key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      if (!find_field(full)) throw ParseError(line_of(full), "unknown key '" + full + "'");
      entries.emplace_back(full, std::string(trim(value.data())));
    }
  }
  auto lookup = [&](const std::string& key) -> std::optional<std::string> {
    for (const auto& [k, v] : entries)
      if (k == key) return v;
    return std::nullopt;
  };

  ExperimentConfig cfg;
  try {
    const auto model = lookup("model.kind");
    const auto pipeline = lookup("experiment.pipeline");
    cfg = default_config(model ? to_model(*model) : ModelKind::Brownian,
                         pipeline ? to_pipeline(*pipeline) : PipelineKind::Bridge);
  } catch (const BadValue&) {
    // Reported with its line below.
  }
  for (const auto& [key, value] : entries) {
    try {
      find_field(key)->set(cfg, value, base_dir);
    } catch (const BadValue& e) {
      throw ParseError(line_of(key), key + ": " + e.what);
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  try {
    return parse_config(in, fs::path(path).parent_path().string().empty() ? "." : fs::path(path).parent_path().string());
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path + ": " + e.detail());
  }
}

std::vector<SchemaEntry> config_schema() {
  std::vector<SchemaEntry> out;
  for (const auto& f : fields()) out.push_back({f.key, f.help});
  return out;
}

namespace {

const std::map<std::string, std::string>& presets() {
  static const std::map<std::string, std::string> p = {
      {"brownian_bridge",
       "[experiment]\nname = brownian_bridge\nseed = 0\n"
       "[model]\nkind = brownian\n"
       // Shifted by half a cell so that 0 and 1 are cell centers.
       "[grid]\nxmin = -1.5078125\nxmax = 2.4921875\nymin = -0.5\nymax = 0.5\nnx = 256\nny = 1\n"
       "[time]\nT = 1\nN = 50\n[noise]\nsigma = 0.5\n"
       "[boundary]\nsource = delta\nsource_mean = 0, 0\ntarget = delta\ntarget_mean = 1, 0\n"
       "[ipf]\ntol = 1e-9\n"},
      {"gaussian_pair",
       "[experiment]\nname = gaussian_pair\nseed = 0\n"
       "[model]\nkind = brownian\n"
       "[grid]\nxmin = -3\nxmax = 3\nymin = -0.5\nymax = 0.5\nnx = 256\nny = 1\n"
       "[time]\nT = 1\nN = 50\n[noise]\nsigma = 0.5\n"
       "[boundary]\nsource = gaussian\nsource_mean = -1, 0\nsource_sd = 0.1\n"
       "target = gaussian\ntarget_mean = 1, 0\ntarget_sd = 0.1\n"
       "[ipf]\ntol = 1e-9\n"},
      {"ml_class1_bridge",
       "[experiment]\nname = ml_class1_bridge\nseed = 0\n"
       "[model]\nkind = morris_lecar_class1\n"
       "[time]\nT = 20\nN = 200\n[noise]\nsigma = 0.3\n"},
      {"ml_class1_noise_sweep",
       "[experiment]\nname = ml_class1_noise_sweep\nseed = 0\n"
       "[model]\nkind = morris_lecar_class1\n"
       "[time]\nT = 20\nN = 200\n[noise]\nsigma = 0.3\n"
       "[sweep]\nsigma = 0.3, 0.5, 1\n"},
      {"ml_short_horizon_noise_sweep",
       "[experiment]\nname = ml_short_horizon_noise_sweep\nseed = 0\n"
       "[model]\nkind = morris_lecar_class1\n"
       "[time]\nT = 3\nN = 20\n[noise]\nsigma = 0.3\n"
       "[sweep]\nsigma = 0.3, 0.5, 1\n"},
      {"ml_horizon_sweep",
       "[experiment]\nname = ml_horizon_sweep\nseed = 0\n"
       "[model]\nkind = morris_lecar_class1\n"
       "[time]\nT = 10\nN = 200\n[noise]\nsigma = 1\n"
       "[sweep]\nT = 10, 30, 40\n"},
      {"synthetic_tipping",
       "[experiment]\nname = synthetic_tipping\npipeline = tipping\nseed = 0\n"
       "[model]\nkind = brownian\n"
       "[time]\nT = 1\nN = 50\n[noise]\nsigma = 0.5\n"},
  };
  return p;
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& [name, text] : presets()) out.push_back(name);
  return out;
}

std::string preset_text(const std::string& name) {
  const auto it = presets().find(name);
  if (it == presets().end()) throw Error(ErrorCode::InvalidArgument, "unknown preset '" + name + "'");
  return it->second;
}

ExperimentConfig load_preset(const std::string& name) {
  std::istringstream in(preset_text(name));
  return parse_config(in);
}

std::vector<ChildPlan> plan_children(const ExperimentConfig& cfg) {
  const auto sigmas = sweep_or(cfg.sigma_sweep, cfg.sigma);
  const auto horizons = sweep_or(cfg.horizon_sweep, cfg.horizon);
  const std::uint64_t master = cfg.seed.value_or(0);
  std::vector<ChildPlan> out;
  for (double T : horizons)
    for (double s : sigmas) {
      ChildPlan c;
      c.index = out.size();
      c.sigma = s;
      c.horizon = T;
      c.seed = derive_seed(master, c.index);
      char buf[32];
      std::snprintf(buf, sizeof buf, "child_%03zu", c.index);
      c.name = buf;
      out.push_back(c);
    }
  return out;
}

namespace {

std::shared_ptr<const VectorField> read_drift_table(const std::string& path, const Grid2D& grid) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  if (!next_nonblank_line(in, line, lineno)) throw Error(ErrorCode::EmptyFile, path + " is empty");
  if (trim(line) != "x,y,vx,vy") throw ParseError(lineno, path + ": expected header x,y,vx,vy");
  std::vector<double> vx(grid.cells()), vy(grid.cells());
  std::vector<bool> seen(grid.cells(), false);
  const double tol = 1e-6 * std::min(grid.dx(), grid.ny() > 1 ? grid.dy() : grid.dx());
  while (next_nonblank_line(in, line, lineno)) {
    const auto row = split_csv_doubles(line, lineno);
    if (row.size() != 4) throw ParseError(lineno, path + ": expected 4 columns");
    const auto cell = grid.locate({row[0], row[1]});
    if (!cell || norm(grid.center(*cell) - Vec2{row[0], row[1]}) > tol)
      throw ParseError(lineno, path + ": row is not at a cell center of the configured grid");
    if (seen[*cell]) throw ParseError(lineno, path + ": duplicate cell");
    seen[*cell] = true;
    vx[*cell] = row[2];
    vy[*cell] = row[3];
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw Error(ErrorCode::GridMismatch, path + " does not cover every grid cell");
  return std::make_shared<const VectorField>(grid, std::move(vx), std::move(vy));
}

}  // namespace

SdeModel build_model(const ExperimentConfig& cfg, double sigma, double horizon) {
  SdeModel m = noise_only(cfg, sigma, horizon);
  switch (cfg.model) {
    case ModelKind::MorrisLecarClass1:
    case ModelKind::MorrisLecarClass2: {
      const SdeModel ml = morris_lecar_model(
          cfg.model == ModelKind::MorrisLecarClass1 ? MLParams::class_one() : MLParams::class_two(), sigma,
          cfg.w_noise_fraction);
      m.drift = ml.drift;
      m.jacobian = ml.jacobian;
      m.axis_noise = ml.axis_noise;
      m.clamp_y = ml.clamp_y;
      break;
    }
    case ModelKind::Brownian:
      m.jacobian = [](double, Vec2) { return Mat2{}; };
      break;
    case ModelKind::CustomDrift: {
      const auto field = read_drift_table(cfg.drift_table, cfg.grid.make());
      m.drift = [field](double, Vec2 x) { return field->interpolate(x); };
      break;
    }
  }
  if (cfg.grid.ny == 1) m.axis_noise.y = 0.0;  // line grids carry no y dynamics
  m.autonomous = true;
  m.validate();
  return m;
}

}  // namespace sbtip
