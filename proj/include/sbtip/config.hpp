#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sbtip/grid.hpp"
#include "sbtip/indicator.hpp"
#include "sbtip/io.hpp"
#include "sbtip/ipf.hpp"
#include "sbtip/sde.hpp"

namespace sbtip {

enum class ModelKind { MorrisLecarClass1, MorrisLecarClass2, Brownian, CustomDrift };
enum class SolverKind { Ipf, Fbsde };
enum class PipelineKind { Bridge, Tipping };
/// Node and Cycle are the Morris-Lecar generators; Points reads a CSV cloud.
enum class BoundaryKind { Node, Cycle, Gaussian, Delta, Points };
enum class FbsdeMode { Density, SemiDiscrete };

std::string to_string(ModelKind k);
std::string to_string(SolverKind k);
std::string to_string(PipelineKind k);
std::string to_string(BoundaryKind k);
std::string to_string(FbsdeMode k);

struct GridSpec {
  double xmin = -2.0, xmax = 2.0, ymin = -2.0, ymax = 2.0;
  int nx = 64, ny = 64;
  Grid2D make() const { return Grid2D(xmin, xmax, ymin, ymax, nx, ny); }
};

struct BoundarySpec {
  BoundaryKind kind = BoundaryKind::Gaussian;
  Vec2 mean{0.0, 0.0};  // Gaussian mean or delta location
  Vec2 sd{0.25, 0.25};
  std::string path;     // Points
};

struct FbsdeSettings {
  FbsdeMode mode = FbsdeMode::Density;
  int width = 32;
  int iterations = 2000;
  std::size_t batch = 256;
  double lr = 3e-3;
  int stage_length = 200;
};

struct IndicatorSettings {
  VelocityMode mode = VelocityMode::ControlledDrift;
  std::optional<double> threshold;
  int step_offset = 1;
  IndicatorColumn column = IndicatorColumn::Running;
};

struct TippingSettings {
  bool synthetic = true;
  std::string source_path, target_path;  // CSV clouds when not synthetic
  CohortOptions cohort;
  std::size_t pairing_samples = 20000;
};

struct OutputSettings {
  int snapshots = 5;     // evenly spaced slices written, both ends included
  bool controls = true;  // control fields at the snapshot slices
};

/// Everything a run needs. Built from an INI file by load_config; every
/// field has a default except the seed.
struct ExperimentConfig {
  std::string name = "experiment";
  PipelineKind pipeline = PipelineKind::Bridge;
  SolverKind solver = SolverKind::Ipf;
  std::optional<std::uint64_t> seed;
  std::string output_dir = "runs";

  ModelKind model = ModelKind::Brownian;
  std::string drift_table;        // CustomDrift: CSV x,y,vx,vy on the grid
  double w_noise_fraction = 0.05; // Morris-Lecar: noise on w relative to g

  GridSpec grid;
  double horizon = 1.0;  // T
  int steps = 50;        // N
  NoiseKind noise_kind = NoiseKind::Constant;
  double sigma = 0.5;
  double sigma_end = 0.5;  // end value of linear and cosine schedules

  BoundarySpec source, target;
  Vec2 bandwidth{0.12, 0.12};  // KDE of point boundaries; -1 selects Silverman
  Vec2 node_spread{0.15, 0.015};
  double arc_fraction = 1.0;
  double arc_start = 0.0;

  /// Empty optional: no sweep on that axis. A present but empty list is a
  /// validation error.
  std::optional<std::vector<double>> sigma_sweep, horizon_sweep;

  IpfOptions ipf;
  FbsdeSettings fbsde;
  IndicatorSettings indicator;
  TippingSettings tipping;
  OutputSettings output;

  /// Every schema key with its current value, in schema order.
  std::vector<std::pair<std::string, std::string>> echo() const;
  /// INI text that load_config turns back into this configuration.
  std::string to_ini() const;
  /// Collects every violation and throws ValidationError when any is found.
  void validate() const;
};

/// Defaults for a model kind and pipeline (grid, boundaries, bandwidths).
ExperimentConfig default_config(ModelKind model, PipelineKind pipeline = PipelineKind::Bridge);

/// INI with [section] headers and key = value lines; '#' and ';' start
/// comments. Unknown sections or keys raise ParseError naming them. Relative
/// paths are resolved against base_dir. The result is validated.
ExperimentConfig parse_config(std::istream& in, const std::string& base_dir = ".");
ExperimentConfig load_config(const std::string& path);

struct SchemaEntry {
  std::string key;  // section.name
  std::string help;
};
std::vector<SchemaEntry> config_schema();

std::vector<std::string> preset_names();
/// INI text of a named preset; InvalidArgument for unknown names.
std::string preset_text(const std::string& name);
ExperimentConfig load_preset(const std::string& name);

/// One run of a sweep. Seeds are derive_seed(master, index); children are
/// ordered with T outermost and sigma innermost.
struct ChildPlan {
  std::size_t index = 0;
  double sigma = 0.0;
  double horizon = 0.0;
  std::uint64_t seed = 0;
  std::string name;
};

std::vector<ChildPlan> plan_children(const ExperimentConfig& cfg);

/// Prior dynamics of one child, with the schedule stretched over its horizon.
SdeModel build_model(const ExperimentConfig& cfg, double sigma, double horizon);

}  // namespace sbtip
