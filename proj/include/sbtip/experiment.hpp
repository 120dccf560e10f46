#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sbtip/config.hpp"
#include "sbtip/fbsde.hpp"
#include "sbtip/indicator.hpp"
#include "sbtip/io.hpp"
#include "sbtip/ipf.hpp"
#include "sbtip/sdot.hpp"

namespace sbtip {

inline constexpr const char* kVersion = "0.1.0";

/// Boundary laws of a bridge on the configured grid, with exact samplers
/// for the FBSDE solver and the atoms a semi-discrete target needs.
struct BridgeBoundaries {
  DensityField rho0, rho1;
  StateSampler source_sampler;
  std::vector<Vec2> target_points;  // Delta and Points targets
  std::vector<Vec2> cycle;          // Morris-Lecar targets, scaled
};

BridgeBoundaries build_boundaries(const ExperimentConfig& cfg, const Grid2D& grid);

/// Slices written as snapshots: `count` evenly spaced indices in [0, N].
std::vector<int> snapshot_slices(int steps, int count);

using Metrics = std::map<std::string, double>;
using Logger = std::function<void(const std::string&)>;

struct BridgeRun {
  BridgeSolution solution;
  IndicatorSeries indicator;
  std::vector<Detection> detections;
  Metrics metrics;
};

/// IPF bridge of one child: marginal snapshots (CSV, PGM), controls,
/// ipf_history.csv, cost.csv, indicator.csv and detections.csv in `dir`.
BridgeRun run_ipf_bridge(const ExperimentConfig& cfg, const ChildPlan& child, const std::string& dir);

struct FbsdeRun {
  TrainResult training;
  IndicatorSeries indicator;
  std::vector<Detection> detections;
  Metrics metrics;
};

/// FBSDE bridge of one child: policies Z.sbpz and Zhat.sbpz, loss.csv,
/// ensemble marginal snapshots, sigma Z on the grid, and the same cost,
/// indicator and detection files as the IPF bridge (costs are ensemble
/// means).
FbsdeRun run_fbsde_bridge(const ExperimentConfig& cfg, const ChildPlan& child, const std::string& dir,
                          const Logger& log = {});

struct TippingOptions {
  Vec2 bandwidth{0.12, 0.12};
  IpfOptions ipf;
  FitOptions fit;
  IndicatorSettings indicator;
};

/// Region split, semi-discrete pairing, one bridge per region and the
/// indicator of the mixture. Region r carries the share of source points its
/// cell received; the mixture marginal and the cost are the mass-weighted
/// sums of the region bridges.
struct TippingResult {
  RegionPairing pairing;
  std::vector<double> region_mass;
  std::vector<BridgeSolution> regions;
  std::vector<DensityField> mixture;
  std::vector<double> cost_controlled_drift, cost_control_only;
  IndicatorSeries indicator;  // in the configured velocity mode
  std::vector<Detection> detections;
  std::vector<double> bimodality;
  std::size_t max_bimodality_slice = 0;
};

TippingResult tipping_pipeline(const PointCloud& source, const PointCloud& target, const SdeModel& model,
                               const TimeGrid& tg, const Grid2D& grid, const TippingOptions& options);

/// Tipping child: clouds, heights, per-region histories, mixture snapshots,
/// cost, indicator, detections and bimodality series.
TippingResult run_tipping(const ExperimentConfig& cfg, const ChildPlan& child, const std::string& dir);

/// Columns t,cost_controlled_drift,cost_control_only.
void write_cost_csv(const std::string& path, const std::vector<double>& times,
                    const std::vector<double>& controlled_drift, const std::vector<double>& control_only);
/// Indicator rebuilt from a cost.csv in the given velocity mode.
IndicatorSeries read_cost_csv(const std::string& path, VelocityMode mode);

struct ChildSummary {
  ChildPlan plan;
  std::string dir;
  bool failed = false;
  std::string error;
  double wall_seconds = 0.0;
  Metrics metrics;
};

struct RunSummary {
  std::string dir;
  std::vector<ChildSummary> children;
  std::size_t failed = 0;
  double wall_seconds = 0.0;
};

/// Runs every child of the plan under <output_dir>/<name>/<child name>. A
/// failing child leaves its partial output plus a FAILED file holding the
/// error and does not stop the others. The run directory gets config.ini
/// (reloadable) and summary.json; each child directory its own
/// summary.json. Wall times appear only in the JSON summaries.
RunSummary run_experiment(const ExperimentConfig& cfg, const Logger& log = {});

}  // namespace sbtip
