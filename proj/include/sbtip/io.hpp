#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "sbtip/grid.hpp"

namespace sbtip {

/// Pre-reduced 2D embedding, optionally split into labelled regions.
struct PointCloud {
  std::vector<Vec2> points;
  std::vector<int> labels;  // empty, or one per point

  std::size_t size() const { return points.size(); }
  bool labeled() const { return !labels.empty(); }
  /// Finite coordinates and labels covering every point.
  void validate() const;
};

struct CloudSummary {
  std::size_t count = 0;
  Vec2 lower, upper;                       // bounding box
  std::map<int, std::size_t> label_counts; // empty for unlabelled clouds
};

CloudSummary describe(const PointCloud& cloud);
std::string format_summary(const CloudSummary& s);

/// CSV with columns x,y[,label]. A header row is optional; when present its
/// names must be x, y and label (or region). Blank lines and '#' comments
/// are skipped. ParseError carries the file line number; EmptyFile when no
/// data row is found.
PointCloud read_point_cloud(std::istream& in);
PointCloud load_point_cloud(const std::string& path);
void write_point_cloud_csv(const std::string& path, const PointCloud& cloud);

/// Stand-in for a reduced cohort embedding: a unimodal Gaussian source cloud
/// and a bimodal, non-convex target made of two interleaved crescents
/// labelled 0 and 1.
struct SyntheticCohort {
  PointCloud source;
  PointCloud target;
};

struct CohortOptions {
  std::size_t source_points = 2000;
  std::size_t target_points = 1000;
  Vec2 source_mean{0.5, 0.25};
  double source_sd = 0.35;
  double crescent_noise = 0.06;
};

SyntheticCohort synthetic_cohort(std::uint64_t seed, const CohortOptions& options = {});

}  // namespace sbtip
