#include "sbtip/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "sbtip/error.hpp"
#include "sbtip/rng.hpp"
#include "sbtip/text.hpp"

namespace sbtip {

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

bool looks_numeric(std::string_view s) {
  return !s.empty() && (std::isdigit(static_cast<unsigned char>(s.front())) || s.front() == '-' ||
                        s.front() == '+' || s.front() == '.');
}

}  // namespace

void PointCloud::validate() const {
  if (!labels.empty() && labels.size() != points.size())
    throw Error(ErrorCode::InvalidArgument, "labels must cover every point (" +
                                                std::to_string(labels.size()) + " labels, " +
                                                std::to_string(points.size()) + " points)");
  for (std::size_t i = 0; i < points.size(); ++i)
    if (!is_finite(points[i]))
      throw Error(ErrorCode::InvalidArgument, "point " + std::to_string(i) + " is not finite");
}

CloudSummary describe(const PointCloud& cloud) {
  CloudSummary s;
  s.count = cloud.size();
  if (cloud.points.empty()) return s;
  s.lower = s.upper = cloud.points.front();
  for (const auto& p : cloud.points) {
    s.lower = {std::min(s.lower.x, p.x), std::min(s.lower.y, p.y)};
    s.upper = {std::max(s.upper.x, p.x), std::max(s.upper.y, p.y)};
  }
  for (int l : cloud.labels) ++s.label_counts[l];
  return s;
}

std::string format_summary(const CloudSummary& s) {
  std::ostringstream out;
  out << s.count << " points, x in [" << format_double(s.lower.x) << ", " << format_double(s.upper.x)
      << "], y in [" << format_double(s.lower.y) << ", " << format_double(s.upper.y) << "]";
  if (!s.label_counts.empty()) {
    out << ", labels";
    for (const auto& [label, n] : s.label_counts) out << ' ' << label << ':' << n;
  }
  return out.str();
}

PointCloud read_point_cloud(std::istream& in) {
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  std::size_t columns = 0;
  bool first = true;
  while (next_nonblank_line(in, line, lineno)) {
    const auto fields = split_fields(line);
    if (first) {
      first = false;
      if (!looks_numeric(fields.front())) {
        if (fields.size() < 2 || fields.size() > 3 || lower(fields[0]) != "x" || lower(fields[1]) != "y" ||
            (fields.size() == 3 && lower(fields[2]) != "label" && lower(fields[2]) != "region"))
          throw ParseError(lineno, "expected header x,y[,label], got '" + line + "'");
        columns = fields.size();
        continue;
      }
    }
    if (columns == 0) {
      if (fields.size() < 2 || fields.size() > 3)
        throw ParseError(lineno, "expected 2 or 3 columns, got " + std::to_string(fields.size()));
      columns = fields.size();
    }
    if (fields.size() != columns)
      throw ParseError(lineno, "expected " + std::to_string(columns) + " columns, got " +
                                   std::to_string(fields.size()));
    const Vec2 p{parse_double(fields[0], lineno), parse_double(fields[1], lineno)};
    if (!is_finite(p)) throw ParseError(lineno, "coordinate is not finite");
    cloud.points.push_back(p);
    if (columns == 3) cloud.labels.push_back(static_cast<int>(parse_integer(fields[2], lineno)));
  }
  if (cloud.points.empty()) throw Error(ErrorCode::EmptyFile, "no data rows");
  return cloud;
}

PointCloud load_point_cloud(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  try {
    return read_point_cloud(in);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path + ": " + e.detail());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::EmptyFile) throw Error(ErrorCode::EmptyFile, path + " has no data rows");
    throw;
  }
}

void write_point_cloud_csv(const std::string& path, const PointCloud& cloud) {
  cloud.validate();
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << (cloud.labeled() ? "x,y,label\n" : "x,y\n");
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    out << format_double(cloud.points[i].x) << ',' << format_double(cloud.points[i].y);
    if (cloud.labeled()) out << ',' << cloud.labels[i];
    out << '\n';
  }
}

SyntheticCohort synthetic_cohort(std::uint64_t seed, const CohortOptions& o) {
  if (o.source_points == 0 || o.target_points < 2)
    throw Error(ErrorCode::InvalidArgument, "cohort needs source points and at least two target points");
  SyntheticCohort c;
  RandomStream src(seed, 0, StreamPurpose::Sampling);
  for (std::size_t i = 0; i < o.source_points; ++i)
    c.source.points.push_back(o.source_mean + o.source_sd * Vec2{src.normal(), src.normal()});

  // Interleaved half circles: the upper one centred at the origin, the lower
  // one shifted to (1, 0.5) and flipped.
  RandomStream tgt(seed, 1, StreamPurpose::Sampling);
  for (std::size_t i = 0; i < o.target_points; ++i) {
    const int r = static_cast<int>(i % 2);
    const double th = std::numbers::pi * tgt.uniform();
    const Vec2 jitter = o.crescent_noise * Vec2{tgt.normal(), tgt.normal()};
    const Vec2 p = r == 0 ? Vec2{std::cos(th), std::sin(th)} : Vec2{1.0 - std::cos(th), 0.5 - std::sin(th)};
    c.target.points.push_back(p + jitter);
    c.target.labels.push_back(r);
  }
  return c;
}

}  // namespace sbtip
