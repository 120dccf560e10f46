#include "sbtip/grid.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "sbtip/error.hpp"
#include "sbtip/text.hpp"

namespace sbtip {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Row sums below this fall back to an exact per-row log-sum-exp.
constexpr double kUnderflowGuard = 1e-250;
constexpr double kKdeCutoffSigmas = 12.0;

void require_same_grid(const Grid2D& a, const Grid2D& b) {
  if (!(a == b)) throw Error(ErrorCode::GridMismatch, "fields live on different grids");
}

}  // namespace

Grid2D::Grid2D(double xmin, double xmax, double ymin, double ymax, int nx, int ny)
    : xmin_(xmin), xmax_(xmax), ymin_(ymin), ymax_(ymax), nx_(nx), ny_(ny) {
  if (!(std::isfinite(xmin) && std::isfinite(xmax) && std::isfinite(ymin) && std::isfinite(ymax)))
    throw Error(ErrorCode::InvalidArgument, "grid extent must be finite");
  if (!(xmax > xmin) || !(ymax > ymin))
    throw Error(ErrorCode::InvalidArgument, "grid extent must have xmax > xmin and ymax > ymin");
  if (nx < 2 || ny < 1)
    throw Error(ErrorCode::InvalidArgument, "grid needs nx >= 2 and ny >= 1");
  dx_ = (xmax - xmin) / nx;
  dy_ = (ymax - ymin) / ny;
}

bool Grid2D::contains(Vec2 p) const {
  return p.x >= xmin_ && p.x <= xmax_ && p.y >= ymin_ && p.y <= ymax_;
}

std::optional<std::size_t> Grid2D::locate(Vec2 p) const {
  if (!contains(p)) return std::nullopt;
  const int ix = std::min(nx_ - 1, static_cast<int>((p.x - xmin_) / dx_));
  const int iy = std::min(ny_ - 1, static_cast<int>((p.y - ymin_) / dy_));
  return index(ix, iy);
}

DensityField::DensityField(Grid2D grid, std::vector<double> mass)
    : grid_(grid), mass_(std::move(mass)) {
  if (mass_.size() != grid_.cells())
    throw Error(ErrorCode::GridMismatch, "mass vector size does not match grid");
  for (double m : mass_)
    if (!(m >= 0.0) || !std::isfinite(m))
      throw Error(ErrorCode::InvalidArgument, "cell masses must be finite and nonnegative");
}

DensityField DensityField::zeros(const Grid2D& grid) {
  return DensityField(grid, std::vector<double>(grid.cells(), 0.0));
}

double DensityField::total() const { return std::accumulate(mass_.begin(), mass_.end(), 0.0); }

Vec2 DensityField::mean() const {
  Vec2 m;
  double z = 0.0;
  for (std::size_t c = 0; c < mass_.size(); ++c) {
    m += mass_[c] * grid_.center(c);
    z += mass_[c];
  }
  if (z <= kZeroMassFloor) throw Error(ErrorCode::ZeroMass, "mean of an empty field");
  return (1.0 / z) * m;
}

Vec2 DensityField::variance() const {
  const Vec2 m = mean();
  Vec2 v;
  double z = 0.0;
  for (std::size_t c = 0; c < mass_.size(); ++c) {
    const Vec2 d = grid_.center(c) - m;
    v += mass_[c] * hadamard(d, d);
    z += mass_[c];
  }
  return (1.0 / z) * v;
}

VectorField::VectorField(Grid2D grid, std::vector<double> vx, std::vector<double> vy)
    : grid_(grid), vx_(std::move(vx)), vy_(std::move(vy)) {
  if (vx_.size() != grid_.cells() || vy_.size() != grid_.cells())
    throw Error(ErrorCode::GridMismatch, "vector field size does not match grid");
  for (std::size_t c = 0; c < vx_.size(); ++c)
    if (!std::isfinite(vx_[c]) || !std::isfinite(vy_[c]))
      throw Error(ErrorCode::InvalidArgument, "vector field must be finite");
}

VectorField VectorField::zeros(const Grid2D& grid) {
  return VectorField(grid, std::vector<double>(grid.cells(), 0.0),
                     std::vector<double>(grid.cells(), 0.0));
}

namespace {

// Fractional cell-center coordinate clamped to [0, n-1].
void bracket(double pos, int n, int& i0, int& i1, double& w) {
  if (n == 1 || pos <= 0.0) {
    i0 = i1 = 0;
    w = 0.0;
    return;
  }
  if (pos >= n - 1) {
    i0 = i1 = n - 1;
    w = 0.0;
    return;
  }
  i0 = static_cast<int>(pos);
  i1 = i0 + 1;
  w = pos - i0;
}

}  // namespace

Vec2 VectorField::interpolate(Vec2 p) const {
  int x0, x1, y0, y1;
  double wx, wy;
  bracket((p.x - grid_.xmin()) / grid_.dx() - 0.5, grid_.nx(), x0, x1, wx);
  bracket((p.y - grid_.ymin()) / grid_.dy() - 0.5, grid_.ny(), y0, y1, wy);
  const auto at = [&](int ix, int iy) { return (*this)[grid_.index(ix, iy)]; };
  return (1 - wy) * ((1 - wx) * at(x0, y0) + wx * at(x1, y0)) +
         wy * ((1 - wx) * at(x0, y1) + wx * at(x1, y1));
}

KernelMatrix::KernelMatrix(Grid2D grid, std::vector<std::size_t> row_offsets,
                           std::vector<std::uint32_t> cols, std::vector<double> values,
                           int radius_x, int radius_y, double truncation_sigmas)
    : grid_(grid),
      offsets_(std::move(row_offsets)),
      cols_(std::move(cols)),
      values_(std::move(values)),
      radius_x_(radius_x),
      radius_y_(radius_y),
      truncation_sigmas_(truncation_sigmas) {
  const std::size_t n = grid_.cells();
  if (offsets_.size() != n + 1 || offsets_.front() != 0 || offsets_.back() != cols_.size() ||
      cols_.size() != values_.size())
    throw Error(ErrorCode::InvalidArgument, "malformed CSR kernel");
  for (std::size_t k = 0; k < cols_.size(); ++k)
    if (cols_[k] >= n || !(values_[k] >= 0.0) || !std::isfinite(values_[k]))
      throw Error(ErrorCode::InvalidArgument, "kernel entry out of range");

  std::vector<std::size_t> count(n + 1, 0);
  for (auto c : cols_) ++count[c + 1];
  std::partial_sum(count.begin(), count.end(), count.begin());
  t_offsets_ = count;
  t_cols_.resize(cols_.size());
  t_values_.resize(values_.size());
  std::vector<std::size_t> fill(count.begin(), count.end() - 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = offsets_[i]; k < offsets_[i + 1]; ++k) {
      const std::size_t pos = fill[cols_[k]]++;
      t_cols_[pos] = static_cast<std::uint32_t>(i);
      t_values_[pos] = values_[k];
    }
  }
}

std::span<const std::uint32_t> KernelMatrix::row_cols(std::size_t row) const {
  return {cols_.data() + offsets_[row], offsets_[row + 1] - offsets_[row]};
}

std::span<const double> KernelMatrix::row_values(std::size_t row) const {
  return {values_.data() + offsets_[row], offsets_[row + 1] - offsets_[row]};
}

double KernelMatrix::entry(std::size_t row, std::size_t col) const {
  const auto c = row_cols(row);
  const auto it = std::lower_bound(c.begin(), c.end(), static_cast<std::uint32_t>(col));
  if (it == c.end() || *it != col) return 0.0;
  return values_[offsets_[row] + (it - c.begin())];
}

DensityField KernelMatrix::push_forward(const DensityField& p) const {
  require_same_grid(grid_, p.grid());
  std::vector<double> out(rows(), 0.0);
  const auto m = p.mass();
  for (std::size_t i = 0; i < rows(); ++i) {
    if (m[i] == 0.0) continue;
    for (std::size_t k = offsets_[i]; k < offsets_[i + 1]; ++k) out[cols_[k]] += values_[k] * m[i];
  }
  return DensityField(grid_, std::move(out));
}

std::vector<double> KernelMatrix::log_apply(const std::vector<std::size_t>& offsets,
                                            const std::vector<std::uint32_t>& cols,
                                            const std::vector<double>& values,
                                            std::span<const double> log_values) {
  const std::size_t n = offsets.size() - 1;
  if (log_values.size() != n) throw Error(ErrorCode::GridMismatch, "log vector size mismatch");
  double shift = kNegInf;
  for (double l : log_values) shift = std::max(shift, l);
  std::vector<double> out(n, kNegInf);
  if (shift == kNegInf) return out;
  std::vector<double> e(n);
  for (std::size_t j = 0; j < n; ++j) e[j] = std::exp(log_values[j] - shift);

  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k) s += values[k] * e[cols[k]];
    if (s >= kUnderflowGuard) {
      out[i] = shift + std::log(s);
      continue;
    }
    double row_max = kNegInf;
    for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k)
      if (values[k] > 0.0) row_max = std::max(row_max, std::log(values[k]) + log_values[cols[k]]);
    if (row_max == kNegInf) continue;
    double acc = 0.0;
    for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k)
      if (values[k] > 0.0) acc += std::exp(std::log(values[k]) + log_values[cols[k]] - row_max);
    out[i] = row_max + std::log(acc);
  }
  return out;
}

std::vector<double> KernelMatrix::log_expectation(std::span<const double> log_values) const {
  return log_apply(offsets_, cols_, values_, log_values);
}

std::vector<double> KernelMatrix::log_push(std::span<const double> log_values) const {
  return log_apply(t_offsets_, t_cols_, t_values_, log_values);
}

Vec2 silverman_bandwidth(std::span<const Vec2> points) {
  const std::size_t n = points.size();
  if (n < 2) return {0.0, 0.0};
  Vec2 mean;
  for (const auto& p : points) mean += p;
  mean = (1.0 / n) * mean;
  Vec2 var;
  for (const auto& p : points) {
    const Vec2 d = p - mean;
    var += hadamard(d, d);
  }
  var = (1.0 / (n - 1)) * var;
  // Two-dimensional rule of thumb: (4 / (d + 2))^(1/(d+4)) n^(-1/(d+4)) with d = 2.
  const double factor = std::pow(static_cast<double>(n), -1.0 / 6.0);
  return {factor * std::sqrt(var.x), factor * std::sqrt(var.y)};
}

namespace {

// Per-axis weights of one sample over cell centers: a delta at the sample's
// cell when the bandwidth is zero, a truncated Gaussian otherwise.
void axis_weights(double p, double lo, double d, int n, double b, int& first,
                  std::vector<double>& w) {
  w.clear();
  // A single-cell axis carries no resolution to smooth over.
  if (b == 0.0 || n == 1) {
    first = std::min(n - 1, static_cast<int>((p - lo) / d));
    w.push_back(1.0);
    return;
  }
  const double reach = kKdeCutoffSigmas * b;
  first = std::max(0, static_cast<int>(std::floor((p - reach - lo) / d - 0.5)));
  const int last = std::min(n - 1, static_cast<int>(std::ceil((p + reach - lo) / d - 0.5)));
  for (int i = first; i <= last; ++i) {
    const double z = (lo + (i + 0.5) * d - p) / b;
    w.push_back(std::exp(-0.5 * z * z));
  }
}

}  // namespace

DensityField density_from_samples(std::span<const Vec2> points, const Grid2D& grid,
                                  Vec2 bandwidth, SampleReport* report) {
  if (!(bandwidth.x >= 0.0) || !(bandwidth.y >= 0.0) || !is_finite(bandwidth))
    throw Error(ErrorCode::InvalidBandwidth, "bandwidth must be finite and nonnegative");
  std::vector<double> mass(grid.cells(), 0.0);
  std::size_t used = 0;
  std::vector<double> wx, wy;
  for (const auto& p : points) {
    if (!is_finite(p) || !grid.contains(p)) continue;
    ++used;
    int fx, fy;
    axis_weights(p.x, grid.xmin(), grid.dx(), grid.nx(), bandwidth.x, fx, wx);
    axis_weights(p.y, grid.ymin(), grid.dy(), grid.ny(), bandwidth.y, fy, wy);
    for (std::size_t a = 0; a < wy.size(); ++a) {
      double* row = mass.data() + grid.index(fx, fy + static_cast<int>(a));
      for (std::size_t b = 0; b < wx.size(); ++b) row[b] += wy[a] * wx[b];
    }
  }
  if (report) {
    report->used = used;
    report->rejected = points.size() - used;
    report->bandwidth = bandwidth;
  }
  if (used == 0) throw Error(ErrorCode::EmptyInput, "no sample points inside the grid extent");
  return normalize(DensityField(grid, std::move(mass)));
}

DensityField density_from_samples(std::span<const Vec2> points, const Grid2D& grid,
                                  double bandwidth, SampleReport* report) {
  if (bandwidth == kSilvermanBandwidth) {
    std::vector<Vec2> inside;
    for (const auto& p : points)
      if (is_finite(p) && grid.contains(p)) inside.push_back(p);
    const Vec2 b = silverman_bandwidth(inside);
    return density_from_samples(points, grid, b, report);
  }
  if (!(bandwidth >= 0.0) || !std::isfinite(bandwidth))
    throw Error(ErrorCode::InvalidBandwidth,
                "bandwidth must be >= 0 (or the Silverman sentinel -1)");
  return density_from_samples(points, grid, Vec2{bandwidth, bandwidth}, report);
}

DensityField normalize(const DensityField& f) {
  const double z = f.total();
  if (!(z > kZeroMassFloor)) throw Error(ErrorCode::ZeroMass, "total mass is zero");
  std::vector<double> m(f.mass().begin(), f.mass().end());
  for (double& v : m) v /= z;
  return DensityField(f.grid(), std::move(m));
}

namespace {

template <typename Diff>
VectorField stencil(const Grid2D& g, Diff diff) {
  std::vector<double> vx(g.cells(), 0.0), vy(g.cells(), 0.0);
  const int nx = g.nx(), ny = g.ny();
  for (int iy = 0; iy < ny; ++iy) {
    for (int ix = 0; ix < nx; ++ix) {
      const std::size_t c = g.index(ix, iy);
      const int xl = std::max(0, ix - 1), xr = std::min(nx - 1, ix + 1);
      vx[c] = diff(g.index(xr, iy), g.index(xl, iy)) / ((xr - xl) * g.dx());
      if (ny > 1) {
        const int yl = std::max(0, iy - 1), yr = std::min(ny - 1, iy + 1);
        vy[c] = diff(g.index(ix, yr), g.index(ix, yl)) / ((yr - yl) * g.dy());
      }
    }
  }
  return VectorField(g, std::move(vx), std::move(vy));
}

}  // namespace

VectorField grad_log(const DensityField& f, double floor) {
  if (!(floor > 0.0)) throw Error(ErrorCode::InvalidArgument, "log floor must be positive");
  const auto m = f.mass();
  return stencil(f.grid(), [&](std::size_t hi, std::size_t lo) {
    return std::log(std::max(m[hi], floor) / std::max(m[lo], floor));
  });
}

VectorField grad_of_log_values(const Grid2D& grid, std::span<const double> log_values,
                               double log_floor) {
  if (log_values.size() != grid.cells())
    throw Error(ErrorCode::GridMismatch, "log vector size does not match grid");
  return stencil(grid, [&](std::size_t hi, std::size_t lo) {
    return std::max(log_values[hi], log_floor) - std::max(log_values[lo], log_floor);
  });
}

double kl_divergence(const DensityField& p, const DensityField& q) {
  require_same_grid(p.grid(), q.grid());
  const double zp = p.total(), zq = q.total();
  if (!(zp > kZeroMassFloor) || !(zq > kZeroMassFloor))
    throw Error(ErrorCode::ZeroMass, "KL divergence of an empty field");
  double kl = 0.0;
  for (std::size_t c = 0; c < p.mass().size(); ++c) {
    const double a = p[c] / zp;
    if (a == 0.0) continue;
    const double b = q[c] / zq;
    if (b < kZeroMassFloor) return std::numeric_limits<double>::infinity();
    kl += a * std::log(a / b);
  }
  return std::max(kl, 0.0);
}

double l1_distance(const DensityField& p, const DensityField& q) {
  require_same_grid(p.grid(), q.grid());
  double s = 0.0;
  for (std::size_t c = 0; c < p.mass().size(); ++c) s += std::abs(p[c] - q[c]);
  return s;
}

double entropy(const DensityField& p) {
  double h = 0.0;
  for (double m : p.mass())
    if (m > 0.0) h -= m * std::log(m);
  return h;
}

void write_density_csv(std::ostream& out, const DensityField& f) {
  const Grid2D& g = f.grid();
  out << g.nx() << ',' << g.ny() << ',' << format_double(g.xmin()) << ','
      << format_double(g.xmax()) << ',' << format_double(g.ymin()) << ','
      << format_double(g.ymax()) << '\n';
  for (int iy = 0; iy < g.ny(); ++iy) {
    for (int ix = 0; ix < g.nx(); ++ix) {
      if (ix) out << ',';
      out << format_double(f.at(ix, iy));
    }
    out << '\n';
  }
}

void write_density_csv(const std::string& path, const DensityField& f) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  write_density_csv(out, f);
  if (!out) throw Error(ErrorCode::IoError, "write to " + path + " failed");
}

DensityField read_density_csv(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  if (!next_nonblank_line(in, line, lineno)) throw Error(ErrorCode::EmptyFile, "density CSV is empty");
  const auto head = split_csv_doubles(line, lineno);
  if (head.size() != 6) throw ParseError(lineno, "header must be nx,ny,xmin,xmax,ymin,ymax");
  const auto as_count = [&](double v) {
    if (v != std::floor(v) || v < 1 || v > 1e8) throw ParseError(lineno, "bad cell count");
    return static_cast<int>(v);
  };
  const Grid2D grid(head[2], head[3], head[4], head[5], as_count(head[0]), as_count(head[1]));
  std::vector<double> mass;
  mass.reserve(grid.cells());
  for (int iy = 0; iy < grid.ny(); ++iy) {
    if (!next_nonblank_line(in, line, lineno))
      throw ParseError(lineno, "expected " + std::to_string(grid.ny()) + " rows of masses");
    const auto row = split_csv_doubles(line, lineno);
    if (row.size() != static_cast<std::size_t>(grid.nx()))
      throw ParseError(lineno, "expected " + std::to_string(grid.nx()) + " values per row");
    for (double v : row) {
      if (!(v >= 0.0)) throw ParseError(lineno, "negative mass");
      mass.push_back(v);
    }
  }
  if (next_nonblank_line(in, line, lineno)) throw ParseError(lineno, "trailing data after masses");
  return DensityField(grid, std::move(mass));
}

DensityField read_density_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return read_density_csv(in);
}

void write_density_pgm(std::ostream& out, const DensityField& f) {
  const Grid2D& g = f.grid();
  const auto [lo, hi] = std::minmax_element(f.mass().begin(), f.mass().end());
  const double span = *hi - *lo;
  out << "P2\n" << g.nx() << ' ' << g.ny() << "\n255\n";
  for (int iy = g.ny() - 1; iy >= 0; --iy) {
    for (int ix = 0; ix < g.nx(); ++ix) {
      const int level =
          span > 0.0 ? static_cast<int>(std::lround(255.0 * (f.at(ix, iy) - *lo) / span)) : 0;
      if (ix) out << ' ';
      out << level;
    }
    out << '\n';
  }
}

void write_density_pgm(const std::string& path, const DensityField& f) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  write_density_pgm(out, f);
}

void write_vector_field_csv(const std::string& path, const VectorField& v) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "x,y,vx,vy\n";
  for (std::size_t c = 0; c < v.grid().cells(); ++c) {
    const Vec2 p = v.grid().center(c);
    out << format_double(p.x) << ',' << format_double(p.y) << ',' << format_double(v.vx()[c])
        << ',' << format_double(v.vy()[c]) << '\n';
  }
}

}  // namespace sbtip
