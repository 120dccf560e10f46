#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sbtip {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend constexpr Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend constexpr Vec2 operator*(Vec2 a, double s) { return {s * a.x, s * a.y}; }
  friend constexpr bool operator==(Vec2 a, Vec2 b) = default;
  constexpr Vec2& operator+=(Vec2 b) {
    x += b.x;
    y += b.y;
    return *this;
  }
};

inline constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline constexpr double squared_norm(Vec2 a) { return a.x * a.x + a.y * a.y; }
inline constexpr Vec2 hadamard(Vec2 a, Vec2 b) { return {a.x * b.x, a.y * b.y}; }
inline bool is_finite(Vec2 a) { return std::isfinite(a.x) && std::isfinite(a.y); }

/// Row-major 2x2 matrix.
struct Mat2 {
  double xx = 0.0, xy = 0.0;
  double yx = 0.0, yy = 0.0;

  constexpr Vec2 operator*(Vec2 v) const { return {xx * v.x + xy * v.y, yx * v.x + yy * v.y}; }
  constexpr Mat2 transposed() const { return {xx, yx, xy, yy}; }
  constexpr double trace() const { return xx + yy; }
  constexpr double det() const { return xx * yy - xy * yx; }
};

/// Cell-centered rectangular grid. Cell (ix, iy) has linear index
/// iy * nx + ix (row-major, y increasing). A single row (ny == 1) is
/// allowed and represents a one-dimensional state space along x.
class Grid2D {
 public:
  Grid2D(double xmin, double xmax, double ymin, double ymax, int nx, int ny);

  double xmin() const { return xmin_; }
  double xmax() const { return xmax_; }
  double ymin() const { return ymin_; }
  double ymax() const { return ymax_; }
  int nx() const { return nx_; }
  int ny() const { return ny_; }
  double dx() const { return dx_; }
  double dy() const { return dy_; }
  std::size_t cells() const { return static_cast<std::size_t>(nx_) * ny_; }
  bool is_one_dimensional() const { return ny_ == 1; }

  std::size_t index(int ix, int iy) const {
    return static_cast<std::size_t>(iy) * nx_ + ix;
  }
  int ix_of(std::size_t cell) const { return static_cast<int>(cell % nx_); }
  int iy_of(std::size_t cell) const { return static_cast<int>(cell / nx_); }
  double x_center(int ix) const { return xmin_ + (ix + 0.5) * dx_; }
  double y_center(int iy) const { return ymin_ + (iy + 0.5) * dy_; }
  Vec2 center(int ix, int iy) const { return {x_center(ix), y_center(iy)}; }
  Vec2 center(std::size_t cell) const { return center(ix_of(cell), iy_of(cell)); }

  bool contains(Vec2 p) const;
  /// Cell holding p; points on the upper edges belong to the last cell.
  std::optional<std::size_t> locate(Vec2 p) const;

  friend bool operator==(const Grid2D&, const Grid2D&) = default;

 private:
  double xmin_, xmax_, ymin_, ymax_;
  int nx_, ny_;
  double dx_, dy_;
};

/// Nonnegative probability mass per cell (masses, not per-area values).
class DensityField {
 public:
  DensityField(Grid2D grid, std::vector<double> mass);
  static DensityField zeros(const Grid2D& grid);

  const Grid2D& grid() const { return grid_; }
  std::span<const double> mass() const { return mass_; }
  double operator[](std::size_t cell) const { return mass_[cell]; }
  double at(int ix, int iy) const { return mass_[grid_.index(ix, iy)]; }
  double total() const;
  Vec2 mean() const;
  Vec2 variance() const;

 private:
  Grid2D grid_;
  std::vector<double> mass_;
};

/// Per-cell vector field, e.g. a drift or control in state units per time.
class VectorField {
 public:
  VectorField(Grid2D grid, std::vector<double> vx, std::vector<double> vy);
  static VectorField zeros(const Grid2D& grid);

  const Grid2D& grid() const { return grid_; }
  std::span<const double> vx() const { return vx_; }
  std::span<const double> vy() const { return vy_; }
  Vec2 operator[](std::size_t cell) const { return {vx_[cell], vy_[cell]}; }
  /// Bilinear interpolation between cell centers; constant extension
  /// beyond the outermost centers.
  Vec2 interpolate(Vec2 p) const;

 private:
  Grid2D grid_;
  std::vector<double> vx_, vy_;
};

/// Sparse row-stochastic transition matrix between cells of one grid,
/// stored in CSR form together with its transpose.
class KernelMatrix {
 public:
  KernelMatrix(Grid2D grid, std::vector<std::size_t> row_offsets, std::vector<std::uint32_t> cols,
               std::vector<double> values, int radius_x, int radius_y, double truncation_sigmas);

  const Grid2D& grid() const { return grid_; }
  std::size_t rows() const { return grid_.cells(); }
  std::size_t nonzeros() const { return values_.size(); }
  int radius_x() const { return radius_x_; }
  int radius_y() const { return radius_y_; }
  double truncation_sigmas() const { return truncation_sigmas_; }

  std::span<const std::uint32_t> row_cols(std::size_t row) const;
  std::span<const double> row_values(std::size_t row) const;
  double entry(std::size_t row, std::size_t col) const;

  /// out[j] = sum_i K[i,j] p[i] (push a distribution one step forward).
  DensityField push_forward(const DensityField& p) const;
  /// out[i] = log sum_j K[i,j] exp(l[j]) (row-wise expectation, log domain).
  std::vector<double> log_expectation(std::span<const double> log_values) const;
  /// out[j] = log sum_i K[i,j] exp(l[i]) (adjoint, log domain).
  std::vector<double> log_push(std::span<const double> log_values) const;

 private:
  static std::vector<double> log_apply(const std::vector<std::size_t>& offsets,
                                       const std::vector<std::uint32_t>& cols,
                                       const std::vector<double>& values,
                                       std::span<const double> log_values);

  Grid2D grid_;
  std::vector<std::size_t> offsets_;
  std::vector<std::uint32_t> cols_;
  std::vector<double> values_;
  std::vector<std::size_t> t_offsets_;
  std::vector<std::uint32_t> t_cols_;
  std::vector<double> t_values_;
  int radius_x_, radius_y_;
  double truncation_sigmas_;
};

inline constexpr double kDefaultLogFloor = 1e-30;
inline constexpr double kZeroMassFloor = 1e-300;

/// Bandwidth value that selects Silverman's rule per axis.
inline constexpr double kSilvermanBandwidth = -1.0;

struct SampleReport {
  std::size_t used = 0;
  std::size_t rejected = 0;
  Vec2 bandwidth;
};

/// Histogram (bandwidth 0) or isotropic Gaussian KDE at cell centers,
/// normalized to unit mass. kSilvermanBandwidth (-1) selects Silverman's
/// rule per axis; other negative values are rejected.
DensityField density_from_samples(std::span<const Vec2> points, const Grid2D& grid,
                                  double bandwidth, SampleReport* report = nullptr);
/// Axis-aligned Gaussian KDE with one bandwidth per axis. An axis with a
/// single cell is always binned.
DensityField density_from_samples(std::span<const Vec2> points, const Grid2D& grid,
                                  Vec2 bandwidth, SampleReport* report = nullptr);
Vec2 silverman_bandwidth(std::span<const Vec2> points);

DensityField normalize(const DensityField& f);

/// Discrete gradient of ln max(f, floor): central differences inside,
/// one-sided at the boundary. Computed from ratios so a uniform rescaling
/// by a power of two leaves the result bit-identical.
VectorField grad_log(const DensityField& f, double floor = kDefaultLogFloor);
/// Same stencil applied to values already in the log domain; entries below
/// log_floor (including -inf) are clamped to it.
VectorField grad_of_log_values(const Grid2D& grid, std::span<const double> log_values,
                               double log_floor = std::log(kDefaultLogFloor));

/// sum p ln(p/q) over cells with p > 0; +inf when q vanishes there.
double kl_divergence(const DensityField& p, const DensityField& q);
double l1_distance(const DensityField& p, const DensityField& q);
/// Shannon entropy -sum p ln p of the cell masses.
double entropy(const DensityField& p);

void write_density_csv(std::ostream& out, const DensityField& f);
void write_density_csv(const std::string& path, const DensityField& f);
DensityField read_density_csv(std::istream& in);
DensityField read_density_csv(const std::string& path);
/// 8-bit P2 PGM, linear min->0, max->255, top image row = largest y.
void write_density_pgm(std::ostream& out, const DensityField& f);
void write_density_pgm(const std::string& path, const DensityField& f);
/// Columns x,y,vx,vy, one row per cell.
void write_vector_field_csv(const std::string& path, const VectorField& v);

}  // namespace sbtip
