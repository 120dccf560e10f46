#pragma once

#include <cmath>
#include <vector>

#include "sbtip/grid.hpp"

namespace sbtip::fixtures {

using Polygon = std::vector<Vec2>;

// Sutherland-Hodgman clip of a convex polygon by {p : dot(a, p) <= b}.
inline Polygon clip(const Polygon& poly, Vec2 a, double b) {
  Polygon out;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 p = poly[i], q = poly[(i + 1) % n];
    const double fp = dot(a, p) - b, fq = dot(a, q) - b;
    if (fp <= 0) out.push_back(p);
    if ((fp < 0 && fq > 0) || (fp > 0 && fq < 0)) out.push_back(p + (fp / (fp - fq)) * (q - p));
  }
  return out;
}

inline double area(const Polygon& poly) {
  double s = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 p = poly[i], q = poly[(i + 1) % poly.size()];
    s += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(s);
}

// Exact area of the cell {x in box : score_i(x) >= score_j(x) for all j},
// score_i(x) = <x, y_i> - |y_i|^2 / 2 + h_i, computed geometrically.
inline double power_cell_area(const std::vector<Vec2>& y, const std::vector<double>& h, std::size_t i,
                              double xmin, double xmax, double ymin, double ymax) {
  Polygon cell{{xmin, ymin}, {xmax, ymin}, {xmax, ymax}, {xmin, ymax}};
  for (std::size_t j = 0; j < y.size() && !cell.empty(); ++j) {
    if (j == i) continue;
    // score_j - score_i <= 0  <=>  <x, y_j - y_i> <= |y_j|^2/2 - |y_i|^2/2 + h_i - h_j
    const Vec2 a = y[j] - y[i];
    const double b = 0.5 * (squared_norm(y[j]) - squared_norm(y[i])) + h[i] - h[j];
    cell = clip(cell, a, b);
  }
  return cell.size() < 3 ? 0.0 : area(cell);
}

}  // namespace sbtip::fixtures
