#pragma once

#include <algorithm>
#include <string>

namespace capsvl {

/// Half-open axis-aligned box [x0, x1) x [y0, y1) in pixel or cell units.
struct BoundingBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool valid() const { return x1 > x0 && y1 > y0; }
  bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  /// Scales both axes, e.g. pixels to grid cells.
  BoundingBox scaled(double sx, double sy) const { return {x0 * sx, y0 * sy, x1 * sx, y1 * sy}; }
  std::string str() const {
    return "(" + std::to_string(x0) + ", " + std::to_string(y0) + ", " + std::to_string(x1) + ", " +
           std::to_string(y1) + ")";
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return w > 0 && h > 0 ? w * h : 0.0;
}

}  // namespace capsvl
