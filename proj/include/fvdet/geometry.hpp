// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <compare>
#include <tuple>

namespace fvdet {

/// Axis-aligned rectangle covering [x, x+w) x [y, y+h) in pixels.
struct Window {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double area() const { return w * h; }
    bool contains(double px, double py) const { return px >= x && px < x + w && py >= y && py < y + h; }
    auto operator<=>(const Window&) const = default;
};

/// Intersection-over-union in pixel area; 0 for disjoint or empty windows.
inline double iou(const Window& a, const Window& b) {
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace fvdet
