#include "magnaforge/collision.hpp"

#include <array>
#include <limits>

namespace magnaforge {
namespace {

struct Axes {
  std::array<Vec3d, 15> axis;
  int count = 0;
  int faces = 0;
};

Axes candidate_axes(const Obb& a, const Obb& b) {
  Axes out;
  for (int i = 0; i < 3; ++i) out.axis[out.count++] = a.axes.col(i);
  for (int i = 0; i < 3; ++i) out.axis[out.count++] = b.axes.col(i);
  out.faces = out.count;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      Vec3d c = a.axes.col(i).cross(b.axes.col(j));
      double n = c.norm();
      if (n > 1e-9) out.axis[out.count++] = c / n;
    }
  }
  return out;
}

double radius(const Obb& box, const Vec3d& axis) {
  return box.half.x() * std::abs(box.axes.col(0).dot(axis)) + box.half.y() * std::abs(box.axes.col(1).dot(axis)) +
         box.half.z() * std::abs(box.axes.col(2).dot(axis));
}

}  // namespace

std::optional<Contact> penetration(const Obb& a, const Obb& b, double tolerance) {
  const Axes axes = candidate_axes(a, b);
  const Vec3d delta = b.center - a.center;
  Contact best;
  best.depth = std::numeric_limits<double>::infinity();
  for (int k = 0; k < axes.count; ++k) {
    const Vec3d& l = axes.axis[k];
    double d = delta.dot(l);
    double overlap = radius(a, l) + radius(b, l) - std::abs(d);
    if (overlap <= tolerance) return std::nullopt;
    // edge axes only win by a clear margin; face axes give stable push directions
    double margin = k < axes.faces ? 0.0 : 1e-9;
    if (overlap + margin < best.depth) {
      best.depth = overlap;
      best.normal = d > 0 ? Vec3d(-l) : l;
    }
  }
  return best;
}

double lowest_point(const Obb& box) { return box.center.z() - radius(box, Vec3d::UnitZ()); }

std::optional<double> drop_distance(const Obb& a, const Obb& b) {
  const Axes axes = candidate_axes(a, b);
  const Vec3d delta = b.center - a.center;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  for (int k = 0; k < axes.count; ++k) {
    const Vec3d& l = axes.axis[k];
    // exact side contact does not block the fall
    double r = radius(a, l) + radius(b, l) - 1e-9;
    double d0 = delta.dot(l);
    double s = l.z();
    if (std::abs(s) < 1e-12) {
      if (std::abs(d0) >= r) return std::nullopt;
      continue;
    }
    // overlap while -r < d0 + t*s < r
    double t1 = (-r - d0) / s;
    double t2 = (r - d0) / s;
    if (t1 > t2) std::swap(t1, t2);
    lo = std::max(lo, t1);
    hi = std::min(hi, t2);
    if (lo >= hi) return std::nullopt;
  }
  if (hi <= 0.0) return std::nullopt;
  return std::max(lo, 0.0);
}

}  // namespace magnaforge
