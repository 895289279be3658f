#pragma once

#include "magnaforge/geom.hpp"

#include <optional>

namespace magnaforge {

/// Oriented box: center, rotation (columns are the box axes), half extents.
struct Obb {
  Vec3d center;
  Mat3d axes;
  Vec3d half;
};

inline Obb make_obb(const Posed& pose, const Vec3d& half) { return {pose.position, pose.rotation(), half}; }

struct Contact {
  double depth = 0.0;
  Vec3d normal = Vec3d::UnitZ();  // moving `a` along normal by depth separates it from `b`
};

/// Separating-axis test; returns the minimal push-out when overlap exceeds `tolerance`.
std::optional<Contact> penetration(const Obb& a, const Obb& b, double tolerance = 0.0);

double lowest_point(const Obb& box);

/// Distance `a` may fall straight down before touching `b`; nullopt if it never does.
std::optional<double> drop_distance(const Obb& a, const Obb& b);

}  // namespace magnaforge
