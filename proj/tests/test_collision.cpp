#include <doctest.h>

#include "magnaforge/collision.hpp"

#include <random>

using namespace magnaforge;

namespace {

Obb box(Vec3d c, Vec3d half, double yaw = 0.0) { return make_obb(Posed(c, rot_z(yaw)), half); }

}  // namespace

TEST_CASE("axis-aligned overlap depth is the smallest interval overlap") {
  auto hit = penetration(box({0, 0, 0}, {1, 1, 1}), box({1.5, 0.2, 0}, {1, 1, 1}));
  REQUIRE(hit.has_value());
  CHECK(hit->depth == doctest::Approx(0.5));
  CHECK(hit->normal.isApprox(Vec3d(-1, 0, 0), 1e-12));
  CHECK_FALSE(penetration(box({0, 0, 0}, {1, 1, 1}), box({2.01, 0, 0}, {1, 1, 1})).has_value());
  // touching within tolerance
  CHECK_FALSE(penetration(box({0, 0, 0}, {1, 1, 1}), box({1.9999999, 0, 0}, {1, 1, 1}), 1e-6).has_value());
}

TEST_CASE("rotated box uses its own extent, not the world bounding box") {
  // a 45-degree cube reaches sqrt(2)/2 along x; a neighbor at 0.75 overlaps, at 1.25 does not
  Vec3d h(0.5, 0.5, 0.5);
  CHECK(penetration(box({0, 0, 0}, h, M_PI / 4), box({1.15, 0, 0}, h)).has_value());
  CHECK_FALSE(penetration(box({0, 0, 0}, h, M_PI / 4), box({1.25, 0, 0}, h)).has_value());
  // corner-on-face: bounding boxes overlap but the boxes do not
  CHECK_FALSE(penetration(box({0, 0, 0}, h, M_PI / 4), box({0.95, 0.95, 0}, h)).has_value());
}

TEST_CASE("push-out along the normal separates the boxes") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-0.6, 0.6), y(-M_PI, M_PI);
  Vec3d h(0.3, 0.2, 0.1);
  for (int i = 0; i < 500; ++i) {
    Obb a = box({u(rng), u(rng), u(rng)}, h, y(rng));
    Obb b = box({0, 0, 0}, h, y(rng));
    auto hit = penetration(a, b);
    if (!hit) continue;
    a.center += hit->normal * (hit->depth + 1e-9);
    auto after = penetration(a, b, 1e-7);
    CHECK_FALSE(after.has_value());
  }
}

TEST_CASE("lowest point of a tilted box") {
  Obb b = make_obb(Posed(Vec3d(0, 0, 1), axis_angle<double>(Vec3d::UnitX(), M_PI / 4)), Vec3d(1, 1, 1));
  CHECK(lowest_point(b) == doctest::Approx(1.0 - std::sqrt(2.0)));
}

TEST_CASE("drop distance onto a box below") {
  Vec3d h(0.05, 0.05, 0.05);
  auto d = drop_distance(box({0, 0, 0.5}, h), box({0.02, 0, 0.05}, h));
  REQUIRE(d.has_value());
  CHECK(*d == doctest::Approx(0.35));
  // beside, not below
  CHECK_FALSE(drop_distance(box({0.2, 0, 0.5}, h), box({0, 0, 0.05}, h)).has_value());
  // exactly side by side: a side contact does not hold a block up
  CHECK_FALSE(drop_distance(box({0.1, 0, 0.5}, h), box({0, 0, 0.05}, h)).has_value());
  // box above the falling one never blocks it
  CHECK_FALSE(drop_distance(box({0, 0, 0.05}, h), box({0, 0, 0.5}, h)).has_value());
  // resting contact
  auto rest = drop_distance(box({0, 0, 0.15}, h), box({0, 0, 0.05}, h));
  REQUIRE(rest.has_value());
  CHECK(*rest == doctest::Approx(0.0).epsilon(1e-8));
}
