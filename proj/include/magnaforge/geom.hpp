#pragma once

// Rigid transforms over Eigen types. Quaternions are scalar-first (w, x, y, z),
// Hamilton product, active rotations. World z is up, the ground is z = 0.

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>

namespace magnaforge {

template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar>
using Quat = Eigen::Quaternion<Scalar>;

template <typename Scalar>
struct Pose {
  Vec3<Scalar> position = Vec3<Scalar>::Zero();
  Quat<Scalar> orientation = Quat<Scalar>::Identity();

  Pose() = default;
  Pose(const Vec3<Scalar>& p, const Quat<Scalar>& q) : position(p), orientation(q) {}

  static Pose identity() { return Pose(); }

  Vec3<Scalar> transform_point(const Vec3<Scalar>& p) const { return orientation * p + position; }
  Vec3<Scalar> rotate(const Vec3<Scalar>& v) const { return orientation * v; }
  Mat3<Scalar> rotation() const { return orientation.toRotationMatrix(); }

  // Exact field equality (used by serialization round-trip checks).
  bool operator==(const Pose& other) const {
    return position == other.position && orientation.coeffs() == other.orientation.coeffs();
  }
};

using Vec3d = Vec3<double>;
using Mat3d = Mat3<double>;
using Quatd = Quat<double>;
using Posed = Pose<double>;

template <typename Scalar>
Quat<Scalar> normalized(const Quat<Scalar>& q) {
  Scalar n = q.norm();
  if (!(n > Scalar(0))) return Quat<Scalar>::Identity();
  return Quat<Scalar>(q.w() / n, q.x() / n, q.y() / n, q.z() / n);
}

/// Applies b in a's frame.
template <typename Scalar>
Pose<Scalar> compose(const Pose<Scalar>& a, const Pose<Scalar>& b) {
  return Pose<Scalar>(a.orientation * b.position + a.position, normalized<Scalar>(a.orientation * b.orientation));
}

template <typename Scalar>
Pose<Scalar> inverse(const Pose<Scalar>& p) {
  Quat<Scalar> qi = p.orientation.conjugate();
  return Pose<Scalar>(-(qi * p.position), qi);
}

/// Pose of b expressed in a's frame: compose(a, relative(a, b)) == b.
template <typename Scalar>
Pose<Scalar> relative(const Pose<Scalar>& a, const Pose<Scalar>& b) {
  return compose(inverse(a), b);
}

/// Geodesic angle in [0, pi] between two orientations; q and -q are the same rotation.
template <typename Scalar>
Scalar quat_angle(const Quat<Scalar>& a, const Quat<Scalar>& b) {
  Quat<Scalar> d = a.conjugate() * b;
  Scalar v = d.vec().norm();
  Scalar w = std::abs(d.w());
  return Scalar(2) * std::atan2(v, w);
}

template <typename Scalar>
Quat<Scalar> axis_angle(const Vec3<Scalar>& axis, Scalar angle) {
  return Quat<Scalar>(Eigen::AngleAxis<Scalar>(angle, axis.normalized()));
}

template <typename Scalar>
Quat<Scalar> rot_z(Scalar angle) {
  return Quat<Scalar>(std::cos(angle / 2), 0, 0, std::sin(angle / 2));
}

/// Rotation exp(omega) for a rotation vector omega.
template <typename Scalar>
Quat<Scalar> from_rotation_vector(const Vec3<Scalar>& omega) {
  Scalar theta = omega.norm();
  if (theta < Scalar(1e-12)) return normalized(Quat<Scalar>(1, omega.x() / 2, omega.y() / 2, omega.z() / 2));
  return axis_angle<Scalar>(omega / theta, theta);
}

/// Minimal rotation taking unit vector `from` onto unit vector `to`.
template <typename Scalar>
Quat<Scalar> rotation_between(const Vec3<Scalar>& from, const Vec3<Scalar>& to) {
  return normalized(Quat<Scalar>::FromTwoVectors(from, to));
}

/// Angle in [0, pi] between two vectors.
template <typename Scalar>
Scalar vector_angle(const Vec3<Scalar>& a, const Vec3<Scalar>& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

/// Continuous 6-dim orientation code: the first two columns of the rotation matrix.
template <typename Scalar>
Eigen::Matrix<Scalar, 6, 1> rotation_6d(const Mat3<Scalar>& r) {
  Eigen::Matrix<Scalar, 6, 1> out;
  out << r.col(0), r.col(1);
  return out;
}

template <typename Scalar>
std::array<Scalar, 7> to_array(const Pose<Scalar>& p) {
  return {p.position.x(), p.position.y(), p.position.z(), p.orientation.w(),
          p.orientation.x(), p.orientation.y(), p.orientation.z()};
}

template <typename Scalar>
Pose<Scalar> from_array(const std::array<Scalar, 7>& a) {
  return Pose<Scalar>(Vec3<Scalar>(a[0], a[1], a[2]), Quat<Scalar>(a[3], a[4], a[5], a[6]));
}

}  // namespace magnaforge
