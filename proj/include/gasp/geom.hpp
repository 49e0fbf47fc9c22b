#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <numbers>
#include <stdexcept>
#include <string>

namespace gasp {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

/// Rigid transform x -> R x + t. The rotation is validated on construction.
class Pose {
 public:
  Pose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}
  Pose(const Mat3& rotation, const Vec3& translation);

  static Pose identity() { return Pose(); }
  /// Yaw about +z followed by translation.
  static Pose from_yaw(double yaw, const Vec3& translation);

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  double yaw() const;

  Vec3 apply(const Vec3& point) const { return rotation_ * point + translation_; }
  Vec3 apply_direction(const Vec3& dir) const { return rotation_ * dir; }

  Pose inverse() const;
  Eigen::Matrix4d homogeneous() const;

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

/// Applies b first, then a.
Pose compose(const Pose& a, const Pose& b);

Pose inverse(const Pose& pose);

Vec3 rotate_about_z(const Vec3& point, double theta);

Mat3 yaw_matrix(double theta);

/// Wraps an angle to (-pi, pi].
double wrap_angle(double angle);

/// Rotation and jitter augmentation settings.
struct AugmentConfig {
  double theta_min = deg_to_rad(-20.0);
  double theta_max = deg_to_rad(20.0);
  double jitter_tau = 1.0;
  bool rotation_enabled = true;
  bool jitter_enabled = false;
  // Overrides the random draw when set; used for equivariance checks.
  bool force_theta = false;
  double forced_theta = 0.0;

  void validate() const;
};

}  // namespace gasp
