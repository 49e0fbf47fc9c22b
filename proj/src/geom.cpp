#include "gasp/geom.hpp"

#include <cmath>

namespace gasp {

namespace {

constexpr double kOrthoTol = 1e-9;

}  // namespace

Pose::Pose(const Mat3& rotation, const Vec3& translation)
    : rotation_(rotation), translation_(translation) {
  const Mat3 gram = rotation_.transpose() * rotation_;
  if (!((gram - Mat3::Identity()).cwiseAbs().maxCoeff() <= kOrthoTol)) {
    throw Error("Pose: rotation is not orthonormal");
  }
  if (!(std::abs(rotation_.determinant() - 1.0) <= kOrthoTol)) {
    throw Error("Pose: rotation determinant is not +1");
  }
  if (!translation_.allFinite()) {
    throw Error("Pose: translation is not finite");
  }
}

Pose Pose::from_yaw(double yaw, const Vec3& translation) {
  return Pose(yaw_matrix(yaw), translation);
}

double Pose::yaw() const { return std::atan2(rotation_(1, 0), rotation_(0, 0)); }

Pose Pose::inverse() const {
  const Mat3 rt = rotation_.transpose();
  return Pose(rt, -(rt * translation_));
}

Eigen::Matrix4d Pose::homogeneous() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

Pose compose(const Pose& a, const Pose& b) {
  return Pose(a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation());
}

Pose inverse(const Pose& pose) { return pose.inverse(); }

Mat3 yaw_matrix(double theta) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  Mat3 r;
  r << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
  return r;
}

Vec3 rotate_about_z(const Vec3& point, double theta) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  return {c * point.x() - s * point.y(), s * point.x() + c * point.y(), point.z()};
}

double wrap_angle(double angle) {
  double a = std::remainder(angle, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

void AugmentConfig::validate() const {
  if (!(theta_min <= theta_max)) throw Error("AugmentConfig: theta_min > theta_max");
  if (!(jitter_tau > 0.0)) throw Error("AugmentConfig: jitter_tau must be positive");
}

}  // namespace gasp
