#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "gasp/geom.hpp"

namespace gasp {

/// Class ids used by the simulator. Boxes carry ids >= 1.
inline constexpr int kSkyClass = -1;
inline constexpr int kGroundClass = 0;
inline constexpr int kCarClass = 1;
inline constexpr int kPedestrianClass = 2;
inline constexpr int kBuildingClass = 3;

class OutOfHorizonError : public Error {
 public:
  using Error::Error;
};

struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
};

/// Oriented box (yaw only) translating at constant velocity.
struct Box {
  Vec3 center = Vec3::Zero();  // at t = 0
  double yaw = 0.0;
  Vec3 half_extents = Vec3::Ones();
  Vec3 velocity = Vec3::Zero();
  int class_id = kCarClass;

  Vec3 center_at(double t) const { return center + t * velocity; }
  /// Strict interior test at time t.
  bool contains(const Vec3& p, double t) const;
};

struct EgoKeyframe {
  double time = 0.0;
  Vec3 translation = Vec3::Zero();
  double yaw = 0.0;
};

/// Lidar beam layout: rows are elevations, columns azimuths. Ray index is
/// row * azimuth_count + column.
struct ScanPattern {
  int azimuth_count = 360;
  int elevation_count = 32;
  double azimuth_min = -std::numbers::pi;
  double azimuth_max = std::numbers::pi;
  double elevation_min = deg_to_rad(-25.0);
  double elevation_max = deg_to_rad(10.0);
  double max_range = 40.0;

  int ray_count() const { return azimuth_count * elevation_count; }
  double azimuth(int column) const;
  double elevation(int row) const;
  /// Unit direction in the sensor frame.
  Vec3 direction(int row, int column) const;
  void validate() const;
};

struct Intrinsics {
  int width = 64;
  int height = 40;
  double fx = 32.0;
  double fy = 32.0;
  double cx = 32.0;
  double cy = 20.0;

  void validate() const;
};

/// Sensor placement relative to the ego vehicle frame (x forward, z up).
struct SensorRig {
  Vec3 lidar_offset{0.0, 0.0, 1.8};
  double lidar_yaw = 0.0;
  ScanPattern pattern;
  Vec3 camera_offset{1.5, 0.0, 1.2};
  double camera_yaw = 0.0;
  Intrinsics intrinsics;
  int feature_dim = 32;

  Pose lidar_mount() const { return Pose::from_yaw(lidar_yaw, lidar_offset); }
  /// Maps the optical frame (x right, y down, z forward) into the vehicle frame.
  Pose camera_mount() const;
};

struct Scene {
  double ground_z = 0.0;
  std::vector<Box> boxes;
  std::vector<EgoKeyframe> ego_track;
  Aabb bounds{Vec3(-80.0, -80.0, -5.0), Vec3(80.0, 80.0, 20.0)};
  SensorRig sensors;

  double t_begin() const { return ego_track.front().time; }
  double t_end() const { return ego_track.back().time; }
  bool in_horizon(double t) const { return !ego_track.empty() && t >= t_begin() && t <= t_end(); }
  void validate() const;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  /// Hit point; for misses origin + max_range * direction.
  Vec3 endpoint = Vec3::Zero();
  /// Unit direction of emission.
  Vec3 direction = Vec3::UnitX();
  double time = 0.0;
  bool miss = true;
};

struct LidarScan {
  ScanPattern pattern;
  double time = 0.0;
  std::vector<Ray> rays;

  std::size_t hit_count() const;
};

/// Applies a rigid transform to every ray of a scan.
LidarScan transform_scan(const LidarScan& scan, const Pose& pose);
/// Shifts every time stamp by -t0.
LidarScan retime_scan(const LidarScan& scan, double t0);

struct RayHit {
  bool hit = false;
  double range = std::numeric_limits<double>::infinity();
  int class_id = kSkyClass;
  /// -1 for ground, box index otherwise.
  int surface = -1;
  Vec3 point = Vec3::Zero();
};

/// Nearest intersection of the ray with the ground or any advected box.
/// `direction` must be unit length.
RayHit cast_ray(const Scene& scene, const Vec3& origin, const Vec3& direction, double t,
                double max_range);

/// True iff q is strictly inside a box advected to time t or strictly below
/// the ground plane.
bool occupancy_oracle(const Scene& scene, const Vec3& q, double t);

LidarScan cast_lidar_scan(const Scene& scene, const Pose& sensor_pose, const ScanPattern& pattern,
                          double t, int workers = 1);

Pose ego_pose_at(const Scene& scene, double t);

/// Procedural stand-in for a frozen image feature extractor: per-pixel
/// features plus a depth map rendered from the same ray caster.
struct FeatureImage {
  Intrinsics intrinsics;
  Pose camera_pose;  // optical frame -> world
  double time = 0.0;
  int feature_dim = 0;
  std::vector<double> features;  // row-major (v, u, channel)
  std::vector<double> depth;     // projective depth; +inf for sky
  std::vector<int> class_ids;

  int width() const { return intrinsics.width; }
  int height() const { return intrinsics.height; }
  std::span<const double> feature(int u, int v) const {
    return {features.data() + (static_cast<std::size_t>(v) * width() + u) * feature_dim,
            static_cast<std::size_t>(feature_dim)};
  }
  double depth_at(int u, int v) const { return depth[static_cast<std::size_t>(v) * width() + u]; }
  /// Unnormalized optical-frame ray through the pixel centre (z = 1).
  Vec3 pixel_ray(int u, int v) const;

  struct Projection {
    int u = -1;
    int v = -1;
    double depth = 0.0;
  };
  /// Pinhole projection of a world point; nullopt when behind the camera or
  /// outside the image.
  std::optional<Projection> project(const Vec3& world_point) const;
};

/// L-infinity bound of the smooth spatial perturbation added to prototypes.
inline constexpr double kFeaturePerturbation = 0.1;

/// Class prototype vector of length dim.
std::vector<double> class_prototype(int class_id, int dim);
/// Prototype plus the smooth position-dependent perturbation.
std::vector<double> procedural_feature(int class_id, const Vec3& world_point, int dim);

FeatureImage render_feature_image(const Scene& scene, const Pose& camera_pose,
                                  const Intrinsics& intrinsics, double t, int feature_dim);

}  // namespace gasp
