#include "gasp/scene.hpp"

#include <algorithm>
#include <cmath>

#include "gasp/parallel.hpp"
#include "gasp/rng.hpp"

namespace gasp {

namespace {

// Slab test in the box frame. Returns the entry distance along a unit ray
// when the origin is outside the box and the ray enters it.
std::optional<double> ray_box_entry(const Box& box, const Vec3& origin, const Vec3& dir, double t) {
  const Mat3 r_inv = yaw_matrix(-box.yaw);
  const Vec3 o = r_inv * (origin - box.center_at(t));
  const Vec3 d = r_inv * dir;
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double h = box.half_extents[a];
    if (d[a] == 0.0) {
      if (o[a] <= -h || o[a] >= h) return std::nullopt;
      continue;
    }
    double t0 = (-h - o[a]) / d[a];
    double t1 = (h - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
  }
  if (!(t_near < t_far) || !(t_near > 0.0)) return std::nullopt;
  return t_near;
}

constexpr std::uint64_t kFeatureSeed = 0x5eed'f00d'cafe'0001ull;

}  // namespace

bool Box::contains(const Vec3& p, double t) const {
  const Vec3 local = yaw_matrix(-yaw) * (p - center_at(t));
  return std::abs(local.x()) < half_extents.x() && std::abs(local.y()) < half_extents.y() &&
         std::abs(local.z()) < half_extents.z();
}

double ScanPattern::azimuth(int column) const {
  return azimuth_min + (azimuth_max - azimuth_min) * column / azimuth_count;
}

double ScanPattern::elevation(int row) const {
  if (elevation_count == 1) return elevation_min;
  return elevation_min + (elevation_max - elevation_min) * row / (elevation_count - 1);
}

Vec3 ScanPattern::direction(int row, int column) const {
  const double az = azimuth(column);
  const double el = elevation(row);
  return Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)).normalized();
}

void ScanPattern::validate() const {
  if (azimuth_count < 1 || elevation_count < 1) throw Error("ScanPattern: counts must be >= 1");
  if (!(max_range > 0.0)) throw Error("ScanPattern: max_range must be positive");
}

void Intrinsics::validate() const {
  if (width < 1 || height < 1) throw Error("Intrinsics: image size must be positive");
  if (!(fx > 0.0) || !(fy > 0.0)) throw Error("Intrinsics: focal lengths must be positive");
}

Pose SensorRig::camera_mount() const {
  Mat3 optical;
  // Columns: optical x (right), y (down), z (forward) in vehicle axes.
  optical << 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0;
  return Pose(yaw_matrix(camera_yaw) * optical, camera_offset);
}

void Scene::validate() const {
  if (ego_track.empty()) throw Error("Scene: ego_track is empty");
  for (std::size_t i = 1; i < ego_track.size(); ++i) {
    if (!(ego_track[i].time > ego_track[i - 1].time)) {
      throw Error("Scene: ego_track timestamps must be strictly increasing");
    }
  }
  const Vec3 centre = 0.5 * (bounds.min + bounds.max);
  const Vec3 half = 0.5 * (bounds.max - bounds.min);
  const Aabb outer{centre - 2.0 * half, centre + 2.0 * half};
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    if (!(b.half_extents.array() > 0.0).all()) {
      throw Error("Scene: box " + std::to_string(i) + " has non-positive half extents");
    }
    // Linear motion: extremes occur at the horizon ends.
    for (double t : {t_begin(), t_end()}) {
      const double radius = b.half_extents.head<2>().norm();
      const Vec3 c = b.center_at(t);
      const Vec3 ext(radius, radius, b.half_extents.z());
      if (!outer.contains(c - ext) || !outer.contains(c + ext)) {
        throw Error("Scene: box " + std::to_string(i) + " leaves 2x bounds");
      }
    }
  }
  sensors.pattern.validate();
  sensors.intrinsics.validate();
  if (sensors.feature_dim < 4) throw Error("Scene: feature_dim must be >= 4");
}

std::size_t LidarScan::hit_count() const {
  return static_cast<std::size_t>(
      std::count_if(rays.begin(), rays.end(), [](const Ray& r) { return !r.miss; }));
}

LidarScan transform_scan(const LidarScan& scan, const Pose& pose) {
  LidarScan out = scan;
  for (Ray& r : out.rays) {
    r.origin = pose.apply(r.origin);
    r.endpoint = pose.apply(r.endpoint);
    r.direction = pose.apply_direction(r.direction);
  }
  return out;
}

LidarScan retime_scan(const LidarScan& scan, double t0) {
  LidarScan out = scan;
  out.time -= t0;
  for (Ray& r : out.rays) r.time -= t0;
  return out;
}

RayHit cast_ray(const Scene& scene, const Vec3& origin, const Vec3& direction, double t,
                double max_range) {
  RayHit best;
  if (direction.z() < 0.0 && origin.z() > scene.ground_z) {
    const double range = (scene.ground_z - origin.z()) / direction.z();
    if (range <= max_range) {
      best.hit = true;
      best.range = range;
      best.class_id = kGroundClass;
      best.surface = -1;
    }
  }
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const auto entry = ray_box_entry(scene.boxes[i], origin, direction, t);
    if (entry && *entry <= max_range && *entry < best.range) {
      best.hit = true;
      best.range = *entry;
      best.class_id = scene.boxes[i].class_id;
      best.surface = static_cast<int>(i);
    }
  }
  if (best.hit) {
    best.point = origin + best.range * direction;
    if (best.surface < 0) best.point.z() = scene.ground_z;
  }
  return best;
}

bool occupancy_oracle(const Scene& scene, const Vec3& q, double t) {
  if (!scene.in_horizon(t)) {
    throw OutOfHorizonError("occupancy_oracle: time " + std::to_string(t) + " outside horizon");
  }
  if (q.z() < scene.ground_z) return true;
  return std::any_of(scene.boxes.begin(), scene.boxes.end(),
                     [&](const Box& b) { return b.contains(q, t); });
}

LidarScan cast_lidar_scan(const Scene& scene, const Pose& sensor_pose, const ScanPattern& pattern,
                          double t, int workers) {
  pattern.validate();
  if (!scene.in_horizon(t)) {
    throw OutOfHorizonError("cast_lidar_scan: time outside horizon");
  }
  LidarScan scan;
  scan.pattern = pattern;
  scan.time = t;
  scan.rays.resize(static_cast<std::size_t>(pattern.ray_count()));
  const Vec3 origin = sensor_pose.translation();
  parallel_for(scan.rays.size(), workers, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t idx = begin; idx < end; ++idx) {
      const int row = static_cast<int>(idx) / pattern.azimuth_count;
      const int col = static_cast<int>(idx) % pattern.azimuth_count;
      Ray& ray = scan.rays[idx];
      ray.origin = origin;
      ray.direction = sensor_pose.apply_direction(pattern.direction(row, col)).normalized();
      ray.time = t;
      const RayHit hit = cast_ray(scene, origin, ray.direction, t, pattern.max_range);
      ray.miss = !hit.hit;
      ray.endpoint = hit.hit ? hit.point : Vec3(origin + pattern.max_range * ray.direction);
    }
  });
  return scan;
}

Pose ego_pose_at(const Scene& scene, double t) {
  if (!scene.in_horizon(t)) {
    throw OutOfHorizonError("ego_pose_at: time " + std::to_string(t) + " outside horizon");
  }
  const auto& track = scene.ego_track;
  auto it = std::upper_bound(track.begin(), track.end(), t,
                             [](double v, const EgoKeyframe& k) { return v < k.time; });
  if (it == track.begin()) return Pose::from_yaw(track.front().yaw, track.front().translation);
  const EgoKeyframe& a = *(it - 1);
  if (a.time == t || it == track.end()) return Pose::from_yaw(a.yaw, a.translation);
  const EgoKeyframe& b = *it;
  const double alpha = (t - a.time) / (b.time - a.time);
  const Vec3 translation = a.translation + alpha * (b.translation - a.translation);
  const double yaw = a.yaw + alpha * wrap_angle(b.yaw - a.yaw);
  return Pose::from_yaw(yaw, translation);
}

Vec3 FeatureImage::pixel_ray(int u, int v) const {
  return {(u + 0.5 - intrinsics.cx) / intrinsics.fx, (v + 0.5 - intrinsics.cy) / intrinsics.fy, 1.0};
}

std::optional<FeatureImage::Projection> FeatureImage::project(const Vec3& world_point) const {
  const Vec3 c = camera_pose.rotation().transpose() * (world_point - camera_pose.translation());
  if (!(c.z() > 0.0)) return std::nullopt;
  const double u = intrinsics.fx * c.x() / c.z() + intrinsics.cx;
  const double v = intrinsics.fy * c.y() / c.z() + intrinsics.cy;
  if (!(u >= 0.0 && u < intrinsics.width && v >= 0.0 && v < intrinsics.height)) return std::nullopt;
  return Projection{static_cast<int>(std::floor(u)), static_cast<int>(std::floor(v)), c.z()};
}

std::vector<double> class_prototype(int class_id, int dim) {
  RandomStream rng(kFeatureSeed, stream_id(StreamDomain::kRay, static_cast<std::uint64_t>(class_id + 1)));
  std::vector<double> proto(static_cast<std::size_t>(dim));
  for (double& p : proto) p = rng.uniform(-1.0, 1.0);
  return proto;
}

std::vector<double> procedural_feature(int class_id, const Vec3& world_point, int dim) {
  std::vector<double> f = class_prototype(class_id, dim);
  if (class_id == kSkyClass) return f;
  // Per-channel smooth field; wave numbers are shared across classes.
  RandomStream waves(kFeatureSeed, stream_id(StreamDomain::kShuffle, 0));
  for (int k = 0; k < dim; ++k) {
    const double a = waves.uniform(-0.5, 0.5);
    const double b = waves.uniform(-0.5, 0.5);
    const double c = waves.uniform(-0.5, 0.5);
    const double phase = waves.uniform(0.0, 2.0 * std::numbers::pi);
    f[static_cast<std::size_t>(k)] +=
        kFeaturePerturbation *
        std::sin(a * world_point.x() + b * world_point.y() + c * world_point.z() + phase);
  }
  return f;
}

FeatureImage render_feature_image(const Scene& scene, const Pose& camera_pose,
                                  const Intrinsics& intrinsics, double t, int feature_dim) {
  if (feature_dim < 4) throw Error("render_feature_image: feature_dim must be >= 4");
  intrinsics.validate();
  FeatureImage img;
  img.intrinsics = intrinsics;
  img.camera_pose = camera_pose;
  img.time = t;
  img.feature_dim = feature_dim;
  const std::size_t pixels = static_cast<std::size_t>(intrinsics.width) * intrinsics.height;
  img.features.resize(pixels * feature_dim);
  img.depth.resize(pixels);
  img.class_ids.resize(pixels);
  const double far = std::numeric_limits<double>::infinity();
  for (int v = 0; v < intrinsics.height; ++v) {
    for (int u = 0; u < intrinsics.width; ++u) {
      const Vec3 ray_cam = img.pixel_ray(u, v);
      const double norm = ray_cam.norm();
      const Vec3 dir = camera_pose.apply_direction(ray_cam / norm);
      const RayHit hit = cast_ray(scene, camera_pose.translation(), dir, t, far);
      const std::size_t idx = static_cast<std::size_t>(v) * intrinsics.width + u;
      img.depth[idx] = hit.hit ? hit.range / norm : far;
      img.class_ids[idx] = hit.class_id;
      const auto f = procedural_feature(hit.class_id, hit.point, feature_dim);
      std::copy(f.begin(), f.end(), img.features.begin() + static_cast<std::ptrdiff_t>(idx * feature_dim));
    }
  }
  return img;
}

}  // namespace gasp
