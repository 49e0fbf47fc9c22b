#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "gasp/scene.hpp"

namespace gasp {

/// When past and future sensor data are captured around the reference time.
struct SequenceTiming {
  double t0 = 1.0;
  int past_count = 3;
  double past_dt = 0.5;
  double horizon = 3.0;  // T_max
  double future_dt = 0.3;
  double image_dt = 0.6;
  /// Track keyframe spacing and extra coverage past t0 + horizon.
  double keyframe_dt = 0.5;
  double track_margin = 0.5;

  double track_end() const { return t0 + horizon + track_margin; }
};

/// Scene-suite description: object counts and motion limits.
struct SuiteConfig {
  std::uint64_t seed = 42;
  int num_scenes = 4;
  int num_parked = 4;
  int num_moving = 2;
  int num_pedestrians = 1;
  int num_buildings = 2;
  double min_ego_speed = 2.0;
  double max_ego_speed = 6.0;
  double max_yaw_rate = 0.15;
  double max_object_speed = 8.0;
  double ego_clearance = 2.5;
  SensorRig rig;
  SequenceTiming timing;
};

nlohmann::json suite_to_json(const SuiteConfig& cfg);
SuiteConfig suite_from_json(const nlohmann::json& j);

/// Scene `index` of the suite; a pure function of (cfg, index).
Scene make_scene(const SuiteConfig& cfg, std::uint64_t index);

/// Past scans, future scans and camera images of one scene, all in the world
/// frame with absolute time stamps.
struct Sequence {
  Scene scene;
  double t0 = 0.0;
  std::vector<LidarScan> past;
  std::vector<LidarScan> future;
  std::vector<FeatureImage> images;
};

Sequence simulate_sequence(const Scene& scene, const SequenceTiming& timing, int workers = 1);

/// Lidar scan from the ego-mounted sensor at time t.
LidarScan scan_at(const Scene& scene, double t, int workers = 1);
/// Camera image from the ego-mounted camera at time t.
FeatureImage image_at(const Scene& scene, double t);

}  // namespace gasp
