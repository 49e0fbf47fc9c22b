#include "gasp/suite.hpp"

#include <cmath>

#include "gasp/rng.hpp"
#include "gasp/scene_io.hpp"

namespace gasp {

using nlohmann::json;

namespace {

struct Unicycle {
  double speed;
  double yaw_rate;

  Vec3 position(double t) const {
    if (std::abs(yaw_rate) < 1e-9) return {speed * t, 0.0, 0.0};
    const double r = speed / yaw_rate;
    return {r * std::sin(yaw_rate * t), r * (1.0 - std::cos(yaw_rate * t)), 0.0};
  }
  double heading(double t) const { return yaw_rate * t; }
};

// Distance in x-y from a point to the footprint of a yawed box.
double footprint_distance(const Box& box, const Vec3& p, double t) {
  const Vec3 local = yaw_matrix(-box.yaw) * (p - box.center_at(t));
  const double dx = std::max(std::abs(local.x()) - box.half_extents.x(), 0.0);
  const double dy = std::max(std::abs(local.y()) - box.half_extents.y(), 0.0);
  return std::hypot(dx, dy);
}

bool clear_of_ego(const Scene& scene, const Box& box, double clearance) {
  for (double t = scene.t_begin(); t <= scene.t_end() + 1e-12; t += 0.05) {
    const Vec3 e = ego_pose_at(scene, std::min(t, scene.t_end())).translation();
    if (footprint_distance(box, e, t) < clearance) return false;
  }
  return true;
}

}  // namespace

json suite_to_json(const SuiteConfig& c) {
  const SequenceTiming& t = c.timing;
  json rig = scene_to_json(Scene{.ground_z = 0.0,
                                 .boxes = {},
                                 .ego_track = {EgoKeyframe{}},
                                 .bounds = {},
                                 .sensors = c.rig})
                 .at("sensors");
  return {{"seed", c.seed},
          {"num_scenes", c.num_scenes},
          {"num_parked", c.num_parked},
          {"num_moving", c.num_moving},
          {"num_pedestrians", c.num_pedestrians},
          {"num_buildings", c.num_buildings},
          {"min_ego_speed", c.min_ego_speed},
          {"max_ego_speed", c.max_ego_speed},
          {"max_yaw_rate", c.max_yaw_rate},
          {"max_object_speed", c.max_object_speed},
          {"ego_clearance", c.ego_clearance},
          {"sensors", rig},
          {"timing",
           {{"t0", t.t0},
            {"past_count", t.past_count},
            {"past_dt", t.past_dt},
            {"horizon", t.horizon},
            {"future_dt", t.future_dt},
            {"image_dt", t.image_dt},
            {"keyframe_dt", t.keyframe_dt},
            {"track_margin", t.track_margin}}}};
}

SuiteConfig suite_from_json(const json& j) {
  using namespace json_util;
  const std::string p = "suite";
  if (!j.is_object()) throw ConfigError(p + ": expected an object");
  SuiteConfig c;
  c.seed = uint_or(j, "seed", c.seed, p);
  c.num_scenes = integer_or(j, "num_scenes", c.num_scenes, p);
  c.num_parked = integer_or(j, "num_parked", c.num_parked, p);
  c.num_moving = integer_or(j, "num_moving", c.num_moving, p);
  c.num_pedestrians = integer_or(j, "num_pedestrians", c.num_pedestrians, p);
  c.num_buildings = integer_or(j, "num_buildings", c.num_buildings, p);
  c.min_ego_speed = number_or(j, "min_ego_speed", c.min_ego_speed, p);
  c.max_ego_speed = number_or(j, "max_ego_speed", c.max_ego_speed, p);
  c.max_yaw_rate = number_or(j, "max_yaw_rate", c.max_yaw_rate, p);
  c.max_object_speed = number_or(j, "max_object_speed", c.max_object_speed, p);
  c.ego_clearance = number_or(j, "ego_clearance", c.ego_clearance, p);
  if (c.num_scenes < 0 || c.num_parked < 0 || c.num_moving < 0 || c.num_pedestrians < 0 ||
      c.num_buildings < 0) {
    throw ConfigError(p + ": counts must be non-negative");
  }
  if (!(c.min_ego_speed <= c.max_ego_speed)) throw ConfigError(p + ": min_ego_speed > max_ego_speed");
  if (j.contains("sensors")) {
    json stub = {{"ego_track", json::array({{{"t", 0.0}, {"translation", {0.0, 0.0, 0.0}}}})},
                 {"sensors", j.at("sensors")}};
    c.rig = scene_from_json(stub).sensors;
  }
  if (j.contains("timing")) {
    const json& t = j.at("timing");
    const std::string tp = p + ".timing";
    c.timing.t0 = number_or(t, "t0", c.timing.t0, tp);
    c.timing.past_count = integer_or(t, "past_count", c.timing.past_count, tp);
    c.timing.past_dt = number_or(t, "past_dt", c.timing.past_dt, tp);
    c.timing.horizon = number_or(t, "horizon", c.timing.horizon, tp);
    c.timing.future_dt = number_or(t, "future_dt", c.timing.future_dt, tp);
    c.timing.image_dt = number_or(t, "image_dt", c.timing.image_dt, tp);
    c.timing.keyframe_dt = number_or(t, "keyframe_dt", c.timing.keyframe_dt, tp);
    c.timing.track_margin = number_or(t, "track_margin", c.timing.track_margin, tp);
    if (!(c.timing.horizon > 0.0) || !(c.timing.future_dt > 0.0) || !(c.timing.image_dt > 0.0) ||
        !(c.timing.keyframe_dt > 0.0) || c.timing.past_count < 1) {
      throw ConfigError(tp + ": horizon, spacings and past_count must be positive");
    }
    if (c.timing.t0 - (c.timing.past_count - 1) * c.timing.past_dt < 0.0) {
      throw ConfigError(tp + ": past scans would start before t = 0");
    }
  }
  return c;
}

Scene make_scene(const SuiteConfig& cfg, std::uint64_t index) {
  RandomStream rng(cfg.seed, stream_id(StreamDomain::kSuite, index));
  Scene scene;
  scene.sensors = cfg.rig;

  const Unicycle ego{rng.uniform(cfg.min_ego_speed, cfg.max_ego_speed),
                     rng.uniform(-cfg.max_yaw_rate, cfg.max_yaw_rate)};
  const double t_end = cfg.timing.track_end();
  for (double t = 0.0;; t += cfg.timing.keyframe_dt) {
    const double tk = std::min(t, t_end);
    scene.ego_track.push_back({tk, ego.position(tk), ego.heading(tk)});
    if (tk >= t_end) break;
  }

  // Objects are placed relative to an extended version of the ego path,
  // parametrised by arc length along it.
  const Unicycle guide{1.0, ego.yaw_rate * 0.5};
  auto place = [&](double s, double lateral) {
    const double heading = guide.heading(s);
    const Vec3 base = guide.position(s);
    return std::make_pair(Vec3(base.x() - std::sin(heading) * lateral, base.y() + std::cos(heading) * lateral, 0.0),
                          heading);
  };
  auto add = [&](auto&& make_box) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      Box b = make_box();
      b.center.z() = scene.ground_z + b.half_extents.z();
      if (clear_of_ego(scene, b, cfg.ego_clearance)) {
        scene.boxes.push_back(b);
        return;
      }
    }
  };
  for (int i = 0; i < cfg.num_parked; ++i) {
    add([&] {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      auto [pos, heading] = place(rng.uniform(-10.0, 25.0), sign * rng.uniform(3.5, 7.0));
      Box b;
      b.center = pos;
      b.yaw = heading + rng.uniform(-0.2, 0.2);
      b.half_extents = Vec3(rng.uniform(1.9, 2.4), rng.uniform(0.85, 1.0), rng.uniform(0.7, 0.9));
      b.class_id = kCarClass;
      return b;
    });
  }
  for (int i = 0; i < cfg.num_moving; ++i) {
    add([&] {
      const bool oncoming = rng.uniform() < 0.5;
      auto [pos, heading] = place(rng.uniform(-5.0, 25.0), (oncoming ? -1.0 : 1.0) * rng.uniform(3.0, 4.0));
      const double speed = rng.uniform(2.0, cfg.max_object_speed);
      const double dir = oncoming ? heading + std::numbers::pi : heading;
      Box b;
      b.center = pos;
      b.yaw = dir;
      b.half_extents = Vec3(rng.uniform(1.9, 2.4), rng.uniform(0.85, 1.0), rng.uniform(0.7, 0.9));
      b.velocity = Vec3(std::cos(dir) * speed, std::sin(dir) * speed, 0.0);
      b.class_id = kCarClass;
      return b;
    });
  }
  for (int i = 0; i < cfg.num_pedestrians; ++i) {
    add([&] {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      auto [pos, heading] = place(rng.uniform(0.0, 20.0), sign * rng.uniform(3.0, 6.0));
      const double dir = rng.uniform(-std::numbers::pi, std::numbers::pi);
      const double speed = rng.uniform(0.0, 1.5);
      Box b;
      b.center = pos;
      b.yaw = dir;
      b.half_extents = Vec3(0.3, 0.3, 0.9);
      b.velocity = Vec3(std::cos(dir) * speed, std::sin(dir) * speed, 0.0);
      b.class_id = kPedestrianClass;
      return b;
    });
  }
  for (int i = 0; i < cfg.num_buildings; ++i) {
    add([&] {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      auto [pos, heading] = place(rng.uniform(-15.0, 30.0), sign * rng.uniform(11.0, 16.0));
      Box b;
      b.center = pos;
      b.yaw = heading;
      b.half_extents = Vec3(rng.uniform(4.0, 10.0), rng.uniform(2.0, 4.0), rng.uniform(2.0, 4.0));
      b.class_id = kBuildingClass;
      return b;
    });
  }
  scene.validate();
  return scene;
}

LidarScan scan_at(const Scene& scene, double t, int workers) {
  const Pose sensor = compose(ego_pose_at(scene, t), scene.sensors.lidar_mount());
  return cast_lidar_scan(scene, sensor, scene.sensors.pattern, t, workers);
}

FeatureImage image_at(const Scene& scene, double t) {
  const Pose camera = compose(ego_pose_at(scene, t), scene.sensors.camera_mount());
  return render_feature_image(scene, camera, scene.sensors.intrinsics, t, scene.sensors.feature_dim);
}

Sequence simulate_sequence(const Scene& scene, const SequenceTiming& timing, int workers) {
  Sequence seq;
  seq.scene = scene;
  seq.t0 = timing.t0;
  for (int k = timing.past_count - 1; k >= 0; --k) {
    seq.past.push_back(scan_at(scene, timing.t0 - k * timing.past_dt, workers));
  }
  const int future_steps = static_cast<int>(std::floor(timing.horizon / timing.future_dt + 1e-9));
  for (int k = 0; k <= future_steps; ++k) {
    seq.future.push_back(scan_at(scene, timing.t0 + std::min(k * timing.future_dt, timing.horizon), workers));
  }
  const int image_steps = static_cast<int>(std::floor(timing.horizon / timing.image_dt + 1e-9));
  for (int k = 0; k <= image_steps; ++k) {
    seq.images.push_back(image_at(scene, timing.t0 + std::min(k * timing.image_dt, timing.horizon)));
  }
  return seq;
}

}  // namespace gasp
