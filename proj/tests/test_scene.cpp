#include <doctest.h>

#include "gasp/binary_io.hpp"
#include "gasp/scene.hpp"
#include "gasp/scene_io.hpp"
#include "gasp/suite.hpp"
#include "support.hpp"

using namespace gasp;

namespace {

Scene random_scene(test::Gen& g, int boxes) {
  Scene s;
  s.ego_track = test::straight_track(3.0, 5.0);
  for (int i = 0; i < boxes; ++i) {
    Box b;
    b.center = Vec3(g.uniform(-15.0, 15.0), g.uniform(-15.0, 15.0), g.uniform(0.3, 1.5));
    b.yaw = g.uniform(-3.0, 3.0);
    b.half_extents = Vec3(g.uniform(0.3, 2.5), g.uniform(0.3, 1.2), g.uniform(0.3, 1.2));
    b.velocity = Vec3(g.uniform(-3.0, 3.0), g.uniform(-3.0, 3.0), 0.0);
    s.boxes.push_back(b);
  }
  return s;
}

// Range of the first oracle-occupied point along the ray, marching at `step`.
double marched_range(const Scene& s, const Vec3& o, const Vec3& d, double t, double max_range, double step) {
  for (double r = step; r <= max_range; r += step) {
    if (occupancy_oracle(s, o + r * d, t)) return r;
  }
  return std::numeric_limits<double>::infinity();
}

}  // namespace

TEST_CASE("cast_ray agrees with marching the occupancy oracle") {
  test::Gen g(11);
  const double step = 1e-3;
  int hits = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const Scene s = random_scene(g, 4);
    const Vec3 o(g.uniform(-5.0, 5.0), g.uniform(-5.0, 5.0), g.uniform(0.5, 2.5));
    const double t = g.uniform(0.0, 4.0);
    if (occupancy_oracle(s, o, t)) continue;
    Vec3 d = g.unit();
    d.z() = std::abs(d.z()) * (g.coin(0.7) ? -0.3 : 0.3);
    d.normalize();
    const RayHit hit = cast_ray(s, o, d, t, 30.0);
    const double marched = marched_range(s, o, d, t, 30.0, step);
    if (hit.hit) {
      ++hits;
      // The march finds the first occupied sample in (range, range + step].
      CHECK(marched >= hit.range - 1e-9);
      CHECK(marched <= hit.range + step + 1e-9);
      CHECK(occupancy_oracle(s, o + (hit.range + 1e-7) * d, t));
      CHECK_FALSE(occupancy_oracle(s, o + (hit.range - 1e-7) * d, t));
    } else {
      CHECK(std::isinf(marched));
    }
  }
  CHECK(hits > 100);
}

TEST_CASE("ground hits land on the ground plane") {
  Scene s;
  s.ego_track = test::straight_track(1.0, 2.0);
  s.ground_z = -0.5;
  const Vec3 o(0.0, 0.0, 1.5);
  const Vec3 d = Vec3(1.0, 0.0, -1.0).normalized();
  const RayHit h = cast_ray(s, o, d, 0.0, 100.0);
  REQUIRE(h.hit);
  CHECK(h.class_id == kGroundClass);
  CHECK(h.range == doctest::Approx(2.0 * std::sqrt(2.0)));
  CHECK(h.point.z() == -0.5);
  CHECK_FALSE(cast_ray(s, o, d, 0.0, 2.0).hit);
  CHECK_FALSE(cast_ray(s, o, Vec3(1.0, 0.0, 0.0), 0.0, 100.0).hit);
}

TEST_CASE("box interior test is strict and follows the box motion") {
  Box b;
  b.center = Vec3(1.0, 0.0, 1.0);
  b.half_extents = Vec3(1.0, 0.5, 0.5);
  b.velocity = Vec3(2.0, 0.0, 0.0);
  CHECK(b.contains(Vec3(1.0, 0.0, 1.0), 0.0));
  CHECK_FALSE(b.contains(Vec3(2.0, 0.0, 1.0), 0.0));  // on the face
  CHECK(b.contains(Vec3(3.0, 0.0, 1.0), 1.0));
  CHECK_FALSE(b.contains(Vec3(1.0, 0.0, 1.0), 1.0));
  b.yaw = std::numbers::pi / 2.0;
  CHECK(b.contains(Vec3(1.0, 0.9, 1.0), 0.0));
  CHECK_FALSE(b.contains(Vec3(1.9, 0.0, 1.0), 0.0));
}

TEST_CASE("oracle and ego pose reject times outside the track") {
  Scene s;
  s.ego_track = test::straight_track(1.0, 2.0);
  CHECK_THROWS_AS(occupancy_oracle(s, Vec3::Zero(), 2.5), OutOfHorizonError);
  CHECK_THROWS_AS(ego_pose_at(s, -0.1), OutOfHorizonError);
  CHECK(ego_pose_at(s, 1.25).translation().x() == doctest::Approx(1.25));
}

TEST_CASE("lidar scan rays carry pattern directions and consistent endpoints") {
  const SuiteConfig suite = test::small_suite();
  const Scene scene = make_scene(suite, 0);
  const LidarScan scan = scan_at(scene, 1.0);
  const ScanPattern& p = scene.sensors.pattern;
  REQUIRE(scan.rays.size() == static_cast<std::size_t>(p.ray_count()));
  const Pose sensor = compose(ego_pose_at(scene, 1.0), scene.sensors.lidar_mount());
  for (int r = 0; r < p.elevation_count; ++r) {
    for (int c = 0; c < p.azimuth_count; ++c) {
      const Ray& ray = scan.rays[static_cast<std::size_t>(r) * p.azimuth_count + c];
      CHECK((ray.direction - sensor.apply_direction(p.direction(r, c))).norm() < 1e-12);
      CHECK((ray.origin - sensor.translation()).norm() < 1e-12);
      if (ray.miss) {
        CHECK((ray.endpoint - (ray.origin + p.max_range * ray.direction)).norm() < 1e-9);
      } else {
        CHECK((ray.endpoint - ray.origin).norm() <= p.max_range + 1e-9);
      }
    }
  }
  // Workers only split the rays.
  const LidarScan parallel = scan_at(scene, 1.0, 3);
  CHECK(encode_scans({scan}) == encode_scans({parallel}));
}

TEST_CASE("scan and image files round trip") {
  const SuiteConfig suite = test::small_suite();
  const Sequence seq = simulate_sequence(make_scene(suite, 1), suite.timing);
  const auto bytes = encode_scans(seq.future);
  const auto back = decode_scans(bytes);
  REQUIRE(back.size() == seq.future.size());
  CHECK(encode_scans(back) == bytes);
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].time == seq.future[i].time);
    CHECK(back[i].rays.size() == seq.future[i].rays.size());
    CHECK(back[i].rays[5].endpoint == seq.future[i].rays[5].endpoint);
  }
  const auto img_bytes = encode_images(seq.images);
  const auto imgs = decode_images(img_bytes);
  REQUIRE(imgs.size() == seq.images.size());
  CHECK(encode_images(imgs) == img_bytes);
  // Features are stored as f32.
  CHECK(imgs[0].features[3] == doctest::Approx(seq.images[0].features[3]).epsilon(1e-6));
  CHECK(imgs[0].depth == seq.images[0].depth);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS(decode_scans(truncated));
  auto bad_magic = bytes;
  bad_magic[0] ^= 0xff;
  CHECK_THROWS(decode_scans(bad_magic));
}

TEST_CASE("scene JSON round trips and rejects malformed documents") {
  const SuiteConfig suite = test::small_suite(3);
  const Scene scene = make_scene(suite, 0);
  const std::string text = scene_to_json(scene).dump();
  const Scene back = scene_from_text(text);
  CHECK(scene_to_json(back).dump() == text);
  CHECK_THROWS_AS(scene_from_text("{\"ground_z\": 0,\n \"boxes\": [}"), ConfigError);
  CHECK_THROWS_AS(scene_from_text("{\"ground_z\": \"low\"}"), ConfigError);
}

TEST_CASE("suite scenes are pure functions of (config, index)") {
  const SuiteConfig suite = test::small_suite(5);
  CHECK(scene_to_json(make_scene(suite, 2)).dump() == scene_to_json(make_scene(suite, 2)).dump());
  CHECK(scene_to_json(make_scene(suite, 2)).dump() != scene_to_json(make_scene(suite, 3)).dump());
  SuiteConfig other = suite;
  other.seed = 6;
  CHECK(scene_to_json(make_scene(suite, 2)).dump() != scene_to_json(make_scene(other, 2)).dump());
  const SuiteConfig back = suite_from_json(suite_to_json(suite));
  CHECK(suite_to_json(back) == suite_to_json(suite));
}

TEST_CASE("suite scenes keep the ego start clear and cover the horizon") {
  const SuiteConfig suite = test::small_suite(8, 6);
  for (int i = 0; i < suite.num_scenes; ++i) {
    const Scene s = make_scene(suite, static_cast<std::uint64_t>(i));
    CHECK_NOTHROW(s.validate());
    CHECK(s.in_horizon(suite.timing.t0 - suite.timing.past_dt * (suite.timing.past_count - 1)));
    CHECK(s.in_horizon(suite.timing.t0 + suite.timing.horizon));
    const Vec3 ego = ego_pose_at(s, suite.timing.t0).translation();
    CHECK_FALSE(occupancy_oracle(s, ego + Vec3(0.0, 0.0, 1.0), suite.timing.t0));
  }
}

TEST_CASE("image projection inverts the pixel ray") {
  const SuiteConfig suite = test::small_suite();
  const Scene scene = make_scene(suite, 0);
  const FeatureImage img = image_at(scene, 1.0);
  test::Gen g(12);
  for (int i = 0; i < 200; ++i) {
    const int u = g.integer(0, img.width() - 1), v = g.integer(0, img.height() - 1);
    const double depth = g.uniform(0.5, 40.0);
    const Vec3 world = img.camera_pose.apply(depth * img.pixel_ray(u, v));
    const auto proj = img.project(world);
    REQUIRE(proj.has_value());
    CHECK(proj->u == u);
    CHECK(proj->v == v);
    CHECK(proj->depth == doctest::Approx(depth).epsilon(1e-12));
  }
  CHECK_FALSE(img.project(img.camera_pose.apply(Vec3(0.0, 0.0, -1.0))).has_value());
}

TEST_CASE("rendered depth matches ray casting and features follow the class") {
  const SuiteConfig suite = test::small_suite(9);
  const Scene scene = make_scene(suite, 0);
  const FeatureImage img = image_at(scene, 1.5);
  for (int v = 0; v < img.height(); v += 5) {
    for (int u = 0; u < img.width(); u += 7) {
      const Vec3 ray = img.pixel_ray(u, v);
      const RayHit h = cast_ray(scene, img.camera_pose.translation(), img.camera_pose.apply_direction(ray.normalized()),
                                1.5, std::numeric_limits<double>::infinity());
      if (!h.hit) {
        CHECK(std::isinf(img.depth_at(u, v)));
        continue;
      }
      CHECK(img.depth_at(u, v) == doctest::Approx(h.range / ray.norm()).epsilon(1e-12));
      const auto proto = class_prototype(h.class_id, img.feature_dim);
      const auto f = img.feature(u, v);
      for (int k = 0; k < img.feature_dim; ++k) {
        CHECK(std::abs(f[static_cast<std::size_t>(k)] - proto[static_cast<std::size_t>(k)]) <= kFeaturePerturbation + 1e-12);
      }
    }
  }
}
