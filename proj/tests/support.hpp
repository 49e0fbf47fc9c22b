#pragma once
// Hand-rolled generators for property tests. std::mt19937_64 keeps the test
// inputs independent of the library's own RNG.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "gasp/geom.hpp"
#include "gasp/scene.hpp"
#include "gasp/suite.hpp"

namespace test {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng_); }
  bool coin(double p = 0.5) { return uniform() < p; }
  gasp::Vec3 vec(double lo, double hi) { return {uniform(lo, hi), uniform(lo, hi), uniform(lo, hi)}; }
  gasp::Vec3 unit() {
    gasp::Vec3 v;
    do {
      v = vec(-1.0, 1.0);
    } while (v.norm() < 1e-3 || v.norm() > 1.0);
    return v.normalized();
  }
  gasp::Pose pose() {
    const gasp::Vec3 axis = unit();
    const Eigen::AngleAxisd aa(uniform(-std::numbers::pi, std::numbers::pi), axis);
    return gasp::Pose(aa.toRotationMatrix(), vec(-20.0, 20.0));
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

/// Ego driving along +x at `speed` from the origin over [0, t_end].
inline std::vector<gasp::EgoKeyframe> straight_track(double speed, double t_end, double dt = 0.5) {
  std::vector<gasp::EgoKeyframe> track;
  for (double t = 0.0; t <= t_end + 1e-9; t += dt) track.push_back({t, gasp::Vec3(speed * t, 0.0, 0.0), 0.0});
  return track;
}

/// Small suite with a coarse lidar for quick tests.
inline gasp::SuiteConfig small_suite(std::uint64_t seed = 7, int scenes = 2) {
  gasp::SuiteConfig s;
  s.seed = seed;
  s.num_scenes = scenes;
  s.rig.pattern.azimuth_count = 120;
  s.rig.pattern.elevation_count = 16;
  return s;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("gasp_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::string operator/(const std::string& rel) const { return (path_ / rel).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace test
