#include "gasp/scene_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gasp/binary_io.hpp"

namespace gasp {

using nlohmann::json;

// ---- file helpers ---------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path);
}

void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::string tmp = path + ".tmp";
  write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::string& path, std::string_view text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const std::string& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

// ---- json helpers ---------------------------------------------------------

namespace json_util {

namespace {

const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(path + "." + key + ": missing required field");
  return *it;
}

}  // namespace

double number(const json& j, const std::string& key, const std::string& path) {
  const json& v = field(j, key, path);
  if (!v.is_number()) throw ConfigError(path + "." + key + ": expected a number");
  return v.get<double>();
}

double number_or(const json& j, const std::string& key, double fallback, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  return number(j, key, path);
}

int integer_or(const json& j, const std::string& key, int fallback, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_integer()) throw ConfigError(path + "." + key + ": expected an integer");
  return v.get<int>();
}

std::uint64_t uint_or(const json& j, const std::string& key, std::uint64_t fallback,
                      const std::string& path) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
    throw ConfigError(path + "." + key + ": expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

bool bool_or(const json& j, const std::string& key, bool fallback, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_boolean()) throw ConfigError(path + "." + key + ": expected a boolean");
  return v.get<bool>();
}

Vec3 vec3(const json& j, const std::string& key, const std::string& path) {
  const json& v = field(j, key, path);
  if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() || !v[2].is_number()) {
    throw ConfigError(path + "." + key + ": expected an array of 3 numbers");
  }
  return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

json parse(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    // nlohmann reports "line L, column C" in the message.
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace json_util

namespace {

using namespace json_util;

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

json pattern_json(const ScanPattern& p) {
  return {{"azimuth_count", p.azimuth_count},   {"elevation_count", p.elevation_count},
          {"azimuth_min", p.azimuth_min},       {"azimuth_max", p.azimuth_max},
          {"elevation_min", p.elevation_min},   {"elevation_max", p.elevation_max},
          {"max_range", p.max_range}};
}

ScanPattern pattern_from(const json& j, const std::string& path) {
  ScanPattern p;
  p.azimuth_count = integer_or(j, "azimuth_count", p.azimuth_count, path);
  p.elevation_count = integer_or(j, "elevation_count", p.elevation_count, path);
  p.azimuth_min = number_or(j, "azimuth_min", p.azimuth_min, path);
  p.azimuth_max = number_or(j, "azimuth_max", p.azimuth_max, path);
  p.elevation_min = number_or(j, "elevation_min", p.elevation_min, path);
  p.elevation_max = number_or(j, "elevation_max", p.elevation_max, path);
  p.max_range = number_or(j, "max_range", p.max_range, path);
  return p;
}

}  // namespace

json scene_to_json(const Scene& scene) {
  json boxes = json::array();
  for (const Box& b : scene.boxes) {
    boxes.push_back({{"center", vec_json(b.center)},
                     {"yaw", b.yaw},
                     {"half_extents", vec_json(b.half_extents)},
                     {"velocity", vec_json(b.velocity)},
                     {"class_id", b.class_id}});
  }
  json track = json::array();
  for (const EgoKeyframe& k : scene.ego_track) {
    track.push_back({{"t", k.time}, {"translation", vec_json(k.translation)}, {"yaw", k.yaw}});
  }
  const SensorRig& s = scene.sensors;
  const Intrinsics& in = s.intrinsics;
  return {{"ground_z", scene.ground_z},
          {"bounds", {{"min", vec_json(scene.bounds.min)}, {"max", vec_json(scene.bounds.max)}}},
          {"boxes", boxes},
          {"ego_track", track},
          {"sensors",
           {{"lidar", {{"offset", vec_json(s.lidar_offset)}, {"yaw", s.lidar_yaw}, {"pattern", pattern_json(s.pattern)}}},
            {"camera",
             {{"offset", vec_json(s.camera_offset)},
              {"yaw", s.camera_yaw},
              {"width", in.width},
              {"height", in.height},
              {"fx", in.fx},
              {"fy", in.fy},
              {"cx", in.cx},
              {"cy", in.cy},
              {"feature_dim", s.feature_dim}}}}}};
}

Scene scene_from_json(const json& j) {
  const std::string root = "scene";
  if (!j.is_object()) throw ConfigError(root + ": expected an object");
  Scene scene;
  scene.ground_z = number_or(j, "ground_z", 0.0, root);
  if (j.contains("bounds")) {
    scene.bounds.min = vec3(j.at("bounds"), "min", root + ".bounds");
    scene.bounds.max = vec3(j.at("bounds"), "max", root + ".bounds");
  }
  if (j.contains("boxes")) {
    if (!j.at("boxes").is_array()) throw ConfigError(root + ".boxes: expected an array");
    std::size_t i = 0;
    for (const json& b : j.at("boxes")) {
      const std::string path = root + ".boxes[" + std::to_string(i++) + "]";
      Box box;
      box.center = vec3(b, "center", path);
      box.yaw = number_or(b, "yaw", 0.0, path);
      box.half_extents = vec3(b, "half_extents", path);
      box.velocity = b.contains("velocity") ? vec3(b, "velocity", path) : Vec3::Zero();
      box.class_id = integer_or(b, "class_id", kCarClass, path);
      scene.boxes.push_back(box);
    }
  }
  if (!j.contains("ego_track") || !j.at("ego_track").is_array()) {
    throw ConfigError(root + ".ego_track: expected an array");
  }
  std::size_t i = 0;
  for (const json& k : j.at("ego_track")) {
    const std::string path = root + ".ego_track[" + std::to_string(i++) + "]";
    scene.ego_track.push_back({number(k, "t", path), vec3(k, "translation", path), number_or(k, "yaw", 0.0, path)});
  }
  if (j.contains("sensors")) {
    const json& s = j.at("sensors");
    const std::string sp = root + ".sensors";
    if (s.contains("lidar")) {
      const json& l = s.at("lidar");
      if (l.contains("offset")) scene.sensors.lidar_offset = vec3(l, "offset", sp + ".lidar");
      scene.sensors.lidar_yaw = number_or(l, "yaw", 0.0, sp + ".lidar");
      if (l.contains("pattern")) scene.sensors.pattern = pattern_from(l.at("pattern"), sp + ".lidar.pattern");
    }
    if (s.contains("camera")) {
      const json& c = s.at("camera");
      const std::string cp = sp + ".camera";
      if (c.contains("offset")) scene.sensors.camera_offset = vec3(c, "offset", cp);
      scene.sensors.camera_yaw = number_or(c, "yaw", 0.0, cp);
      Intrinsics& in = scene.sensors.intrinsics;
      in.width = integer_or(c, "width", in.width, cp);
      in.height = integer_or(c, "height", in.height, cp);
      in.fx = number_or(c, "fx", in.fx, cp);
      in.fy = number_or(c, "fy", in.fy, cp);
      in.cx = number_or(c, "cx", in.cx, cp);
      in.cy = number_or(c, "cy", in.cy, cp);
      scene.sensors.feature_dim = integer_or(c, "feature_dim", scene.sensors.feature_dim, cp);
    }
  }
  try {
    scene.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(root + ": " + e.what());
  }
  return scene;
}

Scene scene_from_text(const std::string& text) { return scene_from_json(parse(text, "scene")); }

// ---- binary containers ----------------------------------------------------

namespace {

constexpr std::uint32_t kScanVersion = 1;
constexpr std::uint32_t kImageVersion = 1;

void put_pose(ByteWriter& w, const Pose& p) {
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) w.put(p.rotation()(r, c));
  w.put_vec3(p.translation());
}

Pose get_pose(ByteReader& r) {
  Mat3 m;
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 3; ++c) m(i, c) = r.get<double>();
  const Vec3 t = r.get_vec3();
  return Pose(m, t);
}

}  // namespace

std::vector<std::uint8_t> encode_scans(const std::vector<LidarScan>& scans) {
  ByteWriter w;
  w.put_bytes("GASPSCAN");
  w.put<std::uint32_t>(kScanVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scans.size()));
  for (const LidarScan& s : scans) {
    const ScanPattern& p = s.pattern;
    w.put<std::int32_t>(p.azimuth_count);
    w.put<std::int32_t>(p.elevation_count);
    w.put(p.azimuth_min);
    w.put(p.azimuth_max);
    w.put(p.elevation_min);
    w.put(p.elevation_max);
    w.put(p.max_range);
    w.put(s.time);
    w.put<std::uint64_t>(s.rays.size());
    for (const Ray& r : s.rays) {
      w.put_vec3(r.origin);
      w.put_vec3(r.endpoint);
      w.put_vec3(r.direction);
      w.put(r.time);
      w.put<std::uint8_t>(r.miss ? 1 : 0);
    }
  }
  return w.take();
}

std::vector<LidarScan> decode_scans(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("GASPSCAN", "scan file");
  if (r.get<std::uint32_t>() != kScanVersion) throw FormatError("scan file: unsupported version");
  const std::uint32_t count = r.get<std::uint32_t>();
  std::vector<LidarScan> scans(count);
  for (LidarScan& s : scans) {
    ScanPattern& p = s.pattern;
    p.azimuth_count = r.get<std::int32_t>();
    p.elevation_count = r.get<std::int32_t>();
    p.azimuth_min = r.get<double>();
    p.azimuth_max = r.get<double>();
    p.elevation_min = r.get<double>();
    p.elevation_max = r.get<double>();
    p.max_range = r.get<double>();
    s.time = r.get<double>();
    const std::uint64_t n = r.get<std::uint64_t>();
    if (n > r.remaining()) throw FormatError("scan file: ray count exceeds data");
    s.rays.resize(n);
    for (Ray& ray : s.rays) {
      ray.origin = r.get_vec3();
      ray.endpoint = r.get_vec3();
      ray.direction = r.get_vec3();
      ray.time = r.get<double>();
      ray.miss = r.get<std::uint8_t>() != 0;
    }
  }
  if (r.remaining() != 0) throw FormatError("scan file: trailing bytes");
  return scans;
}

std::vector<std::uint8_t> encode_images(const std::vector<FeatureImage>& images) {
  ByteWriter w;
  w.put_bytes("GASPIMGS");
  w.put<std::uint32_t>(kImageVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(images.size()));
  for (const FeatureImage& img : images) {
    const Intrinsics& in = img.intrinsics;
    w.put<std::int32_t>(in.width);
    w.put<std::int32_t>(in.height);
    w.put(in.fx);
    w.put(in.fy);
    w.put(in.cx);
    w.put(in.cy);
    w.put<std::int32_t>(img.feature_dim);
    put_pose(w, img.camera_pose);
    w.put(img.time);
    for (double d : img.depth) w.put(d);
    for (int c : img.class_ids) w.put<std::int32_t>(c);
    for (double f : img.features) w.put(static_cast<float>(f));
  }
  return w.take();
}

std::vector<FeatureImage> decode_images(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("GASPIMGS", "image file");
  if (r.get<std::uint32_t>() != kImageVersion) throw FormatError("image file: unsupported version");
  const std::uint32_t count = r.get<std::uint32_t>();
  std::vector<FeatureImage> images(count);
  for (FeatureImage& img : images) {
    Intrinsics& in = img.intrinsics;
    in.width = r.get<std::int32_t>();
    in.height = r.get<std::int32_t>();
    in.fx = r.get<double>();
    in.fy = r.get<double>();
    in.cx = r.get<double>();
    in.cy = r.get<double>();
    in.validate();
    img.feature_dim = r.get<std::int32_t>();
    img.camera_pose = get_pose(r);
    img.time = r.get<double>();
    const std::size_t pixels = static_cast<std::size_t>(in.width) * in.height;
    if (pixels * (8 + 4 + 4 * static_cast<std::size_t>(img.feature_dim)) > r.remaining()) {
      throw FormatError("image file: truncated");
    }
    img.depth.resize(pixels);
    for (double& d : img.depth) d = r.get<double>();
    img.class_ids.resize(pixels);
    for (int& c : img.class_ids) c = r.get<std::int32_t>();
    img.features.resize(pixels * img.feature_dim);
    for (double& f : img.features) f = r.get<float>();
  }
  if (r.remaining() != 0) throw FormatError("image file: trailing bytes");
  return images;
}

}  // namespace gasp
