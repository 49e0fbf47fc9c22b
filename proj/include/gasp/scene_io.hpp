#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "gasp/scene.hpp"

namespace gasp {

/// Raised for schema violations in JSON documents; the message names the
/// offending path (and line/column when the document failed to parse).
class ConfigError : public Error {
 public:
  using Error::Error;
};

nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);
/// Parses text and converts it; parse errors carry line and column.
Scene scene_from_text(const std::string& text);

/// Scan container: "GASPSCAN" magic, u32 version, u32 scan count, then
/// per scan the pattern, time and rays (f64 fields, u8 miss flag).
std::vector<std::uint8_t> encode_scans(const std::vector<LidarScan>& scans);
std::vector<LidarScan> decode_scans(const std::vector<std::uint8_t>& bytes);

/// Image container: "GASPIMGS" magic, u32 version, u32 image count, then per
/// image intrinsics, pose, time, depth (f64), class ids (i32), features (f32).
std::vector<std::uint8_t> encode_images(const std::vector<FeatureImage>& images);
std::vector<FeatureImage> decode_images(const std::vector<std::uint8_t>& bytes);

namespace json_util {

double number(const nlohmann::json& j, const std::string& key, const std::string& path);
double number_or(const nlohmann::json& j, const std::string& key, double fallback, const std::string& path);
int integer_or(const nlohmann::json& j, const std::string& key, int fallback, const std::string& path);
std::uint64_t uint_or(const nlohmann::json& j, const std::string& key, std::uint64_t fallback,
                      const std::string& path);
bool bool_or(const nlohmann::json& j, const std::string& key, bool fallback, const std::string& path);
Vec3 vec3(const nlohmann::json& j, const std::string& key, const std::string& path);
nlohmann::json parse(const std::string& text, const std::string& what);

}  // namespace json_util

}  // namespace gasp
