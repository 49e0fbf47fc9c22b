#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include <json.hpp>

namespace gasp {

/// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

/// Compact dump with sorted keys; equal configs give equal text.
std::string canonical_json(const nlohmann::json& j);
/// SHA-256 of the canonical dump.
std::string config_digest(const nlohmann::json& j);

}  // namespace gasp
