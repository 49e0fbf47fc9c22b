#include "gasp/binary_io.hpp"
#include "gasp/scene_io.hpp"
#include "gasp/train.hpp"

namespace gasp {

using nlohmann::json;

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  const FieldParams& p = ckpt.params;
  json sections = json::array();
  for (const Section& s : p.sections()) sections.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  const bool has_adam = ckpt.adam.has_value() && !ckpt.adam->m.empty();
  if (has_adam && (ckpt.adam->m.size() != p.size() || ckpt.adam->v.size() != p.size())) {
    throw FormatError("encode_checkpoint: optimizer state does not match parameters");
  }
  const json header = {{"field", field_config_to_json(p.config())},
                       {"train", train_config_to_json(ckpt.train)},
                       {"config_digest", ckpt.config_digest},
                       {"adam_step", ckpt.adam ? ckpt.adam->step : 0},
                       {"has_adam", has_adam},
                       {"sections", sections}};
  const std::string text = header.dump();
  ByteWriter w;
  w.put_bytes("GASPCKPT");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text);
  for (double v : p.data()) w.put(v);
  if (has_adam) {
    for (double v : ckpt.adam->m) w.put(v);
    for (double v : ckpt.adam->v) w.put(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("GASPCKPT", "checkpoint");
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  const auto len = r.get<std::uint64_t>();
  if (len > r.remaining()) throw FormatError("checkpoint: truncated header");
  const json header = json_util::parse(r.get_bytes(static_cast<std::size_t>(len)), "checkpoint header");

  Checkpoint ckpt;
  ckpt.params = FieldParams(field_config_from_json(header.at("field")));
  ckpt.train = train_config_from_json(header.at("train"));
  ckpt.config_digest = header.value("config_digest", "");
  const json& sections = header.at("sections");
  const auto& expected = ckpt.params.sections();
  if (!sections.is_array() || sections.size() != expected.size()) {
    throw FormatError("checkpoint: section table does not match the field config");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const json& s = sections[i];
    if (s.at("name") != expected[i].name || s.at("rows") != expected[i].rows || s.at("cols") != expected[i].cols) {
      throw FormatError("checkpoint: section '" + expected[i].name + "' has unexpected name or shape");
    }
  }
  const std::size_t n = ckpt.params.size();
  const bool has_adam = header.value("has_adam", false);
  if (r.remaining() != n * 8 * (has_adam ? 3 : 1)) throw FormatError("checkpoint: payload size mismatch");
  for (double& v : ckpt.params.data()) v = r.get<double>();
  if (has_adam) {
    AdamState adam;
    adam.step = header.at("adam_step").get<int>();
    adam.m.resize(n);
    adam.v.resize(n);
    for (double& v : adam.m) v = r.get<double>();
    for (double& v : adam.v) v = r.get<double>();
    ckpt.adam = std::move(adam);
  }
  return ckpt;
}

}  // namespace gasp
