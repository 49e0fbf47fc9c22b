#include "gasp/binary_io.hpp"
#include "gasp/queries.hpp"

namespace gasp {

namespace {
constexpr std::uint32_t kQuerySetVersion = 1;
}

std::vector<std::uint8_t> encode_query_set(const QuerySet& set) {
  if (set.feature_dim < 0) throw FormatError("encode_query_set: negative feature dim");
  ByteWriter w;
  w.put_bytes("GASPQSET");
  w.put<std::uint32_t>(kQuerySetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(set.feature_dim));
  for (const Query& q : set.queries) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(q.tag));
    w.put(static_cast<float>(q.time));
    w.put(static_cast<float>(q.position.x()));
    w.put(static_cast<float>(q.position.y()));
    w.put(static_cast<float>(q.position.z()));
    if (is_feature(q.tag)) {
      if (static_cast<int>(q.feature.size()) != set.feature_dim) {
        throw FormatError("encode_query_set: feature length does not match header");
      }
      for (double f : q.feature) w.put(static_cast<float>(f));
    } else {
      if (q.label > 1) throw FormatError("encode_query_set: label must be 0 or 1");
      w.put<std::uint8_t>(q.label);
    }
  }
  w.put<std::uint64_t>(set.queries.size());
  return w.take();
}

QuerySet decode_query_set(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("GASPQSET", "query set");
  if (r.get<std::uint32_t>() != kQuerySetVersion) throw FormatError("query set: unsupported version");
  QuerySet set;
  set.feature_dim = static_cast<int>(r.get<std::uint32_t>());
  while (r.remaining() > sizeof(std::uint64_t)) {
    Query q;
    const auto tag = r.get<std::uint8_t>();
    if (tag > static_cast<std::uint8_t>(QueryTag::kEgoNegative)) throw FormatError("query set: unknown tag");
    q.tag = static_cast<QueryTag>(tag);
    q.time = r.get<float>();
    const double x = r.get<float>();
    const double y = r.get<float>();
    const double z = r.get<float>();
    q.position = Vec3(x, y, z);
    if (is_feature(q.tag)) {
      q.feature.resize(static_cast<std::size_t>(set.feature_dim));
      for (double& f : q.feature) f = r.get<float>();
    } else {
      q.label = r.get<std::uint8_t>();
      if (q.label > 1) throw FormatError("query set: label must be 0 or 1");
    }
    q.source = set.queries.size();
    set.queries.push_back(std::move(q));
  }
  const auto count = r.get<std::uint64_t>();
  if (count != set.queries.size()) throw FormatError("query set: record count mismatch");
  return set;
}

}  // namespace gasp
