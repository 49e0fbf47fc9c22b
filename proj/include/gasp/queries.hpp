#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "gasp/geom.hpp"
#include "gasp/pca.hpp"
#include "gasp/scene.hpp"
#include "gasp/suite.hpp"

namespace gasp {

class EmptyScanError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

/// Where a query came from. The numeric values are part of the QuerySet
/// file format.
enum class QueryTag : std::uint8_t {
  kRayNegative = 0,
  kRayPositive = 1,
  kMissingRay = 2,
  kFeature = 3,
  kEgoPositive = 4,
  kEgoNegative = 5,
};

inline bool is_occupancy(QueryTag t) { return t <= QueryTag::kMissingRay; }
inline bool is_ego(QueryTag t) { return t == QueryTag::kEgoPositive || t == QueryTag::kEgoNegative; }
inline bool is_feature(QueryTag t) { return t == QueryTag::kFeature; }
const char* tag_name(QueryTag t);

struct Query {
  Vec3 position = Vec3::Zero();
  double time = 0.0;
  QueryTag tag = QueryTag::kRayNegative;
  std::uint8_t label = 0;       // occupancy / ego targets
  std::vector<double> feature;  // feature targets
  /// Global ray index (or sample index for ego queries); not serialised.
  std::uint64_t source = 0;
};

struct SamplerConfig {
  double delta = 0.1;
  std::size_t n_occ_pos = 9000;
  std::size_t n_occ_neg = 9000;
  std::size_t n_feat = 1000;
  std::size_t n_ego_pos = 100;
  std::size_t n_ego_neg = 100;
  double w_ego = 1.0;
  /// Spatial part of the region of interest, reference frame.
  Vec3 roi_min{-12.0, -12.0, -1.0};
  Vec3 roi_max{12.0, 12.0, 4.0};
  double t_max = 3.0;
  double jitter_tau = 1.0;
  int missing_ray_min_run = 5;
  int missing_ray_samples_per_ray = 1;
  double depth_tol = 0.2;
  int ego_max_attempts = 100;
  std::uint64_t seed = 42;

  /// Counts used at full scale; the defaults above are 1/100 of these.
  static SamplerConfig full_scale();
  bool roi_contains(const Vec3& p) const {
    return (p.array() >= roi_min.array()).all() && (p.array() <= roi_max.array()).all();
  }
  void validate() const;
};

nlohmann::json sampler_to_json(const SamplerConfig& cfg);
SamplerConfig sampler_from_json(const nlohmann::json& j);
nlohmann::json augment_to_json(const AugmentConfig& cfg);
AugmentConfig augment_from_json(const nlohmann::json& j);

/// A hit ray plus its index in the concatenation of the scans it came from.
struct RayRef {
  const Ray* ray = nullptr;
  std::uint64_t global_index = 0;
};

/// All hit rays of the scans, in scan-then-ray order.
std::vector<RayRef> collect_hit_rays(std::span<const LidarScan> scans);
/// Hit rays whose origin and end of the positive buffer lie inside the ROI.
std::vector<RayRef> collect_hit_rays_in_roi(std::span<const LidarScan> scans, const SamplerConfig& cfg);

/// Free-space samples s + d^tau (p - s), d ~ U(0,1), label 0.
std::vector<Query> gen_occupancy_negatives(std::span<const RayRef> pool, const SamplerConfig& cfg,
                                           std::size_t count, int workers = 1);
std::vector<Query> gen_occupancy_negatives(const LidarScan& scan, const SamplerConfig& cfg, std::size_t count);

/// Samples p + r (p - s)/|p - s|, r ~ U(0, delta), label 1.
std::vector<Query> gen_occupancy_positives(std::span<const RayRef> pool, const SamplerConfig& cfg,
                                           std::size_t count, int workers = 1);
std::vector<Query> gen_occupancy_positives(const LidarScan& scan, const SamplerConfig& cfg, std::size_t count);

/// One lidar point considered for feature supervision.
struct FeatureCandidate {
  std::size_t pool_index = 0;
  std::size_t image_index = 0;
  int u = 0;
  int v = 0;
  double depth = 0.0;
  bool visible = false;
};

/// Index of the image closest in time; ties go to the earlier image.
std::size_t closest_image(std::span<const FeatureImage> images, double t);

/// Projects every pooled hit into its closest image and applies per-pixel
/// min-depth filtering. Points outside the frustum are omitted.
std::vector<FeatureCandidate> min_depth_candidates(std::span<const RayRef> pool,
                                                   std::span<const FeatureImage> images,
                                                   const SamplerConfig& cfg);

struct FeatureStats {
  std::size_t in_frustum = 0;
  std::size_t visible = 0;
  std::size_t emitted = 0;
};

std::vector<Query> gen_feature_queries(std::span<const RayRef> pool, std::span<const FeatureImage> images,
                                       const PcaModel& pca, const SamplerConfig& cfg,
                                       FeatureStats* stats = nullptr);
std::vector<Query> gen_feature_queries(const LidarScan& scan, std::span<const FeatureImage> images,
                                       const PcaModel& pca, const SamplerConfig& cfg);

/// Future ego path as an x-y polyline in a given frame.
class EgoPath {
 public:
  EgoPath(const Scene& scene, double t0, double horizon, const Pose& world_to_frame = Pose());

  const std::vector<Vec3>& vertices() const { return vertices_; }
  double length() const { return cumulative_.back(); }
  /// Point at arc length s (clamped to the path).
  Vec3 point_at(double s) const;
  /// Exact x-y distance to the polyline.
  double distance_xy(const Vec3& q) const;

 private:
  std::vector<Vec3> vertices_;
  std::vector<double> cumulative_;
};

/// Tube positives (label 1) and ROI-minus-tube negatives (label 0), query
/// positions in the frame given by `world_to_ref`.
std::vector<Query> gen_ego_path_queries(const Scene& scene, double t0, const SamplerConfig& cfg,
                                        const Pose& world_to_ref = Pose());

/// Run of consecutive missing azimuth columns in one elevation row.
struct MissingRegion {
  std::size_t scan = 0;
  int row = 0;
  int column_begin = 0;
  int column_end = 0;  // exclusive
  int size() const { return column_end - column_begin; }
};

std::vector<MissingRegion> find_missing_regions(std::span<const LidarScan> scans, int min_run);

std::vector<Query> gen_missing_ray_negatives(std::span<const LidarScan> scans, const SamplerConfig& cfg);
std::vector<Query> gen_missing_ray_negatives(const LidarScan& scan, const SamplerConfig& cfg);

struct QuerySet {
  int feature_dim = 0;
  std::vector<Query> queries;
};

/// Sensor input to the encoder: past scans in the (possibly rotated)
/// reference frame with times relative to t0.
struct EncoderInput {
  std::vector<LidarScan> past_scans;
};

struct SampleMetadata {
  double theta = 0.0;
  std::uint64_t seed = 0;
  std::size_t counts[6] = {0, 0, 0, 0, 0, 0};
  std::size_t requested[6] = {0, 0, 0, 0, 0, 0};
  /// Set when fewer candidates than requested existed.
  bool feature_exhausted = false;
  std::size_t missing_ray_dropped_outside_roi = 0;
  FeatureStats feature_stats;
};

nlohmann::json metadata_to_json(const SampleMetadata& m);

struct TrainingSample {
  EncoderInput input;
  QuerySet queries;
  SampleMetadata metadata;
};

/// Builds one training sample around reference time t0: moves all data into
/// the ego frame at t0, runs every generator on its own stream family, then
/// optionally rotates the whole sample about z.
TrainingSample assemble_sample(std::span<const LidarScan> past_scans, std::span<const LidarScan> future_scans,
                               std::span<const FeatureImage> images, const Scene& scene, double t0,
                               const PcaModel& pca, const SamplerConfig& cfg, const AugmentConfig& aug,
                               int workers = 1);
TrainingSample assemble_sample(const Sequence& seq, const PcaModel& pca, const SamplerConfig& cfg,
                               const AugmentConfig& aug, int workers = 1);

/// QuerySet file: 16-byte header ("GASPQSET", u32 version, u32 feature dim),
/// records (tag u8, time f32, position 3 x f32, then u8 label or d x f32),
/// trailing u64 record count. Little-endian.
std::vector<std::uint8_t> encode_query_set(const QuerySet& set);
QuerySet decode_query_set(const std::vector<std::uint8_t>& bytes);

}  // namespace gasp
