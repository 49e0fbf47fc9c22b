#include "gasp/queries.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gasp/parallel.hpp"
#include "gasp/rng.hpp"
#include "gasp/scene_io.hpp"

namespace gasp {

using nlohmann::json;

namespace {

// Draw budget reserved per (ray, pass) so rejected draws never collide with
// the next pass of the same ray.
constexpr std::uint64_t kDrawsPerPass = 16;

void require_pool(std::span<const RayRef> pool, const char* what) {
  if (pool.empty()) throw EmptyScanError(std::string(what) + ": no hit rays");
}

// Seeded permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::uint64_t stream) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  RandomStream rng(seed, stream_id(StreamDomain::kShuffle, stream));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// Uniform draw strictly inside (0, 1) after mapping through `map`.
template <typename Map>
double open_draw(const RandomStream& rng, std::uint64_t first, Map&& map) {
  for (std::uint64_t k = 0; k < kDrawsPerPass; ++k) {
    const double value = map(rng.uniform_at(first + k));
    if (value > 0.0 && value < 1.0) return value;
  }
  throw SamplingError("open-interval draw exhausted its budget");
}

template <typename MakeQuery>
std::vector<Query> round_robin(std::span<const RayRef> pool, const SamplerConfig& cfg, std::size_t count,
                               std::uint64_t shuffle_stream, int workers, MakeQuery&& make) {
  const std::vector<std::size_t> order = shuffled_indices(pool.size(), cfg.seed, shuffle_stream);
  std::vector<Query> out(count);
  parallel_for(count, workers, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t k = begin; k < end; ++k) {
      const RayRef& ref = pool[order[k % pool.size()]];
      const std::uint64_t pass = k / pool.size();
      out[k] = make(ref, pass * kDrawsPerPass);
    }
  });
  return out;
}

constexpr std::uint64_t kNegShuffle = 1;
constexpr std::uint64_t kPosShuffle = 2;
constexpr std::uint64_t kFeatShuffle = 3;

}  // namespace

const char* tag_name(QueryTag t) {
  switch (t) {
    case QueryTag::kRayNegative: return "ray_negative";
    case QueryTag::kRayPositive: return "ray_positive";
    case QueryTag::kMissingRay: return "missing_ray";
    case QueryTag::kFeature: return "feature";
    case QueryTag::kEgoPositive: return "ego_pos";
    case QueryTag::kEgoNegative: return "ego_neg";
  }
  return "unknown";
}

SamplerConfig SamplerConfig::full_scale() {
  SamplerConfig c;
  c.n_occ_pos = 900'000;
  c.n_occ_neg = 900'000;
  c.n_feat = 100'000;
  c.n_ego_pos = 10'000;
  c.n_ego_neg = 10'000;
  return c;
}

void SamplerConfig::validate() const {
  if (!(delta > 0.0)) throw Error("SamplerConfig: delta must be positive");
  if (!(w_ego > 0.0)) throw Error("SamplerConfig: w_ego must be positive");
  if (!(t_max > 0.0)) throw Error("SamplerConfig: t_max must be positive");
  if (!(jitter_tau > 0.0)) throw Error("SamplerConfig: jitter_tau must be positive");
  if (missing_ray_min_run < 1) throw Error("SamplerConfig: missing_ray_min_run must be >= 1");
  if (missing_ray_samples_per_ray < 0) throw Error("SamplerConfig: missing_ray_samples_per_ray must be >= 0");
  if (!(roi_min.array() < roi_max.array()).all()) throw Error("SamplerConfig: empty ROI");
  if (!(depth_tol >= 0.0)) throw Error("SamplerConfig: depth_tol must be >= 0");
  if (ego_max_attempts < 1) throw Error("SamplerConfig: ego_max_attempts must be >= 1");
}

json sampler_to_json(const SamplerConfig& c) {
  return {{"delta", c.delta},
          {"n_occ_pos", c.n_occ_pos},
          {"n_occ_neg", c.n_occ_neg},
          {"n_feat", c.n_feat},
          {"n_ego_pos", c.n_ego_pos},
          {"n_ego_neg", c.n_ego_neg},
          {"w_ego", c.w_ego},
          {"roi_min", {c.roi_min.x(), c.roi_min.y(), c.roi_min.z()}},
          {"roi_max", {c.roi_max.x(), c.roi_max.y(), c.roi_max.z()}},
          {"t_max", c.t_max},
          {"jitter_tau", c.jitter_tau},
          {"missing_ray_min_run", c.missing_ray_min_run},
          {"missing_ray_samples_per_ray", c.missing_ray_samples_per_ray},
          {"depth_tol", c.depth_tol},
          {"ego_max_attempts", c.ego_max_attempts},
          {"seed", c.seed}};
}

SamplerConfig sampler_from_json(const json& j) {
  using namespace json_util;
  const std::string p = "sampler";
  SamplerConfig c;
  c.delta = number_or(j, "delta", c.delta, p);
  c.n_occ_pos = uint_or(j, "n_occ_pos", c.n_occ_pos, p);
  c.n_occ_neg = uint_or(j, "n_occ_neg", c.n_occ_neg, p);
  c.n_feat = uint_or(j, "n_feat", c.n_feat, p);
  c.n_ego_pos = uint_or(j, "n_ego_pos", c.n_ego_pos, p);
  c.n_ego_neg = uint_or(j, "n_ego_neg", c.n_ego_neg, p);
  c.w_ego = number_or(j, "w_ego", c.w_ego, p);
  if (j.contains("roi_min")) c.roi_min = vec3(j, "roi_min", p);
  if (j.contains("roi_max")) c.roi_max = vec3(j, "roi_max", p);
  c.t_max = number_or(j, "t_max", c.t_max, p);
  c.jitter_tau = number_or(j, "jitter_tau", c.jitter_tau, p);
  c.missing_ray_min_run = integer_or(j, "missing_ray_min_run", c.missing_ray_min_run, p);
  c.missing_ray_samples_per_ray = integer_or(j, "missing_ray_samples_per_ray", c.missing_ray_samples_per_ray, p);
  c.depth_tol = number_or(j, "depth_tol", c.depth_tol, p);
  c.ego_max_attempts = integer_or(j, "ego_max_attempts", c.ego_max_attempts, p);
  c.seed = uint_or(j, "seed", c.seed, p);
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(p + ": " + e.what());
  }
  return c;
}

json augment_to_json(const AugmentConfig& a) {
  return {{"theta_min", a.theta_min},
          {"theta_max", a.theta_max},
          {"jitter_tau", a.jitter_tau},
          {"rotation_enabled", a.rotation_enabled},
          {"jitter_enabled", a.jitter_enabled}};
}

AugmentConfig augment_from_json(const json& j) {
  using namespace json_util;
  const std::string p = "augment";
  AugmentConfig a;
  a.theta_min = number_or(j, "theta_min", a.theta_min, p);
  a.theta_max = number_or(j, "theta_max", a.theta_max, p);
  a.jitter_tau = number_or(j, "jitter_tau", a.jitter_tau, p);
  a.rotation_enabled = bool_or(j, "rotation_enabled", a.rotation_enabled, p);
  a.jitter_enabled = bool_or(j, "jitter_enabled", a.jitter_enabled, p);
  try {
    a.validate();
  } catch (const Error& e) {
    throw ConfigError(p + ": " + e.what());
  }
  return a;
}

// ---- ray pools --------------------------------------------------------------

std::vector<RayRef> collect_hit_rays(std::span<const LidarScan> scans) {
  std::vector<RayRef> pool;
  std::uint64_t offset = 0;
  for (const LidarScan& scan : scans) {
    for (std::size_t i = 0; i < scan.rays.size(); ++i) {
      if (!scan.rays[i].miss) pool.push_back({&scan.rays[i], offset + i});
    }
    offset += scan.rays.size();
  }
  return pool;
}

std::vector<RayRef> collect_hit_rays_in_roi(std::span<const LidarScan> scans, const SamplerConfig& cfg) {
  std::vector<RayRef> pool = collect_hit_rays(scans);
  std::erase_if(pool, [&](const RayRef& r) {
    const Ray& ray = *r.ray;
    const Vec3 buffer_end = ray.endpoint + cfg.delta * (ray.endpoint - ray.origin).normalized();
    return !cfg.roi_contains(ray.origin) || !cfg.roi_contains(buffer_end) || ray.time < 0.0 ||
           ray.time > cfg.t_max;
  });
  return pool;
}

// ---- occupancy ----------------------------------------------------------------

std::vector<Query> gen_occupancy_negatives(std::span<const RayRef> pool, const SamplerConfig& cfg,
                                           std::size_t count, int workers) {
  require_pool(pool, "gen_occupancy_negatives");
  const double tau = cfg.jitter_tau;
  return round_robin(pool, cfg, count, kNegShuffle, workers, [&](const RayRef& ref, std::uint64_t first) {
    const Ray& ray = *ref.ray;
    const RandomStream rng = per_ray_rng(cfg.seed, ref.global_index, StreamDomain::kOccNegative);
    const double f = open_draw(rng, first, [&](double d) { return tau == 1.0 ? d : std::pow(d, tau); });
    Query q;
    q.position = ray.origin + f * (ray.endpoint - ray.origin);
    q.time = ray.time;
    q.tag = QueryTag::kRayNegative;
    q.label = 0;
    q.source = ref.global_index;
    return q;
  });
}

std::vector<Query> gen_occupancy_negatives(const LidarScan& scan, const SamplerConfig& cfg, std::size_t count) {
  const auto pool = collect_hit_rays(std::span(&scan, 1));
  return gen_occupancy_negatives(pool, cfg, count);
}

std::vector<Query> gen_occupancy_positives(std::span<const RayRef> pool, const SamplerConfig& cfg,
                                           std::size_t count, int workers) {
  require_pool(pool, "gen_occupancy_positives");
  return round_robin(pool, cfg, count, kPosShuffle, workers, [&](const RayRef& ref, std::uint64_t first) {
    const Ray& ray = *ref.ray;
    const RandomStream rng = per_ray_rng(cfg.seed, ref.global_index, StreamDomain::kOccPositive);
    const double frac = open_draw(rng, first, [](double u) { return u; });
    const Vec3 dir = (ray.endpoint - ray.origin) / (ray.endpoint - ray.origin).norm();
    Query q;
    q.position = ray.endpoint + (cfg.delta * frac) * dir;
    q.time = ray.time;
    q.tag = QueryTag::kRayPositive;
    q.label = 1;
    q.source = ref.global_index;
    return q;
  });
}

std::vector<Query> gen_occupancy_positives(const LidarScan& scan, const SamplerConfig& cfg, std::size_t count) {
  const auto pool = collect_hit_rays(std::span(&scan, 1));
  return gen_occupancy_positives(pool, cfg, count);
}

// ---- feature queries --------------------------------------------------------

std::size_t closest_image(std::span<const FeatureImage> images, double t) {
  if (images.empty()) throw Error("closest_image: empty image list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < images.size(); ++i) {
    const double di = std::abs(images[i].time - t);
    const double db = std::abs(images[best].time - t);
    if (di < db || (di == db && images[i].time < images[best].time)) best = i;
  }
  return best;
}

std::vector<FeatureCandidate> min_depth_candidates(std::span<const RayRef> pool,
                                                   std::span<const FeatureImage> images,
                                                   const SamplerConfig& cfg) {
  if (images.empty()) throw Error("min_depth_candidates: empty image list");
  std::vector<FeatureCandidate> cands;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Ray& ray = *pool[i].ray;
    const std::size_t img = closest_image(images, ray.time);
    const auto proj = images[img].project(ray.endpoint);
    if (!proj) continue;
    cands.push_back({i, img, proj->u, proj->v, proj->depth, false});
  }
  std::vector<std::vector<double>> zbuf(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    zbuf[i].assign(static_cast<std::size_t>(images[i].width()) * images[i].height(),
                   std::numeric_limits<double>::infinity());
  }
  auto cell = [&](const FeatureCandidate& c) -> double& {
    return zbuf[c.image_index][static_cast<std::size_t>(c.v) * images[c.image_index].width() + c.u];
  };
  for (const auto& c : cands) cell(c) = std::min(cell(c), c.depth);
  for (auto& c : cands) c.visible = c.depth <= cell(c) + cfg.depth_tol;
  return cands;
}

std::vector<Query> gen_feature_queries(std::span<const RayRef> pool, std::span<const FeatureImage> images,
                                       const PcaModel& pca, const SamplerConfig& cfg, FeatureStats* stats) {
  if (images.empty()) throw Error("gen_feature_queries: empty image list");
  const auto cands = min_depth_candidates(pool, images, cfg);
  std::vector<std::size_t> visible;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (cands[i].visible) visible.push_back(i);
  }
  if (visible.size() > cfg.n_feat) {
    const auto order = shuffled_indices(visible.size(), cfg.seed, kFeatShuffle);
    std::vector<std::size_t> keep;
    keep.reserve(cfg.n_feat);
    for (std::size_t k = 0; k < cfg.n_feat; ++k) keep.push_back(visible[order[k]]);
    std::sort(keep.begin(), keep.end());
    visible = std::move(keep);
  }
  std::vector<Query> out;
  out.reserve(visible.size());
  for (std::size_t idx : visible) {
    const FeatureCandidate& c = cands[idx];
    const RayRef& ref = pool[c.pool_index];
    const Ray& ray = *ref.ray;
    const RandomStream rng = per_ray_rng(cfg.seed, ref.global_index, StreamDomain::kFeature);
    const double frac = open_draw(rng, 0, [](double u) { return u; });
    const Vec3 dir = (ray.endpoint - ray.origin) / (ray.endpoint - ray.origin).norm();
    Query q;
    q.position = ray.endpoint + (cfg.delta * frac) * dir;
    q.time = ray.time;
    q.tag = QueryTag::kFeature;
    const Eigen::VectorXd target = project(pca, images[c.image_index].feature(c.u, c.v));
    q.feature.assign(target.data(), target.data() + target.size());
    q.source = ref.global_index;
    out.push_back(std::move(q));
  }
  if (stats) {
    stats->in_frustum = cands.size();
    stats->visible = static_cast<std::size_t>(std::count_if(cands.begin(), cands.end(), [](const auto& c) { return c.visible; }));
    stats->emitted = out.size();
  }
  return out;
}

std::vector<Query> gen_feature_queries(const LidarScan& scan, std::span<const FeatureImage> images,
                                       const PcaModel& pca, const SamplerConfig& cfg) {
  const auto pool = collect_hit_rays(std::span(&scan, 1));
  return gen_feature_queries(pool, images, pca, cfg);
}

// ---- ego path -------------------------------------------------------------------

EgoPath::EgoPath(const Scene& scene, double t0, double horizon, const Pose& world_to_frame) {
  if (!scene.in_horizon(t0) || !scene.in_horizon(t0 + horizon)) {
    throw OutOfHorizonError("EgoPath: ego trajectory does not cover [t0, t0 + T_max]");
  }
  auto flat = [&](double t) {
    Vec3 p = world_to_frame.apply(ego_pose_at(scene, t).translation());
    return p;
  };
  vertices_.push_back(flat(t0));
  for (const EgoKeyframe& k : scene.ego_track) {
    if (k.time > t0 && k.time < t0 + horizon) vertices_.push_back(flat(k.time));
  }
  vertices_.push_back(flat(t0 + horizon));
  cumulative_.push_back(0.0);
  for (std::size_t i = 1; i < vertices_.size(); ++i) {
    cumulative_.push_back(cumulative_.back() + (vertices_[i] - vertices_[i - 1]).head<2>().norm());
  }
}

Vec3 EgoPath::point_at(double s) const {
  s = std::clamp(s, 0.0, length());
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
  if (it == cumulative_.end()) return vertices_.back();
  const std::size_t i = static_cast<std::size_t>(it - cumulative_.begin());
  const double seg = cumulative_[i] - cumulative_[i - 1];
  const double alpha = seg > 0.0 ? (s - cumulative_[i - 1]) / seg : 0.0;
  return vertices_[i - 1] + alpha * (vertices_[i] - vertices_[i - 1]);
}

double EgoPath::distance_xy(const Vec3& q) const {
  const Eigen::Vector2d p = q.head<2>();
  double best = (p - vertices_.front().head<2>()).norm();
  for (std::size_t i = 1; i < vertices_.size(); ++i) {
    const Eigen::Vector2d a = vertices_[i - 1].head<2>();
    const Eigen::Vector2d ab = vertices_[i].head<2>() - a;
    const double len2 = ab.squaredNorm();
    const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    best = std::min(best, (p - (a + t * ab)).norm());
  }
  return best;
}

std::vector<Query> gen_ego_path_queries(const Scene& scene, double t0, const SamplerConfig& cfg,
                                        const Pose& world_to_ref) {
  const EgoPath path(scene, t0, cfg.t_max, world_to_ref);
  std::vector<Query> out;
  out.reserve(cfg.n_ego_pos + cfg.n_ego_neg);
  auto in_roi_xy = [&](const Vec3& p) {
    return p.x() >= cfg.roi_min.x() && p.x() <= cfg.roi_max.x() && p.y() >= cfg.roi_min.y() &&
           p.y() <= cfg.roi_max.y();
  };
  for (std::size_t k = 0; k < cfg.n_ego_pos; ++k) {
    RandomStream rng(cfg.seed, stream_id(StreamDomain::kEgoPositive, k));
    bool accepted = false;
    for (int attempt = 0; attempt < cfg.ego_max_attempts && !accepted; ++attempt) {
      const Vec3 centre = path.point_at(rng.uniform(0.0, path.length()));
      const double radius = cfg.w_ego * std::sqrt(rng.uniform());
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      Vec3 p(centre.x() + radius * std::cos(angle), centre.y() + radius * std::sin(angle),
             rng.uniform(cfg.roi_min.z(), cfg.roi_max.z()));
      const double t = rng.uniform(0.0, cfg.t_max);
      if (!in_roi_xy(p) || path.distance_xy(p) > cfg.w_ego) continue;
      Query q;
      q.position = p;
      q.time = t;
      q.tag = QueryTag::kEgoPositive;
      q.label = 1;
      q.source = k;
      out.push_back(std::move(q));
      accepted = true;
    }
    if (!accepted) throw SamplingError("gen_ego_path_queries: positive sampling exceeded attempt cap");
  }
  for (std::size_t k = 0; k < cfg.n_ego_neg; ++k) {
    RandomStream rng(cfg.seed, stream_id(StreamDomain::kEgoNegative, k));
    bool accepted = false;
    for (int attempt = 0; attempt < cfg.ego_max_attempts && !accepted; ++attempt) {
      Vec3 p(rng.uniform(cfg.roi_min.x(), cfg.roi_max.x()), rng.uniform(cfg.roi_min.y(), cfg.roi_max.y()),
             rng.uniform(cfg.roi_min.z(), cfg.roi_max.z()));
      const double t = rng.uniform(0.0, cfg.t_max);
      if (path.distance_xy(p) <= cfg.w_ego) continue;
      Query q;
      q.position = p;
      q.time = t;
      q.tag = QueryTag::kEgoNegative;
      q.label = 0;
      q.source = k;
      out.push_back(std::move(q));
      accepted = true;
    }
    if (!accepted) throw SamplingError("gen_ego_path_queries: negative sampling exceeded attempt cap");
  }
  return out;
}

// ---- missing rays -------------------------------------------------------------

std::vector<MissingRegion> find_missing_regions(std::span<const LidarScan> scans, int min_run) {
  std::vector<MissingRegion> regions;
  for (std::size_t s = 0; s < scans.size(); ++s) {
    const LidarScan& scan = scans[s];
    const int cols = scan.pattern.azimuth_count;
    const int rows = scan.pattern.elevation_count;
    if (static_cast<std::size_t>(cols) * rows != scan.rays.size()) {
      throw Error("find_missing_regions: scan does not match its pattern");
    }
    for (int r = 0; r < rows; ++r) {
      int c = 0;
      while (c < cols) {
        if (!scan.rays[static_cast<std::size_t>(r) * cols + c].miss) {
          ++c;
          continue;
        }
        int end = c;
        while (end < cols && scan.rays[static_cast<std::size_t>(r) * cols + end].miss) ++end;
        if (end - c >= min_run) regions.push_back({s, r, c, end});
        c = end;
      }
    }
  }
  return regions;
}

std::vector<Query> gen_missing_ray_negatives(std::span<const LidarScan> scans, const SamplerConfig& cfg) {
  std::vector<std::uint64_t> offsets;
  std::uint64_t offset = 0;
  for (const LidarScan& s : scans) {
    offsets.push_back(offset);
    offset += s.rays.size();
  }
  std::vector<Query> out;
  for (const MissingRegion& region : find_missing_regions(scans, cfg.missing_ray_min_run)) {
    const LidarScan& scan = scans[region.scan];
    for (int c = region.column_begin; c < region.column_end; ++c) {
      const std::size_t local = static_cast<std::size_t>(region.row) * scan.pattern.azimuth_count + c;
      const Ray& ray = scan.rays[local];
      const std::uint64_t global = offsets[region.scan] + local;
      const RandomStream rng = per_ray_rng(cfg.seed, global, StreamDomain::kMissingRay);
      for (int k = 0; k < cfg.missing_ray_samples_per_ray; ++k) {
        const double u = 0.05 + 0.9 * rng.uniform_at(static_cast<std::uint64_t>(k));
        Query q;
        q.position = ray.origin + (u * scan.pattern.max_range) * ray.direction;
        q.time = ray.time;
        q.tag = QueryTag::kMissingRay;
        q.label = 0;
        q.source = global;
        out.push_back(std::move(q));
      }
    }
  }
  return out;
}

std::vector<Query> gen_missing_ray_negatives(const LidarScan& scan, const SamplerConfig& cfg) {
  return gen_missing_ray_negatives(std::span(&scan, 1), cfg);
}

// ---- assembly -------------------------------------------------------------------

json metadata_to_json(const SampleMetadata& m) {
  json counts = json::object();
  json requested = json::object();
  for (int t = 0; t < 6; ++t) {
    counts[tag_name(static_cast<QueryTag>(t))] = m.counts[t];
    requested[tag_name(static_cast<QueryTag>(t))] = m.requested[t];
  }
  return {{"theta", m.theta},
          {"seed", m.seed},
          {"counts", counts},
          {"requested", requested},
          {"feature_exhausted", m.feature_exhausted},
          {"missing_ray_dropped_outside_roi", m.missing_ray_dropped_outside_roi},
          {"feature_in_frustum", m.feature_stats.in_frustum},
          {"feature_visible", m.feature_stats.visible}};
}

TrainingSample assemble_sample(std::span<const LidarScan> past_scans, std::span<const LidarScan> future_scans,
                               std::span<const FeatureImage> images, const Scene& scene, double t0,
                               const PcaModel& pca, const SamplerConfig& cfg_in, const AugmentConfig& aug,
                               int workers) {
  cfg_in.validate();
  aug.validate();
  SamplerConfig cfg = cfg_in;
  if (aug.jitter_enabled) cfg.jitter_tau = aug.jitter_tau;

  const Pose world_to_ref = ego_pose_at(scene, t0).inverse();
  std::vector<LidarScan> future;
  future.reserve(future_scans.size());
  for (const LidarScan& s : future_scans) {
    LidarScan moved = retime_scan(transform_scan(s, world_to_ref), t0);
    if (moved.time < -1e-9 || moved.time > cfg.t_max + 1e-9) {
      throw Error("assemble_sample: future scan outside [0, T_max]");
    }
    future.push_back(std::move(moved));
  }
  std::vector<FeatureImage> ref_images(images.begin(), images.end());
  for (FeatureImage& img : ref_images) {
    img.camera_pose = compose(world_to_ref, img.camera_pose);
    img.time -= t0;
  }

  double theta = 0.0;
  if (aug.rotation_enabled) {
    theta = aug.force_theta ? aug.forced_theta
                            : RandomStream(cfg.seed, stream_id(StreamDomain::kAugment, 0))
                                  .uniform(aug.theta_min, aug.theta_max);
  }

  TrainingSample sample;
  sample.metadata.theta = theta;
  sample.metadata.seed = cfg.seed;
  sample.queries.feature_dim = pca.output_dim();

  const std::vector<RayRef> pool = collect_hit_rays_in_roi(future, cfg);
  auto negatives = gen_occupancy_negatives(pool, cfg, cfg.n_occ_neg, workers);
  auto positives = gen_occupancy_positives(pool, cfg, cfg.n_occ_pos, workers);
  auto missing = gen_missing_ray_negatives(future, cfg);
  const std::size_t missing_total = missing.size();
  std::erase_if(missing, [&](const Query& q) { return !cfg.roi_contains(q.position); });
  sample.metadata.missing_ray_dropped_outside_roi = missing_total - missing.size();
  std::vector<Query> features;
  if (cfg.n_feat > 0 && !ref_images.empty()) {
    features = gen_feature_queries(pool, ref_images, pca, cfg, &sample.metadata.feature_stats);
  }
  sample.metadata.feature_exhausted = features.size() < cfg.n_feat;
  auto ego = gen_ego_path_queries(scene, t0, cfg, world_to_ref);

  auto& out = sample.queries.queries;
  out.reserve(negatives.size() + positives.size() + missing.size() + features.size() + ego.size());
  for (auto* part : {&negatives, &positives, &missing, &features, &ego}) {
    for (Query& q : *part) out.push_back(std::move(q));
  }
  for (Query& q : out) q.time = std::clamp(q.time, 0.0, cfg.t_max);
  if (theta != 0.0) {
    for (Query& q : out) q.position = rotate_about_z(q.position, theta);
  }

  const Pose rotation = Pose::from_yaw(theta, Vec3::Zero());
  for (const LidarScan& s : past_scans) {
    LidarScan moved = retime_scan(transform_scan(s, world_to_ref), t0);
    if (theta != 0.0) moved = transform_scan(moved, rotation);
    sample.input.past_scans.push_back(std::move(moved));
  }

  for (const Query& q : out) sample.metadata.counts[static_cast<int>(q.tag)]++;
  sample.metadata.requested[0] = cfg.n_occ_neg;
  sample.metadata.requested[1] = cfg.n_occ_pos;
  sample.metadata.requested[2] = sample.metadata.counts[2];
  sample.metadata.requested[3] = cfg.n_feat;
  sample.metadata.requested[4] = cfg.n_ego_pos;
  sample.metadata.requested[5] = cfg.n_ego_neg;
  return sample;
}

TrainingSample assemble_sample(const Sequence& seq, const PcaModel& pca, const SamplerConfig& cfg,
                               const AugmentConfig& aug, int workers) {
  return assemble_sample(seq.past, seq.future, seq.images, seq.scene, seq.t0, pca, cfg, aug, workers);
}

}  // namespace gasp
