#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gasp/field.hpp"
#include "gasp/scene.hpp"

namespace gasp {

class DegenerateLabelsError : public Error {
 public:
  using Error::Error;
};

/// Probe lattice: voxels of edge `step` tiling [-region, region]^2 x
/// [z_min, z_max], evaluated at each probe time (relative to t0).
struct EvalGrid {
  double region = 12.0;
  double z_min = -0.2;
  double z_max = 3.0;
  double step = 0.2;
  std::vector<double> times{0.6, 1.2, 1.8, 2.4, 3.0};
  double t_max = 3.0;
  /// Eval scans further than this from a probe time leave it unknown.
  double match_window = 0.3;

  int nx() const;  // voxels along x (and y)
  int nz() const;
  std::size_t voxel_count() const { return static_cast<std::size_t>(nx()) * nx() * nz(); }
  /// Lower corner of voxel index i along each axis.
  double x_lo(int i) const { return -region + i * step; }
  double z_lo(int k) const { return z_min + k * step; }
  /// Flat index (k * ny + j) * nx + i.
  std::size_t flat(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * nx() + j) * nx() + i;
  }
  Vec3 centre(std::size_t flat_index) const;
  void validate() const;
};

nlohmann::json eval_grid_to_json(const EvalGrid& g);
EvalGrid eval_grid_from_json(const nlohmann::json& j);

enum class ProbeLabel : std::uint8_t { kFree = 0, kOccupied = 1, kUnknown = 2 };

/// Voxel containing p, or nullopt outside the lattice.
std::optional<std::size_t> voxel_of(const EvalGrid& grid, const Vec3& p);

/// Incremental grid stepping along the segment a -> b. Visits, in order,
/// every voxel the segment overlaps with positive length.
void traverse_segment(const EvalGrid& grid, const Vec3& a, const Vec3& b,
                      const std::function<void(std::size_t)>& visit);

/// Labels one probe time from one scan in the reference frame: hit voxels
/// (found just behind each hit point) and voxels whose centre satisfies
/// `gt_occupied` are occupied; remaining voxels traversed by a sensor-to-hit
/// segment are free; everything else is unknown. Miss rays are ignored.
std::vector<ProbeLabel> label_scan(const EvalGrid& grid, const LidarScan& scan,
                                   const std::function<bool(const Vec3&)>& gt_occupied = {});

/// Index of the scan nearest in time to t within the window, if any.
std::optional<std::size_t> match_scan(std::span<const LidarScan> scans, double t, double window);

/// Labels every probe time; times without a matched scan are all unknown.
/// Result is indexed [time][voxel].
std::vector<std::vector<ProbeLabel>> label_by_raytrace(
    std::span<const LidarScan> eval_scans, const EvalGrid& grid,
    const std::function<bool(const Vec3&, double)>& gt_occupied = {});

struct RecallAtPrecision {
  double recall = 0.0;
  /// Predict positive iff score >= threshold; +inf when no threshold qualifies.
  double threshold = std::numeric_limits<double>::infinity();
  double precision = 0.0;
};

/// Sweeps every distinct score as a threshold. Labels are 0/1.
RecallAtPrecision recall_at_precision(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                      double precision_target);
/// Step sum of (R_k - R_{k-1}) P_k over descending distinct thresholds.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);
/// sum(p y) / (sum p + sum y - sum(p y)); 1 when both sums are 0.
double soft_iou(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// One evaluation scene: ground truth, the reference time, and the inputs
/// the model sees.
struct EvalScene {
  Scene scene;
  double t0 = 0.0;
  Eigen::MatrixXd histogram;  // pillar histogram of the past scans
  /// Eval scans in the reference frame, times relative to t0.
  std::vector<LidarScan> eval_scans;
};

struct EgoEvalConfig {
  double lattice_step = 0.5;
  double probe_z = 1.5;
  double probe_t = 1.5;
  double w_ego = 1.0;
};

struct TimeBreakdown {
  double time = 0.0;
  double r_at_p = 0.0;
  double ap = 0.0;
  double r_at_p_raytrace = 0.0;
  double ap_raytrace = 0.0;
  std::size_t positives = 0;
};

struct EvalReport {
  std::string config_digest;
  double precision_target = 0.7;
  double r_at_p70 = 0.0;  // exact-oracle labels
  double threshold = 0.0;
  double ap_occ = 0.0;
  double soft_iou = 0.0;
  double r_at_p70_raytrace = 0.0;
  double ap_occ_raytrace = 0.0;
  /// Fraction of non-unknown ray-traced labels equal to the oracle label.
  double label_agreement = 0.0;
  double ap_ego = 0.0;
  double ego_base_rate = 0.0;
  std::vector<TimeBreakdown> per_time;
  std::size_t free = 0, occupied = 0, unknown = 0;
  std::size_t oracle_positives = 0, probes = 0;
  /// BEV ego probabilities of the first scene, row-major (y, x).
  std::vector<double> ego_raster;
  int ego_raster_size = 0;
};

nlohmann::ordered_json report_to_json(const EvalReport& r);

/// Reference-frame oracle of an eval scene.
bool eval_oracle(const EvalScene& es, const Vec3& ref_point, double t_rel);

/// Runs the 4D occupancy and ego-path protocols over all scenes, pooling
/// probes across scenes and times.
EvalReport evaluate(const FieldParams& params, std::span<const EvalScene> scenes, const EvalGrid& grid,
                    const EgoEvalConfig& ego, double precision_target = 0.7, int workers = 1);

/// Binary PGM (P5) of a probability raster, row 0 at +y.
std::vector<std::uint8_t> encode_pgm(std::span<const double> values, int width, int height);

}  // namespace gasp
