#include "gasp/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "gasp/parallel.hpp"
#include "gasp/queries.hpp"
#include "gasp/scene_io.hpp"

namespace gasp {

using nlohmann::json;
using nlohmann::ordered_json;

int EvalGrid::nx() const { return static_cast<int>(std::lround(2.0 * region / step)); }
int EvalGrid::nz() const { return static_cast<int>(std::lround((z_max - z_min) / step)); }

Vec3 EvalGrid::centre(std::size_t flat_index) const {
  const std::size_t n = static_cast<std::size_t>(nx());
  const int i = static_cast<int>(flat_index % n);
  const int j = static_cast<int>((flat_index / n) % n);
  const int k = static_cast<int>(flat_index / (n * n));
  return {x_lo(i) + 0.5 * step, x_lo(j) + 0.5 * step, z_lo(k) + 0.5 * step};
}

void EvalGrid::validate() const {
  if (!(step > 0.0)) throw Error("EvalGrid: step must be positive");
  if (!(region > 0.0) || !(z_max > z_min)) throw Error("EvalGrid: empty region");
  if (std::abs(nx() * step - 2.0 * region) > 1e-9 || std::abs(nz() * step - (z_max - z_min)) > 1e-9) {
    throw Error("EvalGrid: region extents must be multiples of step");
  }
  if (times.empty()) throw Error("EvalGrid: no probe times");
  for (double t : times) {
    if (!(t >= 0.0 && t <= t_max)) throw Error("EvalGrid: probe time outside [0, T_max]");
  }
  if (!(match_window >= 0.0)) throw Error("EvalGrid: match_window must be >= 0");
}

json eval_grid_to_json(const EvalGrid& g) {
  return {{"region", g.region}, {"z_min", g.z_min},   {"z_max", g.z_max},
          {"step", g.step},     {"times", g.times},   {"t_max", g.t_max},
          {"match_window", g.match_window}};
}

EvalGrid eval_grid_from_json(const json& j) {
  using namespace json_util;
  const std::string p = "eval_grid";
  EvalGrid g;
  g.region = number_or(j, "region", g.region, p);
  g.z_min = number_or(j, "z_min", g.z_min, p);
  g.z_max = number_or(j, "z_max", g.z_max, p);
  g.step = number_or(j, "step", g.step, p);
  g.t_max = number_or(j, "t_max", g.t_max, p);
  g.match_window = number_or(j, "match_window", g.match_window, p);
  if (j.contains("times")) {
    const json& t = j.at("times");
    if (!t.is_array()) throw ConfigError(p + ".times: expected an array");
    g.times.clear();
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!t[i].is_number()) throw ConfigError(p + ".times[" + std::to_string(i) + "]: expected a number");
      g.times.push_back(t[i].get<double>());
    }
  }
  try {
    g.validate();
  } catch (const Error& e) {
    throw ConfigError(p + ": " + e.what());
  }
  return g;
}

// ---- ray tracing --------------------------------------------------------------

std::optional<std::size_t> voxel_of(const EvalGrid& grid, const Vec3& p) {
  const double fi = std::floor((p.x() + grid.region) / grid.step);
  const double fj = std::floor((p.y() + grid.region) / grid.step);
  const double fk = std::floor((p.z() - grid.z_min) / grid.step);
  if (!(fi >= 0 && fi < grid.nx() && fj >= 0 && fj < grid.nx() && fk >= 0 && fk < grid.nz())) return std::nullopt;
  return grid.flat(static_cast<int>(fi), static_cast<int>(fj), static_cast<int>(fk));
}

namespace {

struct Axis {
  double a = 0.0;
  double d = 0.0;
  double lo = 0.0;
  double step = 0.0;
  int n = 0;
  double bound(int i) const { return lo + i * step; }
  // Parameter interval of slab i; only meaningful when d != 0.
  double enter(int i) const { return d > 0.0 ? (bound(i) - a) / d : (bound(i + 1) - a) / d; }
  double exit(int i) const { return d > 0.0 ? (bound(i + 1) - a) / d : (bound(i) - a) / d; }
  int fixed_index() const { return static_cast<int>(std::floor((a - lo) / step)); }
};

std::array<Axis, 3> make_axes(const EvalGrid& grid, const Vec3& a, const Vec3& b) {
  const Vec3 d = b - a;
  return {Axis{a.x(), d.x(), -grid.region, grid.step, grid.nx()},
          Axis{a.y(), d.y(), -grid.region, grid.step, grid.nx()},
          Axis{a.z(), d.z(), grid.z_min, grid.step, grid.nz()}};
}

}  // namespace

void traverse_segment(const EvalGrid& grid, const Vec3& a, const Vec3& b,
                      const std::function<void(std::size_t)>& visit) {
  const auto axes = make_axes(grid, a, b);
  double t_begin = 0.0;
  double t_end = 1.0;
  int idx[3];
  for (int ax = 0; ax < 3; ++ax) {
    const Axis& s = axes[ax];
    if (s.d == 0.0) {
      idx[ax] = s.fixed_index();
      if (idx[ax] < 0 || idx[ax] >= s.n) return;
      continue;
    }
    t_begin = std::max(t_begin, s.enter(s.d > 0.0 ? 0 : s.n - 1));
    t_end = std::min(t_end, s.exit(s.d > 0.0 ? s.n - 1 : 0));
  }
  if (!(t_end > t_begin)) return;

  for (int ax = 0; ax < 3; ++ax) {
    const Axis& s = axes[ax];
    if (s.d == 0.0) continue;
    const double p = s.a + t_begin * s.d;
    int i = std::clamp(static_cast<int>(std::floor((p - s.lo) / s.step)), 0, s.n - 1);
    // Settle on the slab whose parameter interval holds t_begin.
    while (s.exit(i) <= t_begin && i + (s.d > 0.0 ? 1 : -1) >= 0 && i + (s.d > 0.0 ? 1 : -1) < s.n) {
      i += s.d > 0.0 ? 1 : -1;
    }
    while (s.enter(i) > t_begin && i - (s.d > 0.0 ? 1 : -1) >= 0 && i - (s.d > 0.0 ? 1 : -1) < s.n) {
      i -= s.d > 0.0 ? 1 : -1;
    }
    idx[ax] = i;
  }

  for (;;) {
    double enter = t_begin;
    double exit = t_end;
    double next = std::numeric_limits<double>::infinity();
    for (int ax = 0; ax < 3; ++ax) {
      if (axes[ax].d == 0.0) continue;
      enter = std::max(enter, axes[ax].enter(idx[ax]));
      const double e = axes[ax].exit(idx[ax]);
      exit = std::min(exit, e);
      next = std::min(next, e);
    }
    if (exit > enter) visit(grid.flat(idx[0], idx[1], idx[2]));
    if (next >= t_end) return;
    for (int ax = 0; ax < 3; ++ax) {
      if (axes[ax].d == 0.0 || axes[ax].exit(idx[ax]) != next) continue;
      idx[ax] += axes[ax].d > 0.0 ? 1 : -1;
      if (idx[ax] < 0 || idx[ax] >= axes[ax].n) return;
    }
  }
}

std::vector<ProbeLabel> label_scan(const EvalGrid& grid, const LidarScan& scan,
                                   const std::function<bool(const Vec3&)>& gt_occupied) {
  const std::size_t n = grid.voxel_count();
  std::vector<std::uint8_t> traversed(n, 0);
  std::vector<std::uint8_t> occupied(n, 0);
  for (const Ray& ray : scan.rays) {
    if (ray.miss) continue;
    if (auto v = voxel_of(grid, ray.endpoint + 1e-6 * ray.direction)) occupied[*v] = 1;
    traverse_segment(grid, ray.origin, ray.endpoint, [&](std::size_t v) { traversed[v] = 1; });
  }
  std::vector<ProbeLabel> labels(n);
  for (std::size_t v = 0; v < n; ++v) {
    if (occupied[v] || (gt_occupied && gt_occupied(grid.centre(v)))) {
      labels[v] = ProbeLabel::kOccupied;
    } else {
      labels[v] = traversed[v] ? ProbeLabel::kFree : ProbeLabel::kUnknown;
    }
  }
  return labels;
}

std::optional<std::size_t> match_scan(std::span<const LidarScan> scans, double t, double window) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    const double gap = std::abs(scans[i].time - t);
    if (gap > window) continue;
    if (!best || gap < std::abs(scans[*best].time - t)) best = i;
  }
  return best;
}

std::vector<std::vector<ProbeLabel>> label_by_raytrace(std::span<const LidarScan> eval_scans, const EvalGrid& grid,
                                                       const std::function<bool(const Vec3&, double)>& gt_occupied) {
  grid.validate();
  std::vector<std::vector<ProbeLabel>> out;
  for (double t : grid.times) {
    const auto match = match_scan(eval_scans, t, grid.match_window);
    if (!match) {
      out.emplace_back(grid.voxel_count(), ProbeLabel::kUnknown);
      continue;
    }
    std::function<bool(const Vec3&)> gt;
    if (gt_occupied) gt = [&](const Vec3& c) { return gt_occupied(c, t); };
    out.push_back(label_scan(grid, eval_scans[*match], gt));
  }
  return out;
}

// ---- metrics ------------------------------------------------------------------

namespace {

struct Sweep {
  std::vector<std::size_t> order;  // descending score
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

Sweep prepare(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw Error("metric: scores and labels differ in length");
  Sweep s;
  s.order.resize(scores.size());
  std::iota(s.order.begin(), s.order.end(), std::size_t{0});
  std::stable_sort(s.order.begin(), s.order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  for (std::uint8_t y : labels) {
    if (y > 1) throw Error("metric: labels must be 0 or 1");
    (y ? s.positives : s.negatives)++;
  }
  return s;
}

// Calls fn(threshold, tp, fp) after each group of equal scores.
template <typename Fn>
void for_each_threshold(const Sweep& s, std::span<const double> scores, std::span<const std::uint8_t> labels, Fn&& fn) {
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < s.order.size()) {
    const double threshold = scores[s.order[i]];
    while (i < s.order.size() && scores[s.order[i]] == threshold) {
      (labels[s.order[i]] ? tp : fp)++;
      ++i;
    }
    fn(threshold, tp, fp);
  }
}

}  // namespace

RecallAtPrecision recall_at_precision(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                      double precision_target) {
  const Sweep s = prepare(scores, labels);
  if (s.positives == 0 || s.negatives == 0) {
    throw DegenerateLabelsError("recall_at_precision: need at least one positive and one negative label");
  }
  RecallAtPrecision best;
  double last_recall = 0.0;
  for_each_threshold(s, scores, labels, [&](double threshold, std::size_t tp, std::size_t fp) {
    const double recall = static_cast<double>(tp) / static_cast<double>(s.positives);
    if (recall < last_recall) throw Error("recall_at_precision: recall decreased while loosening");
    last_recall = recall;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (precision >= precision_target && recall >= best.recall) {
      best = {recall, threshold, precision};
    }
  });
  return best;
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const Sweep s = prepare(scores, labels);
  if (s.positives == 0) throw DegenerateLabelsError("average_precision: no positive labels");
  double ap = 0.0;
  double prev_recall = 0.0;
  for_each_threshold(s, scores, labels, [&](double, std::size_t tp, std::size_t fp) {
    const double recall = static_cast<double>(tp) / static_cast<double>(s.positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  });
  return ap;
}

double soft_iou(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw Error("soft_iou: scores and labels differ in length");
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) throw Error("soft_iou: scores must lie in [0, 1]");
    inter += scores[i] * labels[i];
    sum_p += scores[i];
    sum_y += labels[i];
  }
  const double denom = sum_p + sum_y - inter;
  if (denom == 0.0) return sum_p == 0.0 && sum_y == 0.0 ? 1.0 : 0.0;
  return inter / denom;
}

// ---- harness --------------------------------------------------------------------

bool eval_oracle(const EvalScene& es, const Vec3& ref_point, double t_rel) {
  const Pose ref_to_world = ego_pose_at(es.scene, es.t0);
  return occupancy_oracle(es.scene, ref_to_world.apply(ref_point), es.t0 + t_rel);
}

namespace {

double nan_if_degenerate(const std::function<double()>& fn) {
  try {
    return fn();
  } catch (const DegenerateLabelsError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

Eigen::VectorXd occupancy_scores(const FieldParams& params, const Grid& z, std::span<const Vec3> positions, double t,
                                 int workers) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(positions.size()));
  parallel_for(positions.size(), workers, [&](std::size_t begin, std::size_t end, std::size_t) {
    const std::vector<double> times(end - begin, t);
    const Eigen::MatrixXd logits =
        evaluate_head(params, z, Head::kOccupancy, positions.subspan(begin, end - begin), times);
    for (std::size_t i = begin; i < end; ++i) out(static_cast<Eigen::Index>(i)) = sigmoid(logits(0, static_cast<Eigen::Index>(i - begin)));
  });
  return out;
}

}  // namespace

EvalReport evaluate(const FieldParams& params, std::span<const EvalScene> scenes, const EvalGrid& grid,
                    const EgoEvalConfig& ego, double precision_target, int workers) {
  grid.validate();
  if (scenes.empty()) throw Error("evaluate: no evaluation scenes");
  if (grid.region > params.config().region) throw Error("evaluate: eval region exceeds the field grid");
  EvalReport report;
  report.precision_target = precision_target;

  const std::size_t nv = grid.voxel_count();
  std::vector<Vec3> centres(nv);
  for (std::size_t v = 0; v < nv; ++v) centres[v] = grid.centre(v);

  const std::size_t nt = grid.times.size();
  std::vector<std::vector<double>> scores(nt), rt_scores(nt);
  std::vector<std::vector<std::uint8_t>> oracle(nt), rt_labels(nt);
  std::size_t agree = 0, known = 0;
  std::vector<double> ego_scores;
  std::vector<std::uint8_t> ego_labels;

  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const EvalScene& es = scenes[si];
    const Pose ref_to_world = ego_pose_at(es.scene, es.t0);
    const Grid z = field_grid(params, es.histogram);
    auto gt_box = [&](const Vec3& c, double t) {
      const Vec3 w = ref_to_world.apply(c);
      return std::any_of(es.scene.boxes.begin(), es.scene.boxes.end(),
                         [&](const Box& b) { return b.contains(w, es.t0 + t); });
    };
    const auto rt = label_by_raytrace(es.eval_scans, grid, gt_box);
    for (std::size_t ti = 0; ti < nt; ++ti) {
      const double t = grid.times[ti];
      const Eigen::VectorXd s = occupancy_scores(params, z, centres, t, workers);
      for (std::size_t v = 0; v < nv; ++v) {
        const double score = s(static_cast<Eigen::Index>(v));
        const std::uint8_t y = occupancy_oracle(es.scene, ref_to_world.apply(centres[v]), es.t0 + t) ? 1 : 0;
        scores[ti].push_back(score);
        oracle[ti].push_back(y);
        switch (rt[ti][v]) {
          case ProbeLabel::kUnknown: report.unknown++; break;
          case ProbeLabel::kFree:
          case ProbeLabel::kOccupied: {
            const std::uint8_t ry = rt[ti][v] == ProbeLabel::kOccupied ? 1 : 0;
            (ry ? report.occupied : report.free)++;
            rt_scores[ti].push_back(score);
            rt_labels[ti].push_back(ry);
            ++known;
            if (ry == y) ++agree;
            break;
          }
        }
      }
    }

    const EgoPath path(es.scene, es.t0, grid.t_max, ref_to_world.inverse());
    const int n = static_cast<int>(std::lround(2.0 * grid.region / ego.lattice_step));
    std::vector<Vec3> pos;
    pos.reserve(static_cast<std::size_t>(n) * n);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        pos.emplace_back(-grid.region + (i + 0.5) * ego.lattice_step, -grid.region + (j + 0.5) * ego.lattice_step,
                         ego.probe_z);
      }
    }
    const std::vector<double> times(pos.size(), ego.probe_t);
    const Eigen::MatrixXd logits = evaluate_head(params, z, Head::kEgo, pos, times);
    std::vector<double> raster(pos.size());
    for (std::size_t k = 0; k < pos.size(); ++k) {
      raster[k] = sigmoid(logits(0, static_cast<Eigen::Index>(k)));
      ego_scores.push_back(raster[k]);
      ego_labels.push_back(path.distance_xy(pos[k]) <= ego.w_ego ? 1 : 0);
    }
    if (si == 0) {
      report.ego_raster = std::move(raster);
      report.ego_raster_size = n;
    }
  }

  std::vector<double> all_scores, all_rt_scores;
  std::vector<std::uint8_t> all_oracle, all_rt;
  for (std::size_t ti = 0; ti < nt; ++ti) {
    TimeBreakdown tb;
    tb.time = grid.times[ti];
    tb.positives = static_cast<std::size_t>(std::count(oracle[ti].begin(), oracle[ti].end(), 1));
    tb.r_at_p = nan_if_degenerate([&] { return recall_at_precision(scores[ti], oracle[ti], precision_target).recall; });
    tb.ap = nan_if_degenerate([&] { return average_precision(scores[ti], oracle[ti]); });
    tb.r_at_p_raytrace =
        nan_if_degenerate([&] { return recall_at_precision(rt_scores[ti], rt_labels[ti], precision_target).recall; });
    tb.ap_raytrace = nan_if_degenerate([&] { return average_precision(rt_scores[ti], rt_labels[ti]); });
    report.per_time.push_back(tb);
    all_scores.insert(all_scores.end(), scores[ti].begin(), scores[ti].end());
    all_oracle.insert(all_oracle.end(), oracle[ti].begin(), oracle[ti].end());
    all_rt_scores.insert(all_rt_scores.end(), rt_scores[ti].begin(), rt_scores[ti].end());
    all_rt.insert(all_rt.end(), rt_labels[ti].begin(), rt_labels[ti].end());
  }
  report.probes = all_scores.size();
  report.oracle_positives = static_cast<std::size_t>(std::count(all_oracle.begin(), all_oracle.end(), 1));
  RecallAtPrecision rp;
  rp.recall = std::numeric_limits<double>::quiet_NaN();
  try {
    rp = recall_at_precision(all_scores, all_oracle, precision_target);
  } catch (const DegenerateLabelsError&) {
  }
  report.r_at_p70 = rp.recall;
  report.threshold = rp.threshold;
  report.ap_occ = nan_if_degenerate([&] { return average_precision(all_scores, all_oracle); });
  report.soft_iou = soft_iou(all_scores, all_oracle);
  report.r_at_p70_raytrace =
      nan_if_degenerate([&] { return recall_at_precision(all_rt_scores, all_rt, precision_target).recall; });
  report.ap_occ_raytrace = nan_if_degenerate([&] { return average_precision(all_rt_scores, all_rt); });
  report.label_agreement = known ? static_cast<double>(agree) / static_cast<double>(known) : 0.0;
  report.ap_ego = nan_if_degenerate([&] { return average_precision(ego_scores, ego_labels); });
  report.ego_base_rate = ego_labels.empty() ? 0.0
                                            : static_cast<double>(std::count(ego_labels.begin(), ego_labels.end(), 1)) /
                                                  static_cast<double>(ego_labels.size());
  return report;
}

ordered_json report_to_json(const EvalReport& r) {
  auto num = [](double v) -> ordered_json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  ordered_json per_time = ordered_json::array();
  for (const TimeBreakdown& t : r.per_time) {
    per_time.push_back(ordered_json{{"time", t.time},
                                    {"r_at_p", num(t.r_at_p)},
                                    {"ap", num(t.ap)},
                                    {"r_at_p_raytrace", num(t.r_at_p_raytrace)},
                                    {"ap_raytrace", num(t.ap_raytrace)},
                                    {"oracle_positives", t.positives}});
  }
  return ordered_json{{"config_digest", r.config_digest},
                      {"r_at_p70", num(r.r_at_p70)},
                      {"ap_occ", num(r.ap_occ)},
                      {"soft_iou", num(r.soft_iou)},
                      {"ap_ego", num(r.ap_ego)},
                      {"per_time_breakdown", per_time},
                      {"probe_counts", {{"free", r.free}, {"occupied", r.occupied}, {"unknown", r.unknown}}},
                      {"precision_target", r.precision_target},
                      {"threshold", num(r.threshold)},
                      {"r_at_p70_raytrace", num(r.r_at_p70_raytrace)},
                      {"ap_occ_raytrace", num(r.ap_occ_raytrace)},
                      {"label_agreement", r.label_agreement},
                      {"ego_base_rate", r.ego_base_rate},
                      {"oracle_positives", r.oracle_positives},
                      {"probes", r.probes}};
}

std::vector<std::uint8_t> encode_pgm(std::span<const double> values, int width, int height) {
  if (static_cast<std::size_t>(width) * height != values.size()) throw Error("encode_pgm: size mismatch");
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (int row = height - 1; row >= 0; --row) {
    for (int col = 0; col < width; ++col) {
      const double v = std::clamp(values[static_cast<std::size_t>(row) * width + col], 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  }
  return out;
}

}  // namespace gasp
