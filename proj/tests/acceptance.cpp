// Acceptance suite. Each criterion prints one PASS/FAIL line; the exit status
// is 1 when any selected criterion fails, including by exceeding its budget.
#include <Eigen/Eigenvalues>

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gasp/binary_io.hpp"
#include "gasp/digest.hpp"
#include "gasp/eval.hpp"
#include "gasp/pca.hpp"
#include "gasp/pipeline.hpp"
#include "gasp/queries.hpp"
#include "gasp/scene_io.hpp"
#include "gasp/suite.hpp"
#include "gasp/train.hpp"
#include "gradcheck.hpp"
#include "metric_oracle.hpp"
#include "pipeline_support.hpp"
#include "support.hpp"

using namespace gasp;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void note(const std::string& line) { std::fprintf(stderr, "  %s\n", line.c_str()); }

// ---- 1: label soundness -------------------------------------------------------

// Exact x-y distance to the piecewise-linear ego track over [t0, t1], built
// from the keyframes directly.
double tube_distance(const std::vector<EgoKeyframe>& track, double t0, double t1, const Vec3& p) {
  auto lerp = [&](double t) {
    for (std::size_t k = 0; k + 1 < track.size(); ++k) {
      if (t >= track[k].time && t <= track[k + 1].time) {
        const double a = (t - track[k].time) / (track[k + 1].time - track[k].time);
        return Eigen::Vector2d(track[k].translation.head<2>() + a * (track[k + 1].translation - track[k].translation).head<2>());
      }
    }
    throw Error("tube_distance: time outside the track");
  };
  std::vector<Eigen::Vector2d> pts{lerp(t0)};
  for (const EgoKeyframe& k : track) {
    if (k.time > t0 && k.time < t1) pts.push_back(k.translation.head<2>());
  }
  pts.push_back(lerp(t1));
  const Eigen::Vector2d q = p.head<2>();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const Eigen::Vector2d d = pts[i + 1] - pts[i];
    const double len2 = d.squaredNorm();
    const double s = len2 == 0.0 ? 0.0 : std::clamp((q - pts[i]).dot(d) / len2, 0.0, 1.0);
    best = std::min(best, (pts[i] + s * d - q).norm());
  }
  return best;
}

Outcome label_soundness() {
  SuiteConfig suite;
  suite.seed = 1001;
  suite.num_scenes = 10;
  SamplerConfig cfg;
  cfg.n_ego_pos = 500;
  cfg.n_ego_neg = 500;
  std::size_t neg = 0, neg_bad = 0, miss = 0, miss_bad = 0, backed = 0, backed_occ = 0, pos = 0, ego = 0, ego_bad = 0;
  for (int i = 0; i < suite.num_scenes; ++i) {
    const Scene scene = make_scene(suite, static_cast<std::uint64_t>(i));
    const Sequence seq = simulate_sequence(scene, suite.timing);
    const auto pool = collect_hit_rays(seq.future);
    std::map<std::uint64_t, const Ray*> by_index;
    for (const RayRef& r : pool) by_index[r.global_index] = r.ray;

    for (const Query& q : gen_occupancy_negatives(pool, cfg, 10000)) {
      ++neg;
      if (occupancy_oracle(scene, q.position, q.time)) ++neg_bad;
    }
    for (const Query& q : gen_missing_ray_negatives(seq.future, cfg)) {
      ++miss;
      if (occupancy_oracle(scene, q.position, q.time)) ++miss_bad;
    }
    for (const Query& q : gen_occupancy_positives(pool, cfg, 10000)) {
      ++pos;
      const Ray& ray = *by_index.at(q.source);
      const Vec3 dir = (ray.endpoint - ray.origin).normalized();
      // Solid-backed: the surface is at least delta thick along the ray.
      if (!occupancy_oracle(scene, ray.endpoint + cfg.delta * dir, ray.time)) continue;
      ++backed;
      if (occupancy_oracle(scene, q.position, q.time)) ++backed_occ;
    }
    for (const Query& q : gen_ego_path_queries(scene, seq.t0, cfg)) {
      ++ego;
      const bool inside = tube_distance(scene.ego_track, seq.t0, seq.t0 + cfg.t_max, q.position) <= cfg.w_ego;
      if (inside != (q.label == 1)) ++ego_bad;
    }
  }
  const double occ_rate = backed ? static_cast<double>(backed_occ) / static_cast<double>(backed) : 0.0;
  const bool ok = neg + miss >= 100000 && neg_bad == 0 && miss_bad == 0 && backed > 0 && occ_rate >= 0.99 &&
                  ego >= 10000 && ego_bad == 0;
  return {ok, fmt("negatives %zu/%zu violations, missing-ray %zu/%zu, solid-backed positives %.5f occupied "
                  "(%zu of %zu), ego %zu mismatches of %zu",
                  neg_bad, neg, miss_bad, miss, occ_rate, backed, pos, ego_bad, ego)};
}

// ---- 2: metric oracles ----------------------------------------------------------

Outcome metric_oracles() {
  test::Gen g(2002);
  std::size_t rp_bad = 0, ap_bad = 0, iou_bad = 0;
  double worst_iou = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const test::MetricInstance m = test::random_metric_instance(g);
    const double target = k % 2 == 0 ? 0.7 : g.uniform(0.05, 1.0);
    const RecallAtPrecision rp = recall_at_precision(m.scores, m.labels, target);
    const test::BruteRecall want = test::brute_recall_at_precision(m.scores, m.labels, target);
    if (rp.recall != want.recall || rp.threshold != want.threshold || rp.precision != want.precision) ++rp_bad;
    if (average_precision(m.scores, m.labels) != test::brute_average_precision(m.scores, m.labels)) ++ap_bad;
    const double diff = std::abs(soft_iou(m.scores, m.labels) - test::brute_soft_iou(m.scores, m.labels));
    worst_iou = std::max(worst_iou, diff);
    if (diff > 1e-12) ++iou_bad;
  }
  return {rp_bad == 0 && ap_bad == 0 && iou_bad == 0,
          fmt("1000 instances: R@P mismatches %zu, AP mismatches %zu, soft-IoU max diff %.2e", rp_bad, ap_bad, worst_iou)};
}

// ---- 3: gradients ------------------------------------------------------------------

Outcome gradients() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t groups = 0, zero_groups = 0;
  for (FieldMode mode : {FieldMode::kAmortized, FieldMode::kFitPerScene}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const test::GradInstance inst = test::random_instance(seed, mode);
      std::vector<double> grad(inst.params.size(), 0.0);
      sample_loss(inst.params, inst.histogram, inst.queries, inst.weights, &grad);
      for (const Section& s : inst.params.sections()) {
        double n2 = 0.0;
        for (std::size_t i = s.offset; i < s.offset + s.size(); ++i) n2 += grad[i] * grad[i];
        if (n2 == 0.0) ++zero_groups;
      }
      for (const auto& [name, err] : test::gradient_errors(inst)) {
        ++groups;
        if (err > worst) {
          worst = err;
          worst_name = name;
        }
      }
    }
  }
  return {worst < 1e-4 && zero_groups == 0,
          fmt("%zu group checks over 5 instances per mode, max relative error %.2e (%s), %zu zero-gradient groups",
              groups, worst, worst_name.c_str(), zero_groups)};
}

// ---- 4: fit per scene -------------------------------------------------------------

Outcome fit_per_scene() {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    RunConfig cfg;
    cfg.suite.seed = seed;
    cfg.suite.num_parked = 1;
    cfg.suite.num_moving = 2;
    cfg.suite.num_pedestrians = 0;
    cfg.suite.num_buildings = 0;
    cfg.sampler.seed = seed;
    cfg.train.seed = seed;
    cfg.field.mode = FieldMode::kFitPerScene;
    // One scene, one frame: rotation would only change the sample's frame.
    cfg.augment.rotation_enabled = false;
    const Scene scene = make_scene(cfg.suite, 0);
    std::size_t moving = 0;
    for (const Box& b : scene.boxes) moving += b.velocity.norm() > 0.0 ? 1 : 0;
    if (scene.boxes.size() != 3 || moving == 0) return {false, "scene is not a 3-box dynamic scene"};
    const std::vector<Sequence> seqs{simulate_sequence(scene, cfg.suite.timing)};
    const PcaModel pca = fit_feature_pca(seqs, cfg.pca, seed);
    const TrainingSample s = assemble_sample(seqs[0], pca, cfg.sampler, cfg.augment);
    const std::vector<TrainItem> items{make_train_item(cfg.field, s.input, s.queries.queries)};
    const TrainResult r = train(FieldParams::initialize(cfg.field, seed), items, cfg.train);
    const double bce = item_loss(r.final_params, items[0], cfg.train.weights).occ;
    const EvalScene es = make_eval_scene(seqs[0], cfg.field, cfg.eval.grid);
    const EvalReport rep = evaluate(r.final_params, std::span(&es, 1), cfg.eval.grid, cfg.eval.ego);
    const bool pass = bce < 0.25 * std::log(2.0) && rep.r_at_p70 >= 0.5;
    ok = ok && pass;
    detail += fmt("%sseed %llu: BCE %.4f (< %.4f), R@P70 %.3f", detail.empty() ? "" : "; ",
                  static_cast<unsigned long long>(seed), bce, 0.25 * std::log(2.0), rep.r_at_p70);
    note(detail);
  }
  return {ok, detail};
}

// ---- 5: rotation equivariance -------------------------------------------------------

Outcome rotation_equivariance() {
  const SuiteConfig suite = test::small_suite(505, 10);
  std::vector<Sequence> seqs;
  for (int i = 0; i < suite.num_scenes; ++i) {
    seqs.push_back(simulate_sequence(make_scene(suite, static_cast<std::uint64_t>(i)), suite.timing));
  }
  PcaModel pca;
  const int dim = suite.rig.feature_dim;
  pca.mean = Eigen::VectorXd::Zero(dim);
  pca.components = Eigen::MatrixXd::Identity(4, dim);
  pca.explained_variance = Eigen::VectorXd::Ones(4);
  test::Gen g(5005);
  double worst = 0.0;
  std::size_t structural = 0, compared = 0;
  for (int k = 0; k < 100; ++k) {
    SamplerConfig cfg;
    cfg.seed = 7000 + static_cast<std::uint64_t>(k);
    cfg.n_occ_pos = 400;
    cfg.n_occ_neg = 400;
    cfg.n_feat = 100;
    cfg.n_ego_pos = 40;
    cfg.n_ego_neg = 40;
    AugmentConfig base;
    base.force_theta = true;
    base.forced_theta = 0.0;
    AugmentConfig turned = base;
    turned.forced_theta = g.uniform(base.theta_min, base.theta_max);
    const Sequence& seq = seqs[static_cast<std::size_t>(k) % seqs.size()];
    const TrainingSample a = assemble_sample(seq, pca, cfg, base);
    const TrainingSample b = assemble_sample(seq, pca, cfg, turned);
    const double th = turned.forced_theta;
    if (a.queries.queries.size() != b.queries.queries.size()) {
      ++structural;
      continue;
    }
    for (std::size_t i = 0; i < a.queries.queries.size(); ++i) {
      const Query& qa = a.queries.queries[i];
      const Query& qb = b.queries.queries[i];
      if (qa.tag != qb.tag || qa.label != qb.label || qa.time != qb.time || qa.feature != qb.feature) ++structural;
      worst = std::max(worst, (rotate_about_z(qa.position, th) - qb.position).norm());
      ++compared;
    }
    for (std::size_t s = 0; s < a.input.past_scans.size(); ++s) {
      const auto& ra = a.input.past_scans[s].rays;
      const auto& rb = b.input.past_scans[s].rays;
      for (std::size_t i = 0; i < ra.size(); ++i) {
        worst = std::max(worst, (rotate_about_z(ra[i].endpoint, th) - rb[i].endpoint).norm());
        worst = std::max(worst, (rotate_about_z(ra[i].origin, th) - rb[i].origin).norm());
      }
    }
  }
  return {worst <= 1e-9 && structural == 0 && compared > 0,
          fmt("100 samples, %zu queries, max position deviation %.2e, %zu label/time/feature mismatches", compared,
              worst, structural)};
}

// ---- 6: min-depth filtering ----------------------------------------------------------

Outcome min_depth() {
  SuiteConfig suite;
  suite.seed = 606;
  suite.num_scenes = 10;
  suite.num_parked = 10;
  suite.num_moving = 5;
  suite.num_pedestrians = 6;
  suite.num_buildings = 3;
  SamplerConfig cfg;
  cfg.n_feat = std::size_t{1} << 40;  // keep every visible point
  PcaModel pca;
  pca.mean = Eigen::VectorXd::Zero(suite.rig.feature_dim);
  pca.components = Eigen::MatrixXd::Identity(2, suite.rig.feature_dim);
  pca.explained_variance = Eigen::VectorXd::Ones(2);
  std::size_t mismatched_scenes = 0, retained = 0, occluded = 0;
  for (int i = 0; i < suite.num_scenes; ++i) {
    const Scene scene = make_scene(suite, static_cast<std::uint64_t>(i));
    const Sequence seq = simulate_sequence(scene, suite.timing);
    const auto pool = collect_hit_rays(seq.future);
    std::set<std::uint64_t> got;
    for (const Query& q : gen_feature_queries(pool, seq.images, pca, cfg)) got.insert(q.source);

    // Pixel buckets, then every point against every other point in its bucket.
    struct Point {
      double depth;
      std::uint64_t index;
    };
    std::map<std::tuple<std::size_t, int, int>, std::vector<Point>> buckets;
    for (const RayRef& r : pool) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < seq.images.size(); ++k) {
        if (std::abs(seq.images[k].time - r.ray->time) < std::abs(seq.images[best].time - r.ray->time)) best = k;
      }
      const auto p = seq.images[best].project(r.ray->endpoint);
      if (p) buckets[{best, p->u, p->v}].push_back({p->depth, r.global_index});
    }
    std::set<std::uint64_t> want;
    for (const auto& [pixel, pts] : buckets) {
      for (const Point& a : pts) {
        bool hidden = false;
        for (const Point& b : pts) hidden = hidden || b.depth < a.depth - cfg.depth_tol;
        if (hidden) {
          ++occluded;
        } else {
          want.insert(a.index);
        }
      }
    }
    retained += got.size();
    if (got != want) ++mismatched_scenes;
  }
  return {mismatched_scenes == 0 && occluded > 0,
          fmt("10 scenes, %zu retained, %zu occluded by the oracle, %zu scenes differ", retained, occluded,
              mismatched_scenes)};
}

// ---- 7: scaling --------------------------------------------------------------------------

Outcome scaling() {
  const RunConfig cfg;
  const ScalingSummary s = run_scaling(cfg, 1, note);
  std::size_t passing = 0;
  std::string detail;
  for (std::size_t k = 0; k < s.monotone.size(); ++k) {
    const bool pass = s.monotone[k] && s.gain[k] >= 0.05;
    passing += pass ? 1 : 0;
    detail += fmt("%sseed %llu [", k ? "; " : "", static_cast<unsigned long long>(cfg.scaling.seeds[k]));
    bool first = true;
    for (const ScalingRow& r : s.rows) {
      if (r.seed != cfg.scaling.seeds[k]) continue;
      detail += fmt("%s%.3f", first ? "" : " ", r.r_at_p70);
      first = false;
    }
    detail += fmt("] gain %+.3f %s", s.gain[k], pass ? "ok" : "fails");
  }
  return {2 * passing > s.monotone.size(), fmt("%zu of %zu seeds pass: ", passing, s.monotone.size()) + detail};
}

// ---- 8: determinism ------------------------------------------------------------------------

std::map<std::string, std::string> pipeline_digests(const test::TempDir& dir) {
  RunConfig cfg;
  cfg.suite.seed = 42;
  cfg.sampler.seed = 42;
  cfg.train.seed = 42;
  cfg.train.total_steps = 200;
  cfg.train.warmup_steps = 20;
  cfg = run_config_from_json(run_config_to_json(cfg));
  const CommandOptions opt{1, false, {}};
  cmd_simulate(cfg, dir / "dataset", opt);
  cmd_genqueries(cfg, dir / "dataset", dir / "queries", opt);
  cmd_train(cfg, dir / "queries", dir / "checkpoint.bin", dir / "loss.csv", std::nullopt, opt);
  cmd_eval(cfg, dir / "checkpoint.bin", std::string(dir / "dataset"), dir / "report.json", std::nullopt, opt);
  std::map<std::string, std::string> d;
  d["dataset manifest"] = test::file_digest(dir / "dataset/manifest.json");
  d["queries manifest"] = test::file_digest(dir / "queries/manifest.json");
  std::string qsets;
  std::size_t count = 0;
  const auto manifest = nlohmann::json::parse(read_text(dir / "queries/manifest.json"));
  for (const auto& e : manifest.at("samples")) {
    qsets += test::file_digest(dir / ("queries/" + e.at("qset").get<std::string>()));
    ++count;
  }
  // An empty list would compare equal trivially.
  d["query sets"] = count == 0 ? std::string("none") : sha256_hex(qsets);
  d["checkpoint"] = test::file_digest(dir / "checkpoint.bin");
  d["report"] = test::file_digest(dir / "report.json");
  return d;
}

Outcome determinism() {
  std::map<std::string, std::string> first, second;
  {
    test::TempDir a("accept8a");
    first = pipeline_digests(a);
  }
  {
    test::TempDir b("accept8b");
    second = pipeline_digests(b);
  }
  std::string detail;
  bool same = true;
  for (const auto& [name, digest] : first) {
    const bool eq = second.at(name) == digest;
    same = same && eq;
    detail += fmt("%s%s %s", detail.empty() ? "" : ", ", name.c_str(), eq ? digest.substr(0, 12).c_str() : "DIFFERS");
  }
  return {same, detail};
}

// ---- 9: PCA fidelity ------------------------------------------------------------------------

Outcome pca_fidelity() {
  test::Gen g(909);
  std::normal_distribution<double> normal;
  const int n = 4000, dim = 64;
  Eigen::MatrixXd mix(dim, dim), z(n, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) mix(i, j) = normal(g.engine()) * std::pow(0.93, i);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) z(i, j) = normal(g.engine());
  Eigen::MatrixXd x = z * mix;
  x.rowwise() += Eigen::RowVectorXd::LinSpaced(dim, -2.0, 5.0);
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> dense(cov);
  const Eigen::VectorXd vals = dense.eigenvalues().reverse();
  double worst = 0.0;
  std::string detail;
  for (int d : {8, 16, 32}) {
    const double residual = projection_residual(fit_pca(x, d), x);
    const double oracle = vals.tail(dim - d).sum();
    worst = std::max(worst, std::abs(residual - oracle));
    detail += fmt("%sd=%d residual %.10f vs %.10f", detail.empty() ? "" : ", ", d, residual, oracle);
  }
  return {worst <= 1e-8, detail + fmt(" (max diff %.2e)", worst)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "label soundness", 60.0, label_soundness},
      {2, "metric oracles", 30.0, metric_oracles},
      {3, "gradient checks", 60.0, gradients},
      {4, "fit per scene", 600.0, fit_per_scene},
      {5, "rotation equivariance", 10.0, rotation_equivariance},
      {6, "min-depth filtering", 30.0, min_depth},
      {7, "scaling", 2700.0, scaling},
      {8, "determinism", 300.0, determinism},
      {9, "PCA fidelity", 10.0, pca_fidelity},
  };
  int failures = 0;
  for (const Criterion& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_budget = secs < c.budget_s;
    const bool pass = o.pass && in_budget;
    std::printf("%s criterion %d (%s): %s [%.1f s, budget %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_s, in_budget ? "" : ", exceeded");
    std::fflush(stdout);
    if (!pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
