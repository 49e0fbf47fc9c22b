#include "gasp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <set>

#include "gasp/binary_io.hpp"
#include "gasp/digest.hpp"
#include "gasp/rng.hpp"
#include "gasp/scene_io.hpp"

namespace gasp {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Keys accepted in a section are those its serializer writes.
void reject_unknown_keys(const json& j, const json& reference, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!reference.contains(key)) throw ConfigError(path + "." + key + ": unknown key");
  }
}

const json& section_or_empty(const json& j, const char* key) {
  static const json kEmpty = json::object();
  return j.contains(key) ? j.at(key) : kEmpty;
}

std::string indexed_name(const char* prefix, std::size_t i, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%04zu%s", prefix, i, suffix);
  return buf;
}

void report(const Progress& progress, const std::string& line) {
  if (progress) progress(line);
}

}  // namespace

// ---- config ---------------------------------------------------------------------

json run_config_to_json(const RunConfig& c) {
  json eval = {{"grid", eval_grid_to_json(c.eval.grid)},
               {"ego",
                {{"lattice_step", c.eval.ego.lattice_step},
                 {"probe_z", c.eval.ego.probe_z},
                 {"probe_t", c.eval.ego.probe_t},
                 {"w_ego", c.eval.ego.w_ego}}},
               {"precision_target", c.eval.precision_target},
               {"heldout_seed", c.eval.heldout_seed},
               {"heldout_scenes", c.eval.heldout_scenes},
               {"min_r_at_p70", c.eval.min_r_at_p70 ? json(*c.eval.min_r_at_p70) : json(nullptr)},
               {"min_ap_ego", c.eval.min_ap_ego ? json(*c.eval.min_ap_ego) : json(nullptr)}};
  return {{"suite", suite_to_json(c.suite)},
          {"sampler", sampler_to_json(c.sampler)},
          {"augment", augment_to_json(c.augment)},
          {"pca", {{"dim", c.pca.dim}, {"max_samples", c.pca.max_samples}}},
          {"field", field_config_to_json(c.field)},
          {"train", train_config_to_json(c.train)},
          {"eval", eval},
          {"scaling",
           {{"sample_counts", c.scaling.sample_counts},
            {"seeds", c.scaling.seeds},
            {"lr_max", c.scaling.lr_max},
            {"warmup_steps", c.scaling.warmup_steps},
            {"total_steps", c.scaling.total_steps},
            {"channels", c.scaling.channels}}}};
}

RunConfig run_config_from_json(const json& j) {
  using namespace json_util;
  const RunConfig defaults;
  const json reference = run_config_to_json(defaults);
  reject_unknown_keys(j, reference, "config");
  RunConfig c;
  for (const char* key : {"sampler", "augment", "pca", "field", "train", "eval", "scaling"}) {
    if (j.contains(key)) reject_unknown_keys(j.at(key), reference.at(key), std::string("config.") + key);
  }
  if (j.contains("suite")) {
    reject_unknown_keys(j.at("suite"), reference.at("suite"), "config.suite");
    c.suite = suite_from_json(j.at("suite"));
  }
  c.sampler = sampler_from_json(section_or_empty(j, "sampler"));
  c.augment = augment_from_json(section_or_empty(j, "augment"));

  const json& pca = section_or_empty(j, "pca");
  c.pca.dim = integer_or(pca, "dim", c.pca.dim, "pca");
  c.pca.max_samples = integer_or(pca, "max_samples", c.pca.max_samples, "pca");
  if (c.pca.dim < 1 || c.pca.max_samples <= c.pca.dim) {
    throw ConfigError("pca: dim must be >= 1 and max_samples > dim");
  }
  if (c.pca.dim > c.suite.rig.feature_dim) throw ConfigError("pca.dim: exceeds the camera feature dimension");

  json field = section_or_empty(j, "field");
  if (field.contains("feature_dim") && field.at("feature_dim") != c.pca.dim) {
    throw ConfigError("field.feature_dim: must equal pca.dim");
  }
  if (field.contains("past_count") && field.at("past_count") != c.suite.timing.past_count) {
    throw ConfigError("field.past_count: must equal suite.timing.past_count");
  }
  field["feature_dim"] = c.pca.dim;
  field["past_count"] = c.suite.timing.past_count;
  c.field = field_config_from_json(field);
  c.train = train_config_from_json(section_or_empty(j, "train"));

  const json& ev = section_or_empty(j, "eval");
  if (ev.contains("grid")) reject_unknown_keys(ev.at("grid"), reference.at("eval").at("grid"), "config.eval.grid");
  json grid = ev.contains("grid") ? ev.at("grid") : json::object();
  if (!grid.contains("t_max")) grid["t_max"] = c.suite.timing.horizon;
  c.eval.grid = eval_grid_from_json(grid);
  if (ev.contains("ego")) {
    const json& e = ev.at("ego");
    reject_unknown_keys(e, reference.at("eval").at("ego"), "config.eval.ego");
    c.eval.ego.lattice_step = number_or(e, "lattice_step", c.eval.ego.lattice_step, "eval.ego");
    c.eval.ego.probe_z = number_or(e, "probe_z", c.eval.ego.probe_z, "eval.ego");
    c.eval.ego.probe_t = number_or(e, "probe_t", c.eval.ego.probe_t, "eval.ego");
    c.eval.ego.w_ego = number_or(e, "w_ego", c.eval.ego.w_ego, "eval.ego");
    if (!(c.eval.ego.lattice_step > 0.0) || !(c.eval.ego.w_ego > 0.0)) {
      throw ConfigError("eval.ego: lattice_step and w_ego must be positive");
    }
  } else {
    c.eval.ego.w_ego = c.sampler.w_ego;
  }
  c.eval.precision_target = number_or(ev, "precision_target", c.eval.precision_target, "eval");
  c.eval.heldout_seed = uint_or(ev, "heldout_seed", c.eval.heldout_seed, "eval");
  c.eval.heldout_scenes = integer_or(ev, "heldout_scenes", c.eval.heldout_scenes, "eval");
  for (auto [key, slot] : {std::pair{"min_r_at_p70", &c.eval.min_r_at_p70}, std::pair{"min_ap_ego", &c.eval.min_ap_ego}}) {
    if (ev.contains(key) && !ev.at(key).is_null()) *slot = number(ev, key, "eval");
  }
  if (!(c.eval.precision_target > 0.0 && c.eval.precision_target <= 1.0)) {
    throw ConfigError("eval.precision_target: must be in (0, 1]");
  }
  if (c.eval.heldout_scenes < 1) throw ConfigError("eval.heldout_scenes: must be >= 1");

  const json& sc = section_or_empty(j, "scaling");
  if (sc.contains("sample_counts")) {
    c.scaling.sample_counts = sc.at("sample_counts").get<std::vector<int>>();
  }
  if (sc.contains("seeds")) c.scaling.seeds = sc.at("seeds").get<std::vector<std::uint64_t>>();
  c.scaling.lr_max = number_or(sc, "lr_max", c.scaling.lr_max, "scaling");
  c.scaling.warmup_steps = integer_or(sc, "warmup_steps", c.scaling.warmup_steps, "scaling");
  c.scaling.total_steps = integer_or(sc, "total_steps", c.scaling.total_steps, "scaling");
  c.scaling.channels = integer_or(sc, "channels", c.scaling.channels, "scaling");
  if (c.scaling.channels < 1) throw ConfigError("scaling.channels: must be >= 1");
  if (c.scaling.sample_counts.empty() || c.scaling.seeds.empty()) {
    throw ConfigError("scaling: sample_counts and seeds must be non-empty");
  }
  if (!std::is_sorted(c.scaling.sample_counts.begin(), c.scaling.sample_counts.end()) ||
      c.scaling.sample_counts.front() < 1) {
    throw ConfigError("scaling.sample_counts: must be positive and ascending");
  }

  // Cross-section consistency.
  if (std::abs(c.sampler.t_max - c.suite.timing.horizon) > 1e-12) {
    throw ConfigError("sampler.t_max: must equal suite.timing.horizon");
  }
  if (c.eval.grid.region > c.field.region) throw ConfigError("eval.grid.region: exceeds field.region");
  const double theta_limit = c.augment.rotation_enabled
                                 ? std::max(std::abs(c.augment.theta_min), std::abs(c.augment.theta_max))
                                 : 0.0;
  for (int k = 0; k <= 40; ++k) {
    const double theta = -theta_limit + 2.0 * theta_limit * k / 40.0;
    for (double x : {c.sampler.roi_min.x(), c.sampler.roi_max.x()}) {
      for (double y : {c.sampler.roi_min.y(), c.sampler.roi_max.y()}) {
        const Vec3 r = rotate_about_z(Vec3(x, y, 0.0), theta);
        if (std::abs(r.x()) > c.field.region || std::abs(r.y()) > c.field.region) {
          throw ConfigError("sampler ROI rotated by the augmentation range leaves the field region");
        }
      }
    }
  }
  return c;
}

RunConfig run_config_from_text(const std::string& text) { return run_config_from_json(json_util::parse(text, "config")); }

RunConfig load_run_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  return run_config_from_text(read_text(path));
}

std::string stage_digest(const RunConfig& c, Stage stage) {
  const json all = run_config_to_json(c);
  json scoped = {{"suite", all.at("suite")}};
  if (stage >= Stage::kQueries) {
    for (const char* k : {"sampler", "augment", "pca"}) scoped[k] = all.at(k);
  }
  if (stage >= Stage::kTrain) {
    for (const char* k : {"field", "train"}) scoped[k] = all.at(k);
  }
  if (stage >= Stage::kEval) scoped["eval"] = all.at("eval");
  return config_digest(scoped);
}

std::uint64_t sample_seed(std::uint64_t base, std::uint64_t index) {
  return RandomStream(base, stream_id(StreamDomain::kSample, index)).bits_at(0);
}

// ---- in-memory pipeline ------------------------------------------------------------

PcaModel fit_feature_pca(std::span<const Sequence> seqs, const PcaConfig& cfg, std::uint64_t seed) {
  std::vector<std::pair<const FeatureImage*, std::size_t>> pixels;
  int dim = -1;
  for (const Sequence& s : seqs) {
    for (const FeatureImage& img : s.images) {
      if (dim < 0) dim = img.feature_dim;
      if (img.feature_dim != dim) throw Error("fit_feature_pca: images disagree on feature dimension");
      const std::size_t n = static_cast<std::size_t>(img.width()) * img.height();
      for (std::size_t p = 0; p < n; ++p) pixels.emplace_back(&img, p);
    }
  }
  if (pixels.empty()) throw Error("fit_feature_pca: no image features");
  std::vector<std::size_t> chosen(pixels.size());
  std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  const std::size_t keep = std::min(chosen.size(), static_cast<std::size_t>(cfg.max_samples));
  RandomStream rng(seed, stream_id(StreamDomain::kPcaSubset, 0));
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(chosen.size() - i));
    std::swap(chosen[i], chosen[j]);
  }
  chosen.resize(keep);
  std::sort(chosen.begin(), chosen.end());
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(keep), dim);
  for (std::size_t r = 0; r < keep; ++r) {
    const auto& [img, p] = pixels[chosen[r]];
    const double* f = img->features.data() + p * static_cast<std::size_t>(dim);
    for (int c = 0; c < dim; ++c) rows(static_cast<Eigen::Index>(r), c) = f[c];
  }
  return fit_pca(rows, cfg.dim);
}

EvalScene make_eval_scene(const Sequence& seq, const FieldConfig& field, const EvalGrid& grid, int workers) {
  EvalScene es;
  es.scene = seq.scene;
  es.t0 = seq.t0;
  const Pose world_to_ref = ego_pose_at(seq.scene, seq.t0).inverse();
  std::vector<LidarScan> past;
  for (const LidarScan& s : seq.past) past.push_back(retime_scan(transform_scan(s, world_to_ref), seq.t0));
  es.histogram = pillar_histogram(field, past);
  for (double t : grid.times) {
    es.eval_scans.push_back(
        retime_scan(transform_scan(scan_at(seq.scene, seq.t0 + t, workers), world_to_ref), seq.t0));
  }
  return es;
}

namespace {

std::vector<Sequence> simulate_suite(const SuiteConfig& suite, int workers) {
  std::vector<Sequence> seqs;
  for (int i = 0; i < suite.num_scenes; ++i) {
    seqs.push_back(simulate_sequence(make_scene(suite, static_cast<std::uint64_t>(i)), suite.timing, workers));
  }
  return seqs;
}

SuiteConfig heldout_suite(const RunConfig& cfg, std::uint64_t seed_offset) {
  SuiteConfig h = cfg.suite;
  h.seed = cfg.eval.heldout_seed + seed_offset;
  h.num_scenes = cfg.eval.heldout_scenes;
  return h;
}

}  // namespace

ScalingSummary run_scaling(const RunConfig& base, int workers, const Progress& progress) {
  ScalingSummary summary;
  const int max_count = base.scaling.sample_counts.back();
  for (std::uint64_t seed : base.scaling.seeds) {
    RunConfig cfg = base;
    cfg.suite.seed = seed;
    cfg.suite.num_scenes = max_count;
    cfg.sampler.seed = seed;
    cfg.train.seed = seed;
    cfg.train.workers = workers;
    cfg.train.lr_max = cfg.scaling.lr_max;
    cfg.train.warmup_steps = cfg.scaling.warmup_steps;
    cfg.train.total_steps = cfg.scaling.total_steps;
    cfg.field.mode = FieldMode::kAmortized;
    cfg.field.channels = cfg.scaling.channels;
    try {
      cfg.train.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("scaling: ") + e.what());
    }

    const std::vector<Sequence> pretrain = simulate_suite(cfg.suite, workers);
    const std::vector<Sequence> heldout = simulate_suite(heldout_suite(cfg, seed), workers);
    const PcaModel pca = fit_feature_pca(pretrain, cfg.pca, cfg.sampler.seed);
    std::vector<TrainItem> items;
    for (std::size_t i = 0; i < pretrain.size(); ++i) {
      SamplerConfig sc = cfg.sampler;
      sc.seed = sample_seed(cfg.sampler.seed, i);
      TrainingSample s = assemble_sample(pretrain[i], pca, sc, cfg.augment, workers);
      items.push_back(make_train_item(cfg.field, s.input, std::move(s.queries.queries)));
    }
    std::vector<EvalScene> eval_scenes;
    for (const Sequence& s : heldout) eval_scenes.push_back(make_eval_scene(s, cfg.field, cfg.eval.grid, workers));
    report(progress, "seed " + std::to_string(seed) + ": data ready");

    std::vector<double> scores;
    for (int count : cfg.scaling.sample_counts) {
      const TrainResult r = train(FieldParams::initialize(cfg.field, seed),
                                  std::span(items).first(static_cast<std::size_t>(count)), cfg.train);
      const EvalReport rep =
          evaluate(r.final_params, eval_scenes, cfg.eval.grid, cfg.eval.ego, cfg.eval.precision_target, workers);
      summary.rows.push_back({seed, count, rep.r_at_p70, rep.ap_occ, rep.ap_ego, r.history.back().loss.total});
      scores.push_back(rep.r_at_p70);
      char line[160];
      std::snprintf(line, sizeof line, "seed %llu samples %d: R@P %.4f AP %.4f ego AP %.4f",
                    static_cast<unsigned long long>(seed), count, rep.r_at_p70, rep.ap_occ, rep.ap_ego);
      report(progress, line);
    }
    bool monotone = true;
    for (std::size_t i = 1; i < scores.size(); ++i) monotone = monotone && scores[i] >= scores[i - 1];
    summary.monotone.push_back(monotone);
    summary.gain.push_back(scores.back() - scores.front());
  }
  return summary;
}

ordered_json scaling_to_json(const ScalingSummary& s, const std::string& digest) {
  ordered_json rows = ordered_json::array();
  for (const ScalingRow& r : s.rows) {
    rows.push_back(ordered_json{{"seed", r.seed},
                                {"num_pretrain_samples", r.samples},
                                {"r_at_p70", r.r_at_p70},
                                {"ap_occ", r.ap_occ},
                                {"ap_ego", r.ap_ego},
                                {"final_loss", r.final_loss}});
  }
  return ordered_json{{"config_digest", digest}, {"rows", rows}, {"monotone", s.monotone}, {"gain", s.gain}};
}

std::string scaling_to_csv(const ScalingSummary& s) {
  std::string out = "seed,num_pretrain_samples,r_at_p70,ap_occ,ap_ego,final_loss\n";
  char line[256];
  for (const ScalingRow& r : s.rows) {
    std::snprintf(line, sizeof line, "%llu,%d,%.17g,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(r.seed),
                  r.samples, r.r_at_p70, r.ap_occ, r.ap_ego, r.final_loss);
    out += line;
  }
  return out;
}

// ---- on-disk stages ----------------------------------------------------------------

namespace {

// Files are written under a sibling directory that replaces `dir` at the end.
class StagingDir {
 public:
  explicit StagingDir(const std::string& dir) : target_(dir), staging_(dir + ".partial") {
    std::error_code ec;
    fs::remove_all(staging_, ec);
    fs::create_directories(staging_);
  }
  ~StagingDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }
  StagingDir(const StagingDir&) = delete;
  StagingDir& operator=(const StagingDir&) = delete;

  /// Writes a file and records it in the manifest listing.
  void write(const std::string& rel, const std::vector<std::uint8_t>& bytes) {
    const fs::path p = staging_ / rel;
    fs::create_directories(p.parent_path());
    write_file(p.string(), bytes);
    files_.push_back({{"path", rel}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
  }
  void write_text(const std::string& rel, const std::string& text) {
    write(rel, std::vector<std::uint8_t>(text.begin(), text.end()));
  }
  const json& files() const { return files_; }

  void commit(const json& manifest) {
    const std::string text = manifest.dump(2) + "\n";
    write_file((staging_ / "manifest.json").string(), std::vector<std::uint8_t>(text.begin(), text.end()));
    std::error_code ec;
    fs::remove_all(target_, ec);
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path staging_;
  json files_ = json::array();
  bool committed_ = false;
};

json read_manifest(const std::string& dir, const char* format) {
  const fs::path path = fs::path(dir) / "manifest.json";
  if (!fs::exists(path)) throw Error(std::string(format) + ": no manifest at " + path.string());
  json m = json_util::parse(read_text(path.string()), path.string());
  if (m.value("format", "") != format) throw Error(path.string() + ": not a " + format + " manifest");
  return m;
}

void check_digest(const json& manifest, const std::string& expected, const std::string& what, bool force) {
  const std::string found = manifest.value("config_digest", "");
  if (found != expected && !force) {
    throw Error(what + " was produced with a different configuration (digest " + found.substr(0, 12) +
                ", expected " + expected.substr(0, 12) + "); pass --force to use it anyway");
  }
}

std::vector<std::uint8_t> read_verified(const std::string& dir, const json& manifest, const std::string& rel) {
  for (const json& f : manifest.at("files")) {
    if (f.at("path") != rel) continue;
    const std::vector<std::uint8_t> bytes = read_file((fs::path(dir) / rel).string());
    if (bytes.size() != f.at("bytes").get<std::size_t>() || sha256_hex(bytes) != f.at("sha256").get<std::string>()) {
      throw Error(rel + ": content does not match the manifest");
    }
    return bytes;
  }
  throw Error(rel + ": not listed in the manifest");
}

std::string bytes_to_string(const std::vector<std::uint8_t>& b) { return std::string(b.begin(), b.end()); }

}  // namespace

void cmd_simulate(const RunConfig& cfg, const std::string& out_dir, const CommandOptions& opt) {
  StagingDir stage(out_dir);
  json scenes = json::array();
  for (int i = 0; i < cfg.suite.num_scenes; ++i) {
    const Scene scene = make_scene(cfg.suite, static_cast<std::uint64_t>(i));
    const Sequence seq = simulate_sequence(scene, cfg.suite.timing, opt.workers);
    const std::string scene_file = indexed_name("scenes/scene_", i, ".json");
    const std::string past_file = indexed_name("scans/scene_", i, "_past.bin");
    const std::string future_file = indexed_name("scans/scene_", i, "_future.bin");
    const std::string image_file = indexed_name("images/scene_", i, ".bin");
    stage.write_text(scene_file, scene_to_json(scene).dump(2) + "\n");
    stage.write(past_file, encode_scans(seq.past));
    stage.write(future_file, encode_scans(seq.future));
    stage.write(image_file, encode_images(seq.images));
    scenes.push_back({{"scene", scene_file}, {"past", past_file}, {"future", future_file}, {"images", image_file}});
    report(opt.progress, "simulated scene " + std::to_string(i + 1) + "/" + std::to_string(cfg.suite.num_scenes));
  }
  fs::create_directories(fs::path(out_dir).parent_path().empty() ? fs::path(".") : fs::path(out_dir).parent_path());
  stage.commit({{"format", "gasp-dataset"},
                {"version", 1},
                {"config_digest", stage_digest(cfg, Stage::kSimulate)},
                {"suite", suite_to_json(cfg.suite)},
                {"t0", cfg.suite.timing.t0},
                {"scenes", scenes},
                {"files", stage.files()}});
}

std::vector<Sequence> load_dataset(const std::string& dir, const RunConfig& cfg, bool force) {
  const json m = read_manifest(dir, "gasp-dataset");
  check_digest(m, stage_digest(cfg, Stage::kSimulate), "dataset " + dir, force);
  std::vector<Sequence> seqs;
  for (const json& entry : m.at("scenes")) {
    Sequence seq;
    seq.scene = scene_from_text(bytes_to_string(read_verified(dir, m, entry.at("scene"))));
    seq.t0 = m.at("t0").get<double>();
    seq.past = decode_scans(read_verified(dir, m, entry.at("past")));
    seq.future = decode_scans(read_verified(dir, m, entry.at("future")));
    seq.images = decode_images(read_verified(dir, m, entry.at("images")));
    seqs.push_back(std::move(seq));
  }
  return seqs;
}

void cmd_genqueries(const RunConfig& cfg, const std::string& dataset_dir, const std::string& out_dir,
                    const CommandOptions& opt) {
  const std::vector<Sequence> seqs = load_dataset(dataset_dir, cfg, opt.force);
  if (seqs.empty()) throw Error("genqueries: dataset " + dataset_dir + " has no scenes");
  const PcaModel pca = fit_feature_pca(seqs, cfg.pca, cfg.sampler.seed);
  const std::string digest = stage_digest(cfg, Stage::kQueries);
  StagingDir stage(out_dir);
  stage.write("pca.bin", encode_pca(pca));
  json samples = json::array();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    SamplerConfig sc = cfg.sampler;
    sc.seed = sample_seed(cfg.sampler.seed, i);
    const TrainingSample s = assemble_sample(seqs[i], pca, sc, cfg.augment, opt.workers);
    const std::string qset = indexed_name("sample_", i, ".qset");
    const std::string input = indexed_name("sample_", i, ".input.bin");
    const std::string meta = indexed_name("sample_", i, ".meta.json");
    stage.write(qset, encode_query_set(s.queries));
    stage.write(input, encode_scans(s.input.past_scans));
    json mj = metadata_to_json(s.metadata);
    mj["config_digest"] = digest;
    mj["index"] = i;
    stage.write_text(meta, mj.dump(2) + "\n");
    samples.push_back({{"qset", qset}, {"input", input}, {"meta", meta}});
    if (s.metadata.feature_exhausted) {
      report(opt.progress, "sample " + std::to_string(i) + ": only " + std::to_string(s.metadata.counts[3]) + " of " +
                               std::to_string(cfg.sampler.n_feat) + " feature queries available");
    }
    report(opt.progress, "sample " + std::to_string(i + 1) + "/" + std::to_string(seqs.size()) + ": " +
                             std::to_string(s.queries.queries.size()) + " queries");
  }
  stage.commit({{"format", "gasp-queries"},
                {"version", 1},
                {"config_digest", digest},
                {"feature_dim", pca.output_dim()},
                {"samples", samples},
                {"files", stage.files()}});
}

std::vector<LoadedSample> load_query_sets(const std::string& dir, const RunConfig& cfg, bool force) {
  const json m = read_manifest(dir, "gasp-queries");
  check_digest(m, stage_digest(cfg, Stage::kQueries), "query sets " + dir, force);
  std::vector<LoadedSample> out;
  for (const json& entry : m.at("samples")) {
    LoadedSample s;
    s.queries = decode_query_set(read_verified(dir, m, entry.at("qset")));
    s.input.past_scans = decode_scans(read_verified(dir, m, entry.at("input")));
    out.push_back(std::move(s));
  }
  return out;
}

void cmd_train(const RunConfig& cfg, const std::string& queries_dir, const std::string& checkpoint_path,
               const std::string& loss_csv, const std::optional<std::string>& resume, const CommandOptions& opt) {
  const std::vector<LoadedSample> samples = load_query_sets(queries_dir, cfg, opt.force);
  if (samples.empty()) throw Error("train: no query sets in " + queries_dir);
  const std::string digest = stage_digest(cfg, Stage::kTrain);
  std::vector<TrainItem> items;
  for (const LoadedSample& s : samples) {
    if (s.queries.feature_dim != cfg.field.feature_dim) {
      throw Error("train: query sets carry " + std::to_string(s.queries.feature_dim) +
                  "-d features but the field expects " + std::to_string(cfg.field.feature_dim));
    }
    items.push_back(make_train_item(cfg.field, s.input, s.queries.queries));
  }
  if (cfg.field.mode == FieldMode::kFitPerScene && items.size() > 1) {
    report(opt.progress, "warning: fit_per_scene shares one grid across " + std::to_string(items.size()) + " samples");
  }

  FieldParams params = FieldParams::initialize(cfg.field, cfg.train.seed);
  std::optional<AdamState> adam;
  if (resume) {
    Checkpoint ckpt = decode_checkpoint(read_file(*resume));
    if (ckpt.config_digest != digest && !opt.force) {
      throw Error("train: checkpoint " + *resume + " was produced with a different configuration; pass --force");
    }
    if (ckpt.params.size() != params.size()) throw Error("train: checkpoint dimensions do not match the field config");
    params = std::move(ckpt.params);
    adam = std::move(ckpt.adam);
  }
  TrainConfig tc = cfg.train;
  tc.workers = opt.workers;
  const int log_every = std::max(1, tc.total_steps / 20);
  const TrainResult result = train(std::move(params), items, tc, adam, [&](const LossRecord& r) {
    if (r.step % log_every == 0 || r.step == tc.total_steps) {
      char line[160];
      std::snprintf(line, sizeof line, "step %d/%d lr %.3g loss %.5f (occ %.5f dino %.5f ego %.5f)", r.step,
                    tc.total_steps, r.lr, r.loss.total, r.loss.occ, r.loss.dino, r.loss.ego);
      report(opt.progress, line);
    }
  });

  fs::path ckpt_path(checkpoint_path);
  if (ckpt_path.has_parent_path()) fs::create_directories(ckpt_path.parent_path());
  write_file_atomic(checkpoint_path, encode_checkpoint({result.final_params, result.adam, cfg.train, digest}));
  write_file_atomic(checkpoint_path + ".best", encode_checkpoint({result.best_params, std::nullopt, cfg.train, digest}));
  std::string csv = loss_history_csv(result.history);
  if (resume && fs::exists(loss_csv)) {
    csv = read_text(loss_csv) + csv.substr(csv.find('\n') + 1);
  }
  write_text_atomic(loss_csv, csv);
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path, const std::optional<std::string>& dataset_dir,
             const std::string& report_path, const std::optional<std::string>& raster_path,
             const CommandOptions& opt) {
  if (!fs::exists(checkpoint_path)) throw Error("eval: checkpoint not found: " + checkpoint_path);
  const Checkpoint ckpt = decode_checkpoint(read_file(checkpoint_path));
  if (ckpt.config_digest != stage_digest(cfg, Stage::kTrain) && !opt.force) {
    throw Error("eval: checkpoint " + checkpoint_path +
                " was produced with a different configuration; pass --force to evaluate it anyway");
  }
  const FieldConfig& field = ckpt.params.config();
  if (field.past_count != cfg.suite.timing.past_count || cfg.eval.grid.region > field.region) {
    throw Error("eval: checkpoint dimensions are incompatible with the evaluation config");
  }
  std::vector<Sequence> seqs = dataset_dir ? load_dataset(*dataset_dir, cfg, opt.force)
                                           : simulate_suite(heldout_suite(cfg, 0), opt.workers);
  if (seqs.empty()) throw Error("eval: no evaluation scenes");
  std::vector<EvalScene> scenes;
  for (const Sequence& s : seqs) scenes.push_back(make_eval_scene(s, field, cfg.eval.grid, opt.workers));
  EvalReport rep = evaluate(ckpt.params, scenes, cfg.eval.grid, cfg.eval.ego, cfg.eval.precision_target, opt.workers);
  rep.config_digest = stage_digest(cfg, Stage::kEval);

  fs::path out(report_path);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text_atomic(report_path, report_to_json(rep).dump(2) + "\n");
  if (raster_path) write_file_atomic(*raster_path, encode_pgm(rep.ego_raster, rep.ego_raster_size, rep.ego_raster_size));

  int status = 0;
  auto gate = [&](const char* name, double value, const std::optional<double>& min) {
    if (!min) return;
    const bool ok = std::isfinite(value) && value >= *min;
    char line[160];
    std::snprintf(line, sizeof line, "%s %s: %.4f (minimum %.4f)", ok ? "PASS" : "FAIL", name, value, *min);
    report(opt.progress, line);
    if (!ok) status = 1;
  };
  gate("r_at_p70", rep.r_at_p70, cfg.eval.min_r_at_p70);
  gate("ap_ego", rep.ap_ego, cfg.eval.min_ap_ego);
  return status;
}

void cmd_scaling(const RunConfig& cfg, const std::string& out_dir, const CommandOptions& opt) {
  const ScalingSummary s = run_scaling(cfg, opt.workers, opt.progress);
  fs::create_directories(out_dir);
  const std::string digest = stage_digest(cfg, Stage::kEval);
  write_text_atomic((fs::path(out_dir) / "scaling.json").string(), scaling_to_json(s, digest).dump(2) + "\n");
  write_text_atomic((fs::path(out_dir) / "scaling.csv").string(), scaling_to_csv(s));
}

void validate_report_schema(const json& r) {
  auto require = [&](const json& obj, const char* key, bool (json::*is)() const noexcept, bool nullable,
                     const std::string& where) {
    if (!obj.contains(key)) throw Error("report: missing key " + where + key);
    const json& v = obj.at(key);
    if (!(v.*is)() && !(nullable && v.is_null())) throw Error("report: wrong type for " + where + key);
  };
  if (!r.is_object()) throw Error("report: expected a JSON object");
  require(r, "config_digest", &json::is_string, false, "");
  for (const char* k : {"r_at_p70", "ap_occ", "soft_iou", "ap_ego"}) require(r, k, &json::is_number, true, "");
  require(r, "per_time_breakdown", &json::is_array, false, "");
  for (const json& t : r.at("per_time_breakdown")) {
    require(t, "time", &json::is_number, false, "per_time_breakdown[].");
    require(t, "r_at_p", &json::is_number, true, "per_time_breakdown[].");
    require(t, "ap", &json::is_number, true, "per_time_breakdown[].");
  }
  require(r, "probe_counts", &json::is_object, false, "");
  for (const char* k : {"free", "occupied", "unknown"}) {
    require(r.at("probe_counts"), k, &json::is_number_unsigned, false, "probe_counts.");
  }
}

std::string cmd_report(const std::string& report_path, const std::optional<std::string>& scaling_path) {
  const json r = json_util::parse(read_text(report_path), report_path);
  validate_report_schema(r);
  auto fmt = [](const json& v) {
    if (v.is_null()) return std::string("n/a");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v.get<double>());
    return std::string(buf);
  };
  std::string out = "# Evaluation report\n\nconfig digest: `" + r.at("config_digest").get<std::string>() + "`\n\n";
  out += "| metric | value |\n|---|---|\n";
  for (const char* k : {"r_at_p70", "ap_occ", "soft_iou", "ap_ego"}) out += std::string("| ") + k + " | " + fmt(r.at(k)) + " |\n";
  for (const char* k : {"r_at_p70_raytrace", "ap_occ_raytrace", "label_agreement"}) {
    if (r.contains(k)) out += std::string("| ") + k + " | " + fmt(r.at(k)) + " |\n";
  }
  out += "\n| time (s) | R@P | AP | R@P (ray-traced) | AP (ray-traced) |\n|---|---|---|---|---|\n";
  for (const json& t : r.at("per_time_breakdown")) {
    out += "| " + fmt(t.at("time")) + " | " + fmt(t.at("r_at_p")) + " | " + fmt(t.at("ap")) + " | " +
           fmt(t.value("r_at_p_raytrace", json())) + " | " + fmt(t.value("ap_raytrace", json())) + " |\n";
  }
  const json& pc = r.at("probe_counts");
  out += "\nray-traced probes: " + std::to_string(pc.at("free").get<std::size_t>()) + " free, " +
         std::to_string(pc.at("occupied").get<std::size_t>()) + " occupied, " +
         std::to_string(pc.at("unknown").get<std::size_t>()) + " unknown\n";
  if (scaling_path) {
    const json s = json_util::parse(read_text(*scaling_path), *scaling_path);
    out += "\n## Scaling\n\n| seed | samples | R@P70 | AP | ego AP |\n|---|---|---|---|---|\n";
    for (const json& row : s.at("rows")) {
      out += "| " + std::to_string(row.at("seed").get<std::uint64_t>()) + " | " +
             std::to_string(row.at("num_pretrain_samples").get<int>()) + " | " + fmt(row.at("r_at_p70")) + " | " +
             fmt(row.at("ap_occ")) + " | " + fmt(row.at("ap_ego")) + " |\n";
    }
  }
  return out;
}

}  // namespace gasp
