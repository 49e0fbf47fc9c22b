#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gasp/eval.hpp"
#include "gasp/field.hpp"
#include "gasp/pca.hpp"
#include "gasp/queries.hpp"
#include "gasp/suite.hpp"
#include "gasp/train.hpp"

namespace gasp {

struct PcaConfig {
  int dim = 16;
  /// Pixel features used for fitting, drawn without replacement.
  int max_samples = 20000;
};

struct EvalConfig {
  EvalGrid grid;
  EgoEvalConfig ego;
  double precision_target = 0.7;
  std::uint64_t heldout_seed = 1000;
  int heldout_scenes = 8;  // fewer leave R@P70 noisy at the 0.02 level
  /// Acceptance gates for `eval`; unset gates are not checked.
  std::optional<double> min_r_at_p70;
  std::optional<double> min_ap_ego;
};

/// Scaling runs replace these training and width settings of the base
/// config; the narrower field trains fast enough for the full sweep.
struct ScalingConfig {
  std::vector<int> sample_counts{1, 4, 16, 64};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  double lr_max = 2e-3;
  int warmup_steps = 50;
  int total_steps = 4000;
  int channels = 16;
};

/// Every parameter of the pipeline. Absent JSON keys take the defaults.
struct RunConfig {
  SuiteConfig suite;
  SamplerConfig sampler;
  AugmentConfig augment;
  PcaConfig pca;
  FieldConfig field;
  TrainConfig train;
  EvalConfig eval;
  ScalingConfig scaling;
};

nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
/// Parses text; JSON syntax errors name line and column.
RunConfig run_config_from_text(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Digest of the config sections a stage depends on. Each stage's digest
/// covers its upstream stages.
enum class Stage { kSimulate, kQueries, kTrain, kEval };
std::string stage_digest(const RunConfig& c, Stage stage);

/// Seed of training sample i, derived from the sampler seed.
std::uint64_t sample_seed(std::uint64_t base, std::uint64_t index);

// ---- in-memory pipeline ----------------------------------------------------------

/// Image pixel features of the sequences, subsampled for fitting.
PcaModel fit_feature_pca(std::span<const Sequence> seqs, const PcaConfig& cfg, std::uint64_t seed);

/// Sensor data of an evaluation scene in the reference frame, with eval
/// scans simulated at the probe times.
EvalScene make_eval_scene(const Sequence& seq, const FieldConfig& field, const EvalGrid& grid, int workers = 1);

struct ScalingRow {
  std::uint64_t seed = 0;
  int samples = 0;
  double r_at_p70 = 0.0;
  double ap_occ = 0.0;
  double ap_ego = 0.0;
  double final_loss = 0.0;
};

struct ScalingSummary {
  std::vector<ScalingRow> rows;
  /// Per seed: non-decreasing R@P70 and gain of the largest over the smallest count.
  std::vector<bool> monotone;
  std::vector<double> gain;
};

using Progress = std::function<void(const std::string&)>;

/// Amortized training at each sample count for each seed, evaluated on a
/// held-out suite. The seed replaces the suite, sampler and train seeds.
ScalingSummary run_scaling(const RunConfig& cfg, int workers = 1, const Progress& progress = {});

nlohmann::ordered_json scaling_to_json(const ScalingSummary& s, const std::string& digest);
std::string scaling_to_csv(const ScalingSummary& s);

// ---- on-disk stages ------------------------------------------------------------------

struct DatasetScene {
  Scene scene;
  std::vector<LidarScan> past;
  std::vector<LidarScan> future;
  std::vector<FeatureImage> images;
};

struct CommandOptions {
  int workers = 1;
  bool force = false;
  Progress progress;
};

/// dataset/{scenes, scans, images, manifest.json}. Built in a sibling
/// directory and renamed into place.
void cmd_simulate(const RunConfig& cfg, const std::string& out_dir, const CommandOptions& opt);
/// Checks the manifest (digest and file hashes) and loads every scene.
std::vector<Sequence> load_dataset(const std::string& dir, const RunConfig& cfg, bool force);

/// queries/{pca.bin, sample_XXXX.{qset,input.bin,meta.json}, manifest.json}.
void cmd_genqueries(const RunConfig& cfg, const std::string& dataset_dir, const std::string& out_dir,
                    const CommandOptions& opt);
struct LoadedSample {
  EncoderInput input;
  QuerySet queries;
};
std::vector<LoadedSample> load_query_sets(const std::string& dir, const RunConfig& cfg, bool force);

/// Writes the final checkpoint, `<checkpoint>.best` and the loss CSV.
void cmd_train(const RunConfig& cfg, const std::string& queries_dir, const std::string& checkpoint_path,
               const std::string& loss_csv, const std::optional<std::string>& resume, const CommandOptions& opt);

/// Returns 0, or 1 when a configured acceptance gate fails. Scenes come from
/// the dataset when given, otherwise from the held-out suite.
int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path, const std::optional<std::string>& dataset_dir,
             const std::string& report_path, const std::optional<std::string>& raster_path,
             const CommandOptions& opt);

void cmd_scaling(const RunConfig& cfg, const std::string& out_dir, const CommandOptions& opt);

/// Markdown summary of a report (and optional scaling table). Throws when a
/// report lacks a required key.
std::string cmd_report(const std::string& report_path, const std::optional<std::string>& scaling_path);

/// Keys every eval report must carry.
void validate_report_schema(const nlohmann::json& report);

}  // namespace gasp
