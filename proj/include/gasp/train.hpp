#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gasp/field.hpp"
#include "gasp/queries.hpp"

namespace gasp {

class DivergenceError : public Error {
 public:
  DivergenceError(int step, const std::string& what);
  int step() const { return step_; }

 private:
  int step_;
};

struct TrainConfig {
  LossWeights weights;
  double lr_max = 4e-4;
  int warmup_steps = 100;
  int total_steps = 2000;
  /// Queries drawn (with replacement) from one sample per step.
  int batch_occ = 1024;
  int batch_feat = 128;
  int batch_ego = 64;
  std::uint64_t seed = 42;
  int workers = 1;
  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Linear warmup to lr_max over `warmup` steps, then cosine decay reaching 0
/// at `total`. Steps are 1-based.
double learning_rate(int step, double lr_max, int warmup, int total);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  int step = 0;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;
};

/// One bias-corrected Adam update; advances state.step first.
void adam_step(std::vector<double>& params, const std::vector<double>& grad, AdamState& state, double lr);

/// One training sample ready for the field: pillar histogram of its past
/// scans plus its queries split by head.
struct TrainItem {
  Eigen::MatrixXd histogram;
  std::vector<Query> queries;
  std::vector<std::uint32_t> occ, feat, ego;  // indices into queries
};

TrainItem make_train_item(const FieldConfig& cfg, const EncoderInput& input, std::vector<Query> queries);

struct LossRecord {
  int step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct TrainResult {
  FieldParams final_params;
  FieldParams best_params;
  double best_loss = 0.0;
  int best_step = 0;
  AdamState adam;
  std::vector<LossRecord> history;
};

/// Sample index and query batch used at a (1-based) step. A pure function of
/// (seed, step, dataset shape).
std::vector<Query> draw_batch(std::span<const TrainItem> data, const TrainConfig& cfg, int step,
                              std::size_t* sample_index = nullptr);

using TrainProgress = std::function<void(const LossRecord&)>;

/// Runs steps state.step + 1 .. total_steps. A non-finite loss or gradient
/// raises DivergenceError naming the step.
TrainResult train(FieldParams params, std::span<const TrainItem> data, const TrainConfig& cfg,
                  std::optional<AdamState> resume = std::nullopt, const TrainProgress& progress = {});

/// step,lr,total,occ,dino,ego
std::string loss_history_csv(std::span<const LossRecord> history);

/// Full-data loss of one item (no sampling).
LossBreakdown item_loss(const FieldParams& params, const TrainItem& item, const LossWeights& w, int workers = 1);

struct Checkpoint {
  FieldParams params;
  std::optional<AdamState> adam;
  TrainConfig train;
  std::string config_digest;
};

/// "GASPCKPT", u32 version, u64 header length, JSON header (configs, digest,
/// step, section table), then parameter sections and optional Adam moments
/// as f64 row-major in section order.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace gasp
