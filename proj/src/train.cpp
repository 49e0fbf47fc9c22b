#include <cmath>
#include <cstdio>

#include "gasp/rng.hpp"
#include "gasp/scene_io.hpp"
#include "gasp/train.hpp"

namespace gasp {

using nlohmann::json;

DivergenceError::DivergenceError(int step, const std::string& what)
    : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

void TrainConfig::validate() const {
  if (weights.occ < 0.0 || weights.dino < 0.0 || weights.ego < 0.0) {
    throw Error("TrainConfig: loss weights must be >= 0");
  }
  if (!(lr_max > 0.0)) throw Error("TrainConfig: lr_max must be positive");
  if (total_steps < 1) throw Error("TrainConfig: total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw Error("TrainConfig: warmup_steps must be in [0, total_steps)");
  }
  if (batch_occ < 0 || batch_feat < 0 || batch_ego < 0 || batch_occ + batch_feat + batch_ego == 0) {
    throw Error("TrainConfig: batch counts must be >= 0 and not all zero");
  }
  if (workers < 1) throw Error("TrainConfig: workers must be >= 1");
}

json train_config_to_json(const TrainConfig& c) {
  return {{"lambda_occ", c.weights.occ},
          {"lambda_dino", c.weights.dino},
          {"lambda_ego", c.weights.ego},
          {"per_term_average", c.weights.per_term_average},
          {"lr_max", c.lr_max},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"batch_occ", c.batch_occ},
          {"batch_feat", c.batch_feat},
          {"batch_ego", c.batch_ego},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  using namespace json_util;
  const std::string p = "train";
  TrainConfig c;
  c.weights.occ = number_or(j, "lambda_occ", c.weights.occ, p);
  c.weights.dino = number_or(j, "lambda_dino", c.weights.dino, p);
  c.weights.ego = number_or(j, "lambda_ego", c.weights.ego, p);
  c.weights.per_term_average = bool_or(j, "per_term_average", c.weights.per_term_average, p);
  c.lr_max = number_or(j, "lr_max", c.lr_max, p);
  c.warmup_steps = integer_or(j, "warmup_steps", c.warmup_steps, p);
  c.total_steps = integer_or(j, "total_steps", c.total_steps, p);
  c.batch_occ = integer_or(j, "batch_occ", c.batch_occ, p);
  c.batch_feat = integer_or(j, "batch_feat", c.batch_feat, p);
  c.batch_ego = integer_or(j, "batch_ego", c.batch_ego, p);
  c.seed = uint_or(j, "seed", c.seed, p);
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(p + ": " + e.what());
  }
  return c;
}

double learning_rate(int step, double lr_max, int warmup, int total) {
  if (step <= warmup) return lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total) return 0.0;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return 0.5 * lr_max * (1.0 + std::cos(std::numbers::pi * progress));
}

void adam_step(std::vector<double>& params, const std::vector<double>& grad, AdamState& state, double lr) {
  if (grad.size() != params.size()) throw Error("adam_step: gradient size mismatch");
  if (state.m.empty()) state.m.assign(params.size(), 0.0);
  if (state.v.empty()) state.v.assign(params.size(), 0.0);
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error("adam_step: optimizer state size mismatch");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(AdamState::kBeta1, state.step);
  const double c2 = 1.0 - std::pow(AdamState::kBeta2, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = AdamState::kBeta1 * state.m[i] + (1.0 - AdamState::kBeta1) * g;
    state.v[i] = AdamState::kBeta2 * state.v[i] + (1.0 - AdamState::kBeta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + AdamState::kEpsilon);
  }
}

TrainItem make_train_item(const FieldConfig& cfg, const EncoderInput& input, std::vector<Query> queries) {
  TrainItem item;
  item.histogram = pillar_histogram(cfg, input.past_scans);
  item.queries = std::move(queries);
  for (std::size_t i = 0; i < item.queries.size(); ++i) {
    const QueryTag t = item.queries[i].tag;
    auto& list = is_occupancy(t) ? item.occ : (is_feature(t) ? item.feat : item.ego);
    list.push_back(static_cast<std::uint32_t>(i));
  }
  return item;
}

std::vector<Query> draw_batch(std::span<const TrainItem> data, const TrainConfig& cfg, int step,
                              std::size_t* sample_index) {
  if (data.empty()) throw Error("draw_batch: empty dataset");
  const auto s = static_cast<std::uint64_t>(step);
  RandomStream pick(cfg.seed, stream_id(StreamDomain::kTrain, 2 * s));
  const std::size_t index = data.size() == 1 ? 0 : static_cast<std::size_t>(pick.below(data.size()));
  if (sample_index) *sample_index = index;
  const TrainItem& item = data[index];
  RandomStream rng(cfg.seed, stream_id(StreamDomain::kTrain, 2 * s + 1));
  std::vector<Query> batch;
  batch.reserve(static_cast<std::size_t>(cfg.batch_occ + cfg.batch_feat + cfg.batch_ego));
  auto take = [&](const std::vector<std::uint32_t>& pool, int count) {
    if (pool.empty()) return;
    for (int k = 0; k < count; ++k) batch.push_back(item.queries[pool[rng.below(pool.size())]]);
  };
  take(item.occ, cfg.batch_occ);
  take(item.feat, cfg.batch_feat);
  take(item.ego, cfg.batch_ego);
  return batch;
}

TrainResult train(FieldParams params, std::span<const TrainItem> data, const TrainConfig& cfg,
                  std::optional<AdamState> resume, const TrainProgress& progress) {
  cfg.validate();
  if (data.empty()) throw Error("train: dataset has no samples");
  TrainResult result;
  result.adam = resume ? std::move(*resume) : AdamState{};
  result.best_loss = std::numeric_limits<double>::infinity();
  std::vector<double> grad(params.size());
  for (int step = result.adam.step + 1; step <= cfg.total_steps; ++step) {
    std::size_t index = 0;
    const std::vector<Query> batch = draw_batch(data, cfg, step, &index);
    std::fill(grad.begin(), grad.end(), 0.0);
    const LossBreakdown loss = sample_loss(params, data[index].histogram, batch, cfg.weights, &grad, cfg.workers);
    if (!std::isfinite(loss.total)) throw DivergenceError(step, "non-finite loss");
    for (double g : grad) {
      if (!std::isfinite(g)) throw DivergenceError(step, "non-finite gradient");
    }
    if (loss.total < result.best_loss) {
      result.best_loss = loss.total;
      result.best_step = step;
      result.best_params = params;
    }
    const double lr = learning_rate(step, cfg.lr_max, cfg.warmup_steps, cfg.total_steps);
    adam_step(params.data(), grad, result.adam, lr);
    const LossRecord record{step, lr, loss};
    result.history.push_back(record);
    if (progress) progress(record);
  }
  if (result.history.empty()) result.best_params = params;
  result.final_params = std::move(params);
  return result;
}

std::string loss_history_csv(std::span<const LossRecord> history) {
  std::string out = "step,lr,total,occ,dino,ego\n";
  char line[256];
  for (const LossRecord& r : history) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.lr, r.loss.total, r.loss.occ,
                  r.loss.dino, r.loss.ego);
    out += line;
  }
  return out;
}

LossBreakdown item_loss(const FieldParams& params, const TrainItem& item, const LossWeights& w, int workers) {
  return sample_loss(params, item.histogram, item.queries, w, nullptr, workers);
}

}  // namespace gasp
