#include <doctest.h>

#include "gasp/binary_io.hpp"
#include "gasp/scene_io.hpp"
#include "gasp/train.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace gasp;

namespace {

std::vector<TrainItem> small_items(FieldMode mode, int count) {
  std::vector<TrainItem> items;
  for (int i = 0; i < count; ++i) {
    test::GradInstance inst = test::random_instance(100 + static_cast<std::uint64_t>(i), mode);
    // The histogram comes from the instance rather than from scans.
    TrainItem item = make_train_item(inst.params.config(), EncoderInput{}, inst.queries);
    item.histogram = inst.histogram;
    items.push_back(std::move(item));
  }
  return items;
}

TrainConfig small_train(int steps) {
  TrainConfig c;
  c.total_steps = steps;
  c.warmup_steps = 2;
  c.lr_max = 1e-2;
  c.batch_occ = 16;
  c.batch_feat = 8;
  c.batch_ego = 8;
  return c;
}

}  // namespace

TEST_CASE("learning rate warms up linearly then follows a cosine to zero") {
  CHECK(learning_rate(1, 1.0, 10, 110) == doctest::Approx(0.1));
  CHECK(learning_rate(10, 1.0, 10, 110) == doctest::Approx(1.0));
  CHECK(learning_rate(60, 1.0, 10, 110) == doctest::Approx(0.5));
  CHECK(learning_rate(35, 1.0, 10, 110) == doctest::Approx(0.5 * (1.0 + std::cos(std::numbers::pi / 4.0))));
  CHECK(learning_rate(110, 1.0, 10, 110) == 0.0);
  double prev = 2.0;
  for (int s = 10; s <= 110; ++s) {
    const double lr = learning_rate(s, 1.0, 10, 110);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("Adam's first step moves each parameter by lr against the gradient sign") {
  std::vector<double> p{1.0, -2.0, 0.5}, g{0.3, -4.0, 0.0};
  AdamState s;
  adam_step(p, g, s, 0.1);
  CHECK(s.step == 1);
  // m_hat = g and v_hat = g^2 after bias correction.
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.3 / (0.3 + 1e-8)));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 4.0 / (4.0 + 1e-8)));
  CHECK(p[2] == 0.5);
  // Second step against a hand-computed recursion.
  const double m = 0.9 * 0.1 * 0.3 + 0.1 * 0.3;
  const double v = 0.999 * 0.001 * 0.09 + 0.001 * 0.09;
  const double expected = p[0] - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  adam_step(p, g, s, 0.1);
  CHECK(p[0] == doctest::Approx(expected).epsilon(1e-12));
  std::vector<double> wrong(2, 0.0);
  CHECK_THROWS(adam_step(p, wrong, s, 0.1));
}

TEST_CASE("batches are pure functions of (seed, step)") {
  const auto items = small_items(FieldMode::kAmortized, 3);
  const TrainConfig cfg = small_train(10);
  for (int step = 1; step <= 5; ++step) {
    std::size_t a = 0, b = 0;
    const auto x = draw_batch(items, cfg, step, &a);
    const auto y = draw_batch(items, cfg, step, &b);
    CHECK(a == b);
    REQUIRE(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i].position == y[i].position);
    std::size_t occ = 0, feat = 0, ego = 0;
    for (const Query& q : x) (is_occupancy(q.tag) ? occ : (is_feature(q.tag) ? feat : ego))++;
    CHECK(occ == 16);
    CHECK(feat == 8);
    CHECK(ego == 8);
  }
}

TEST_CASE("training is reproducible and resuming equals running straight through") {
  const auto items = small_items(FieldMode::kAmortized, 2);
  const FieldParams init = FieldParams::initialize(test::small_field(FieldMode::kAmortized), 4);
  const TrainConfig cfg = small_train(12);
  const TrainResult full = train(init, items, cfg);
  const TrainResult again = train(init, items, cfg);
  CHECK(full.final_params.data() == again.final_params.data());
  CHECK(full.history.size() == 12);

  // Steps 1..5 by hand, then resume from the Adam state.
  TrainResult first;
  {
    AdamState adam;
    FieldParams p = init;
    for (int step = 1; step <= 5; ++step) {
      std::size_t idx = 0;
      const auto batch = draw_batch(items, cfg, step, &idx);
      std::vector<double> grad(p.size(), 0.0);
      sample_loss(p, items[idx].histogram, batch, cfg.weights, &grad);
      adam_step(p.data(), grad, adam, learning_rate(step, cfg.lr_max, cfg.warmup_steps, cfg.total_steps));
    }
    first.final_params = p;
    first.adam = adam;
  }
  const TrainResult resumed = train(first.final_params, items, cfg, first.adam);
  CHECK(resumed.history.front().step == 6);
  CHECK(resumed.final_params.data() == full.final_params.data());
}

TEST_CASE("training reduces the loss on a fixed sample") {
  const auto items = small_items(FieldMode::kFitPerScene, 1);
  const FieldParams init = FieldParams::initialize(test::small_field(FieldMode::kFitPerScene), 4);
  TrainConfig cfg = small_train(150);
  const double before = item_loss(init, items[0], cfg.weights).total;
  const TrainResult r = train(init, items, cfg);
  CHECK(item_loss(r.final_params, items[0], cfg.weights).total < 0.8 * before);
  CHECK(r.best_loss <= r.history.front().loss.total);
}

TEST_CASE("non-finite parameters abort with the step number") {
  const auto items = small_items(FieldMode::kAmortized, 1);
  FieldParams p = FieldParams::initialize(test::small_field(FieldMode::kAmortized), 4);
  p.data()[p.section("occ.out.b").offset] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(p, items, small_train(5));
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 1);
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("loss CSV has a header and one row per step") {
  const auto items = small_items(FieldMode::kAmortized, 1);
  const TrainResult r = train(FieldParams::initialize(test::small_field(FieldMode::kAmortized), 4), items, small_train(4));
  const std::string csv = loss_history_csv(r.history);
  CHECK(csv.rfind("step,lr,total,occ,dino,ego\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("checkpoints round trip bit-exactly and reject corruption") {
  const auto items = small_items(FieldMode::kAmortized, 1);
  const TrainResult r = train(FieldParams::initialize(test::small_field(FieldMode::kAmortized), 4), items, small_train(4));
  const Checkpoint ck{r.final_params, r.adam, small_train(4), "abc123"};
  const auto bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.params.data() == ck.params.data());
  REQUIRE(back.adam.has_value());
  CHECK(back.adam->m == r.adam.m);
  CHECK(back.adam->v == r.adam.v);
  CHECK(back.adam->step == 4);
  CHECK(back.config_digest == "abc123");
  CHECK(train_config_to_json(back.train) == train_config_to_json(ck.train));
  CHECK(encode_checkpoint(back) == bytes);

  auto cut = bytes;
  cut.resize(cut.size() - 8);
  CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic), FormatError);
  const Checkpoint no_adam{r.final_params, std::nullopt, small_train(4), ""};
  CHECK_FALSE(decode_checkpoint(encode_checkpoint(no_adam)).adam.has_value());
}

TEST_CASE("train config JSON rejects invalid values") {
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json::parse(R"({"lr_max": -1})")), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json::parse(R"({"warmup_steps": 50, "total_steps": 10})")),
                  ConfigError);
  const TrainConfig c = train_config_from_json(nlohmann::json::parse(R"({"lambda_dino": 0.25})"));
  CHECK(c.weights.dino == 0.25);
  CHECK(c.weights.occ == 1.0);
}
