#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "gasp/binary_io.hpp"
#include "gasp/pipeline.hpp"
#include "gasp/scene_io.hpp"
#include "pipeline_support.hpp"

using namespace gasp;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("run config round trips through JSON") {
  const RunConfig c = test::tiny_run_config();
  const nlohmann::json j = run_config_to_json(c);
  CHECK(run_config_to_json(run_config_from_json(j)) == j);
  CHECK(run_config_to_json(run_config_from_text(j.dump())) == j);
  const RunConfig defaults = run_config_from_json(nlohmann::json::object());
  CHECK(defaults.field.feature_dim == defaults.pca.dim);
  CHECK(defaults.field.past_count == defaults.suite.timing.past_count);
}

TEST_CASE("run config rejects unknown keys, bad syntax and inconsistent sections") {
  const std::string top = error_of([] { run_config_from_text(R"({"trian": {}})"); });
  CHECK(top.find("trian") != std::string::npos);
  const std::string nested = error_of([] { run_config_from_text(R"({"train": {"lr": 1}})"); });
  CHECK(nested.find("train.lr") != std::string::npos);
  CHECK_THROWS_AS(run_config_from_text(R"({"train": {"lr": 1}})"), ConfigError);

  const std::string syntax = error_of([] { run_config_from_text("{\n  \"train\": {,}\n}"); });
  CHECK(syntax.find("line 2") != std::string::npos);
  CHECK_THROWS_AS(run_config_from_text("{\n  \"train\": {,}\n}"), ConfigError);

  CHECK_THROWS_AS(run_config_from_text(R"({"scaling": {"sample_counts": [4, 1]}})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_text(R"({"pca": {"dim": 8}, "field": {"feature_dim": 16}})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_text(R"({"eval": {"grid": {"region": 20.0}}})"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("stage digests cover exactly their upstream sections") {
  const RunConfig base = test::tiny_run_config();
  auto digests = [](const RunConfig& c) {
    return std::vector<std::string>{stage_digest(c, Stage::kSimulate), stage_digest(c, Stage::kQueries),
                                    stage_digest(c, Stage::kTrain), stage_digest(c, Stage::kEval)};
  };
  const auto d0 = digests(base);
  CHECK(std::set<std::string>(d0.begin(), d0.end()).size() == 4);

  // First stage whose digest must change for an edit in each section.
  auto changed_from = [&](const RunConfig& c) {
    const auto d = digests(c);
    int first = -1;
    for (int s = 0; s < 4; ++s) {
      if (d[s] != d0[s] && first < 0) first = s;
      if (first >= 0) CHECK(d[s] != d0[s]);
      if (first < 0) CHECK(d[s] == d0[s]);
    }
    return first;
  };
  RunConfig c = base;
  c.suite.num_parked += 1;
  CHECK(changed_from(c) == 0);
  c = base;
  c.sampler.delta = 0.2;
  CHECK(changed_from(c) == 1);
  c = base;
  c.train.lr_max *= 2.0;
  CHECK(changed_from(c) == 2);
  c = base;
  c.eval.heldout_scenes = 3;
  CHECK(changed_from(c) == 3);
  c = base;
  c.scaling.seeds = {9};
  CHECK(changed_from(c) == -1);
}

TEST_CASE("sample seeds are distinct and depend on the base seed") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(sample_seed(42, i));
  CHECK(seen.size() == 1000);
  CHECK(sample_seed(42, 0) != sample_seed(43, 0));
  CHECK(sample_seed(42, 5) == sample_seed(42, 5));
}

TEST_CASE("zero scenes give a valid empty dataset") {
  test::TempDir dir("empty");
  RunConfig c = test::tiny_run_config(42, 0);
  cmd_simulate(c, dir / "dataset", {});
  const auto m = nlohmann::json::parse(read_text(dir / "dataset/manifest.json"));
  CHECK(m.at("format") == "gasp-dataset");
  CHECK(m.at("scenes").empty());
  CHECK(m.at("files").empty());
  CHECK(load_dataset(dir / "dataset", c, false).empty());
  CHECK_THROWS(cmd_genqueries(c, dir / "dataset", dir / "queries", {}));
}

TEST_CASE("the on-disk pipeline runs end to end and checks its inputs") {
  test::TempDir dir("pipeline");
  const RunConfig c = test::tiny_run_config();
  CommandOptions opt;
  cmd_simulate(c, dir / "dataset", opt);
  CHECK_FALSE(fs::exists(dir / "dataset.partial"));
  cmd_genqueries(c, dir / "dataset", dir / "queries", opt);
  cmd_train(c, dir / "queries", dir / "ckpt.bin", dir / "loss.csv", std::nullopt, opt);
  CHECK(fs::exists(dir / "ckpt.bin.best"));
  const std::string csv = read_text(dir / "loss.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 21);

  CHECK(cmd_eval(c, dir / "ckpt.bin", std::string(dir / "dataset"), dir / "report.json", dir / "ego.pgm", opt) == 0);
  const auto report = nlohmann::json::parse(read_text(dir / "report.json"));
  CHECK_NOTHROW(validate_report_schema(report));
  CHECK(report.at("config_digest") == stage_digest(c, Stage::kEval));
  CHECK(read_file(dir / "ego.pgm").at(1) == '5');
  const std::string md = cmd_report(dir / "report.json", std::nullopt);
  CHECK(md.find("| r_at_p70 |") != std::string::npos);

  {  // loaded samples match the dataset
    const auto samples = load_query_sets(dir / "queries", c, false);
    REQUIRE(samples.size() == 2);
    CHECK(samples[0].queries.feature_dim == 8);
    CHECK(samples[0].input.past_scans.size() == static_cast<std::size_t>(c.suite.timing.past_count));
  }
  {  // a changed upstream config is refused unless forced
    RunConfig other = c;
    other.suite.num_parked += 1;
    const std::string msg = error_of([&] { load_dataset(dir / "dataset", other, false); });
    CHECK(msg.find("--force") != std::string::npos);
    CHECK(load_dataset(dir / "dataset", other, true).size() == 2);
    RunConfig retrain = c;
    retrain.train.lr_max *= 2.0;
    CHECK_THROWS(cmd_eval(retrain, dir / "ckpt.bin", std::string(dir / "dataset"), dir / "r2.json", std::nullopt, opt));
    CHECK_THROWS(cmd_train(retrain, dir / "queries", dir / "c2.bin", dir / "l2.csv", std::string(dir / "ckpt.bin"),
                           opt));
  }
  {  // an eval gate failure returns 1
    RunConfig gated = c;
    gated.eval.min_r_at_p70 = 1.01;
    CHECK(cmd_eval(gated, dir / "ckpt.bin", std::string(dir / "dataset"), dir / "r3.json", std::nullopt,
                   {1, true, {}}) == 1);
  }
  {  // resuming continues the step count and appends to the loss log
    RunConfig longer = c;
    longer.train.total_steps = 30;
    cmd_train(longer, dir / "queries", dir / "ckpt30.bin", dir / "loss.csv", std::string(dir / "ckpt.bin"),
              {1, true, {}});
    const std::string log = read_text(dir / "loss.csv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 31);
    CHECK(decode_checkpoint(read_file(dir / "ckpt30.bin")).adam->step == 30);
  }
  {  // tampered files are detected
    const std::string scan = dir / "dataset/scans/scene_0001_past.bin";
    auto bytes = read_file(scan);
    bytes[bytes.size() / 2] ^= 0x01;
    write_file(scan, bytes);
    const std::string msg = error_of([&] { load_dataset(dir / "dataset", c, false); });
    CHECK(msg.find("scene_0001_past.bin") != std::string::npos);
    CHECK_THROWS(load_dataset(dir / "dataset", c, true));
  }
}

TEST_CASE("report schema validation names the missing key") {
  nlohmann::json r = {{"config_digest", "x"}, {"r_at_p70", 0.5},           {"ap_occ", 0.5},
                      {"soft_iou", nullptr},  {"ap_ego", 0.1},             {"per_time_breakdown", nlohmann::json::array()},
                      {"probe_counts", {{"free", 1u}, {"occupied", 2u}, {"unknown", 3u}}}};
  CHECK_NOTHROW(validate_report_schema(r));
  r.erase("ap_occ");
  const std::string msg = error_of([&] { validate_report_schema(r); });
  CHECK(msg.find("ap_occ") != std::string::npos);
  r["ap_occ"] = "high";
  CHECK_THROWS(validate_report_schema(r));
}

TEST_CASE("feature PCA is reproducible and respects the sample cap") {
  const SuiteConfig s = test::small_suite(5, 1);
  const std::vector<Sequence> seqs{simulate_sequence(make_scene(s, 0), s.timing)};
  PcaConfig pc;
  pc.dim = 4;
  pc.max_samples = 500;
  const PcaModel a = fit_feature_pca(seqs, pc, 1);
  const PcaModel b = fit_feature_pca(seqs, pc, 1);
  CHECK(a.components == b.components);
  CHECK(a.output_dim() == 4);
  const PcaModel other = fit_feature_pca(seqs, pc, 2);
  CHECK(other.mean != a.mean);
}
