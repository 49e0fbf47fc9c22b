// Command-line entry points. Exit status: 0 ok, 1 acceptance gate or runtime
// failure, 2 usage or configuration error.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gasp/binary_io.hpp"
#include "gasp/pipeline.hpp"
#include "gasp/scene_io.hpp"
#include "gasp/train.hpp"

namespace {

constexpr int kUsageError = 2;

struct Common {
  std::string config;
  int workers = 1;
  bool force = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "Run config JSON; absent keys take defaults")->envname("GASP_CONFIG");
  cmd->add_option("-w,--workers", c.workers, "Worker threads (1 is the reproducible mode)")
      ->check(CLI::Range(1, 256));
  cmd->add_flag("--force", c.force, "Accept inputs produced with a different config digest");
  cmd->add_flag("-q,--quiet", c.quiet, "Suppress progress output");
}

gasp::RunConfig load(const Common& c) {
  return c.config.empty() ? gasp::run_config_from_json(nlohmann::json::object()) : gasp::load_run_config(c.config);
}

gasp::CommandOptions options(const Common& c) {
  gasp::CommandOptions o;
  o.workers = c.workers;
  o.force = c.force;
  if (!c.quiet) o.progress = [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); };
  return o;
}

std::optional<std::string> optional_path(const std::string& s) {
  return s.empty() ? std::nullopt : std::optional<std::string>(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised 4D occupancy pre-training pipeline at desk scale", "gasp"};
  app.require_subcommand(1);
  app.fallthrough(false);

  Common common;
  std::string dataset = "dataset", queries = "queries", checkpoint = "checkpoint.bin", loss_csv, resume;
  std::string eval_dataset, report = "report.json", raster, scaling_dir = "scaling", scaling_json, markdown;

  auto* simulate = app.add_subcommand("simulate", "Simulate the scene suite into a dataset directory");
  add_common(simulate, common);
  simulate->add_option("-o,--out", dataset, "Dataset directory")->envname("GASP_DATASET");

  auto* genqueries = app.add_subcommand("genqueries", "Fit the feature PCA and write one query set per scene");
  add_common(genqueries, common);
  genqueries->add_option("-d,--dataset", dataset, "Dataset directory")->envname("GASP_DATASET");
  genqueries->add_option("-o,--out", queries, "Query-set directory")->envname("GASP_QUERIES");

  auto* train = app.add_subcommand("train", "Train a field on the query sets");
  add_common(train, common);
  train->add_option("-i,--queries", queries, "Query-set directory")->envname("GASP_QUERIES");
  train->add_option("-o,--checkpoint", checkpoint, "Checkpoint path")->envname("GASP_CHECKPOINT");
  train->add_option("--loss-csv", loss_csv, "Loss history CSV (default: <checkpoint>.loss.csv)");
  train->add_option("--resume", resume, "Continue from this checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint with the 4D occupancy and ego-path protocols");
  add_common(eval, common);
  eval->add_option("-i,--checkpoint", checkpoint, "Checkpoint path")->envname("GASP_CHECKPOINT");
  eval->add_option("-d,--dataset", eval_dataset, "Evaluate on this dataset instead of the held-out suite")
      ->envname("GASP_EVAL_DATASET");
  eval->add_option("-o,--report", report, "Report JSON path")->envname("GASP_REPORT");
  eval->add_option("--raster", raster, "Write the ego-path BEV raster of the first scene as PGM");

  auto* scaling = app.add_subcommand("scaling", "Amortized training at each sample count, evaluated on held-out scenes");
  add_common(scaling, common);
  scaling->add_option("-o,--out", scaling_dir, "Output directory for scaling.csv and scaling.json")
      ->envname("GASP_SCALING");

  auto* report_cmd = app.add_subcommand("report", "Summarize an eval report (and scaling table) as markdown");
  report_cmd->add_option("-i,--report", report, "Report JSON path")->envname("GASP_REPORT")->check(CLI::ExistingFile);
  report_cmd->add_option("--scaling", scaling_json, "scaling.json from the scaling command")->check(CLI::ExistingFile);
  report_cmd->add_option("-o,--out", markdown, "Markdown output path (default: stdout)");

  // CLI11 reports a stray first word only as a missing subcommand.
  if (argc > 1 && argv[1][0] != '-' && app.get_subcommands([&](CLI::App* sub) { return sub->get_name() == argv[1]; }).empty()) {
    std::cerr << "unknown subcommand '" << argv[1] << "'\nRun with --help for more information.\n";
    return kUsageError;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (report_cmd->parsed()) {
      const std::string md = gasp::cmd_report(report, optional_path(scaling_json));
      if (markdown.empty()) {
        std::cout << md;
      } else {
        gasp::write_text_atomic(markdown, md);
      }
      return 0;
    }
    const gasp::RunConfig cfg = load(common);
    const gasp::CommandOptions opt = options(common);
    if (simulate->parsed()) {
      gasp::cmd_simulate(cfg, dataset, opt);
    } else if (genqueries->parsed()) {
      gasp::cmd_genqueries(cfg, dataset, queries, opt);
    } else if (train->parsed()) {
      gasp::cmd_train(cfg, queries, checkpoint, loss_csv.empty() ? checkpoint + ".loss.csv" : loss_csv,
                      optional_path(resume), opt);
    } else if (eval->parsed()) {
      return gasp::cmd_eval(cfg, checkpoint, optional_path(eval_dataset), report, optional_path(raster), opt);
    } else if (scaling->parsed()) {
      gasp::cmd_scaling(cfg, scaling_dir, opt);
    }
    return 0;
  } catch (const gasp::ConfigError& e) {
    std::fprintf(stderr, "gasp: config error: %s\n", e.what());
    return kUsageError;
  } catch (const gasp::DivergenceError& e) {
    std::fprintf(stderr, "gasp: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "gasp: %s\n", e.what());
    return 1;
  }
}
