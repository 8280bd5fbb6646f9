// nodulenet command-line tool.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "nodulenet/error.hpp"
#include "nodulenet/evaluation.hpp"
#include "nodulenet/parallel.hpp"
#include "nodulenet/pipeline.hpp"
#include "nodulenet/synthetic.hpp"
#include "nodulenet/task.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace nodulenet;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<std::string> aggregation;
  bool keep_indeterminate = false;
  bool no_jitter = false;
  std::optional<int> folds;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Seed for folds, initialization and augmentation");
  cmd->add_option("--task", o.task, "Task mode")->check(CLI::IsMember({"multiclass4", "multiclass5", "binary"}));
  cmd->add_option("--aggregation", o.aggregation, "Binary aggregation of multiclass outputs")
      ->check(CLI::IsMember({"sum", "max"}));
  cmd->add_flag("--keep-indeterminate", o.keep_indeterminate, "Keep nodules aggregated to Indeterminate");
  cmd->add_flag("--no-jitter", o.no_jitter, "Disable bounding-box jittering");
  cmd->add_option("--folds", o.folds, "Number of cross-validation folds");
}

ExperimentConfig resolve_config(const Overrides& o) {
  ExperimentConfig cfg = load_experiment_config(o.config);
  if (o.task) {
    cfg.task = parse_task(*o.task);
    cfg.sync_task();
  }
  if (o.aggregation) cfg.aggregation = parse_aggregation(*o.aggregation);
  if (o.keep_indeterminate) cfg.keep_indeterminate = true;
  if (o.no_jitter) cfg.augment.jitter_enabled = false;
  if (o.folds) cfg.folds = *o.folds;
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

json reports_json(const std::vector<MetricsReport>& reports) {
  json out = json::array();
  for (const auto& r : reports) out.push_back(json::parse(report_to_json(r)));
  return out;
}

int fail(const std::string& kind, const std::string& message) {
  std::cout.flush();
  std::cerr << json{{"error", message}, {"kind", kind}}.dump() << std::endl;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  CLI::App app{"Lung-nodule patch classification pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 0;
  bool quiet = false;
  app.add_option("--threads", threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  app.add_flag("-q,--quiet", quiet, "No progress output");

  Overrides extract_o, train_o, report_o;
  auto* extract = app.add_subcommand("extract", "Resample, normalize and cut patches into per-fold shards");
  add_overrides(extract, extract_o);
  auto* train = app.add_subcommand("train", "Cross-validate: train per fold, TTA-predict, pool and report");
  add_overrides(train, train_o);
  auto* report = app.add_subcommand("report", "Recompute reports from pooled predictions");
  add_overrides(report, report_o);

  std::string checkpoint, volume, aggregation = "sum";
  std::vector<int> bbox;
  auto* predict = app.add_subcommand("predict", "Probabilities for one box in one volume");
  predict->add_option("--checkpoint", checkpoint, "Fold checkpoint")->required()->check(CLI::ExistingFile);
  predict->add_option("--volume", volume, "Volume payload (.raw with sidecar)")->required()->check(CLI::ExistingFile);
  predict->add_option("--bbox", bbox, "x0 y0 z0 x1 y1 z1 (canonical voxels, half-open)")->required()->expected(6);
  predict->add_option("--aggregation", aggregation, "Binary aggregation of multiclass outputs")
      ->check(CLI::IsMember({"sum", "max"}));

  SyntheticSpec synth_spec;
  std::string synth_out;
  int synth_size = 64;
  auto* synth = app.add_subcommand("synth", "Write a synthetic sphere dataset and a matching config");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--count", synth_spec.count, "Volumes (one nodule each)")->check(CLI::PositiveNumber);
  synth->add_option("--patients", synth_spec.patients, "Distinct patients")->check(CLI::PositiveNumber);
  synth->add_option("--size", synth_size, "Cubic volume edge in voxels")->check(CLI::Range(16, 512));
  synth->add_option("--seed", synth_spec.seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  set_num_threads(threads);
  const ProgressSink progress = quiet ? ProgressSink{} : ProgressSink([](const std::string& m) {
    std::cerr << m << std::endl;
  });

  try {
    if (extract->parsed()) {
      const auto summary = cmd_extract(resolve_config(extract_o), progress);
      std::cout << summary.to_json() << std::endl;
    } else if (train->parsed()) {
      const auto result = cmd_train_eval(resolve_config(train_o), progress);
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << std::endl;
      std::cout << reports_json(result.reports).dump() << std::endl;
    } else if (report->parsed()) {
      std::cout << reports_json(cmd_report(resolve_config(report_o))).dump() << std::endl;
    } else if (predict->parsed()) {
      const BoundingBox box{bbox[0], bbox[1], bbox[2], bbox[3], bbox[4], bbox[5]};
      std::cout << cmd_predict(checkpoint, volume, box, parse_aggregation(aggregation)) << std::endl;
    } else if (synth->parsed()) {
      synth_spec.dims = {synth_size, synth_size, synth_size};
      const fs::path root = synth_out;
      const auto ds = make_synthetic_dataset(synth_spec);
      save_synthetic_dataset(ds, root / "volumes", root / "manifest.json");
      // Small binary experiment that fits the generated volumes.
      ExperimentConfig cfg;
      cfg.paths = {"volumes", "manifest.json", "out"};
      cfg.model = ModelConfig::tiny(1);
      cfg.model.stem_pool = true;
      cfg.task = Task::binary;
      cfg.sync_task();
      cfg.train.max_epochs = 10;
      cfg.train.batch_size = 16;
      cfg.seed = synth_spec.seed;
      std::ofstream(root / "config.json") << json::parse(cfg.to_json()).dump(2) << "\n";
      std::cout << json{{"volumes", ds.volumes.size()}, {"config", (root / "config.json").string()}}.dump()
                << std::endl;
    }
  } catch (const ValidationError& e) {
    return fail("validation", e.what());
  } catch (const FormatError& e) {
    return fail("format", e.what());
  } catch (const std::exception& e) {
    return fail("error", e.what());
  }
  return 0;
}
