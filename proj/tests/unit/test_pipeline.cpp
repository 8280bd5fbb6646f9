#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "nodulenet/error.hpp"
#include "nodulenet/pipeline.hpp"
#include "nodulenet/splits.hpp"
#include "nodulenet/synthetic.hpp"
#include "test_util.hpp"

namespace nodulenet {
namespace {

using testing::TempDir;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.count = 24;
  spec.patients = 12;
  spec.dims = {24, 24, 24};
  spec.radius_min = 3;
  spec.radius_max = 4;
  spec.seed = 5;
  return spec;
}

ExperimentConfig small_config(const TempDir& dir, Task task) {
  ExperimentConfig cfg;
  cfg.paths = {dir.path() / "in" / "volumes", dir.path() / "in" / "manifest.json", dir.path() / "out"};
  cfg.crop_size = 16;
  cfg.model = ModelConfig::tiny();
  cfg.task = task;
  cfg.sync_task();
  cfg.train.max_epochs = 2;
  cfg.train.batch_size = 8;
  cfg.folds = 2;
  cfg.seed = 3;
  return cfg;
}

TEST(Pipeline, ConfigJsonRoundTrip) {
  TempDir dir;
  auto cfg = small_config(dir, Task::multiclass4);
  cfg.augment.jitter_enabled = false;
  cfg.augment.zoom_hi = 1.2;
  cfg.aggregation = Aggregation::max;
  const auto back = ExperimentConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(back.model, cfg.model);
  EXPECT_FALSE(back.augment.jitter_enabled);
  EXPECT_EQ(back.aggregation, Aggregation::max);
}

TEST(Pipeline, ConfigDefaultsAndRelativePaths) {
  const auto cfg = ExperimentConfig::from_json(R"({"paths":{"volumes_dir":"v","output_dir":"o"},"task":"binary"})",
                                               "/data/exp");
  EXPECT_EQ(cfg.paths.volumes_dir, std::filesystem::path("/data/exp/v"));
  EXPECT_EQ(cfg.model.num_outputs, 1);
  EXPECT_EQ(cfg.train.task, Task::binary);
  EXPECT_EQ(cfg.folds, 5);
  EXPECT_EQ(cfg.train.max_epochs, 75);
  EXPECT_EQ(cfg.train.batch_size, 64);
  EXPECT_EQ(cfg.augment.jitter.alpha_max, 0.75);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Pipeline, ConfigValidation) {
  TempDir dir;
  auto cfg = small_config(dir, Task::binary);
  cfg.folds = 1;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = small_config(dir, Task::multiclass5);
  cfg.keep_indeterminate = false;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = small_config(dir, Task::binary);
  cfg.model.num_outputs = 4;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = small_config(dir, Task::binary);
  cfg.crop_size = 12;
  EXPECT_THROW(cfg.validate(), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json("{"), Error);
  EXPECT_THROW(ExperimentConfig::from_json(R"({"task":"ternary"})"), Error);
}

TEST(Pipeline, ExtractWritesShardsAndSummary) {
  TempDir dir;
  const auto ds = make_synthetic_dataset(small_spec());
  save_synthetic_dataset(ds, dir.path() / "in" / "volumes", dir.path() / "in" / "manifest.json");
  const auto cfg = small_config(dir, Task::binary);
  const auto summary = cmd_extract(cfg);
  EXPECT_EQ(summary.total, 24u);
  EXPECT_EQ(summary.retained, 24u);
  EXPECT_EQ(summary.resized, 0u);
  EXPECT_EQ(summary.class_histogram[2], 0u);
  ASSERT_EQ(summary.fold_sizes.size(), 2u);
  EXPECT_EQ(summary.fold_sizes[0] + summary.fold_sizes[1], 24u);

  std::set<std::string> seen;
  std::map<std::string, int> fold_of_patient;
  for (int f = 0; f < 2; ++f) {
    const auto recs = read_shard(shard_path(cfg, f));
    EXPECT_EQ(recs.size(), summary.fold_sizes[static_cast<std::size_t>(f)]);
    for (const auto& r : recs) {
      EXPECT_EQ(r.fold, f);
      EXPECT_EQ(r.patch.edge, 16);
      EXPECT_TRUE(seen.insert(r.nodule_id).second);
      const auto [it, fresh] = fold_of_patient.emplace(r.patient_id, f);
      EXPECT_EQ(it->second, f) << "patient split across folds";
      EXPECT_TRUE(std::filesystem::exists(shard_path(cfg, f).parent_path() / r.volume));
    }
  }
  EXPECT_EQ(seen.size(), 24u);
  const auto js = nlohmann::json::parse(slurp(cfg.paths.output_dir / "extract_summary.json"));
  EXPECT_EQ(js.at("retained").get<int>(), 24);
  const CtVolume cached = load_volume(cached_volume_path(cfg, ds.records[0].scan_id));
  EXPECT_TRUE(cached.normalized);
}

TEST(Pipeline, ExtractMissingScan) {
  TempDir dir;
  auto ds = make_synthetic_dataset(small_spec());
  save_synthetic_dataset(ds, dir.path() / "in" / "volumes", dir.path() / "in" / "manifest.json");
  std::filesystem::remove(dir.path() / "in" / "volumes" / (ds.records[3].scan_id + ".raw"));
  try {
    cmd_extract(small_config(dir, Task::binary));
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown scan reference: " + ds.records[3].scan_id), std::string::npos);
  }
}

TEST(Pipeline, TrainPredictReportBinary) {
  TempDir dir;
  const auto ds = make_synthetic_dataset(small_spec());
  save_synthetic_dataset(ds, dir.path() / "in" / "volumes", dir.path() / "in" / "manifest.json");
  const auto cfg = small_config(dir, Task::binary);
  EXPECT_THROW(cmd_train_eval(cfg), ValidationError);  // no shards yet
  cmd_extract(cfg);
  const auto result = cmd_train_eval(cfg);
  EXPECT_EQ(result.pooled.size(), 24u);
  ASSERT_EQ(result.reports.size(), 1u);
  EXPECT_EQ(result.reports[0].kind, "binary");
  for (int f = 0; f < 2; ++f) {
    const auto d = fold_dir(cfg, f);
    EXPECT_TRUE(std::filesystem::exists(d / "checkpoint.bin"));
    EXPECT_TRUE(std::filesystem::exists(d / "predictions.jsonl"));
    EXPECT_FALSE(slurp(d / "train_log.jsonl").empty());
  }
  EXPECT_TRUE(std::filesystem::exists(cfg.paths.output_dir / "report_binary.json"));
  EXPECT_TRUE(std::filesystem::exists(cfg.paths.output_dir / "confusion_binary.csv"));

  const auto reports = cmd_report(cfg);
  ASSERT_EQ(reports.size(), 1u);
  EXPECT_EQ(report_to_json(reports[0]), report_to_json(result.reports[0]));

  const auto out = nlohmann::json::parse(cmd_predict(fold_dir(cfg, 0) / "checkpoint.bin",
                                                     cfg.paths.volumes_dir / (ds.records[0].scan_id + ".raw"),
                                                     ds.records[0].bbox, Aggregation::sum));
  const double p = out.at("p_dangerous").get<double>();
  EXPECT_GE(p, 0.0);
  EXPECT_LE(p, 1.0);
  EXPECT_FALSE(out.contains("probabilities"));
  EXPECT_THROW(cmd_predict(fold_dir(cfg, 0) / "checkpoint.bin", cfg.paths.volumes_dir / "nope.raw", ds.records[0].bbox,
                           Aggregation::sum),
               Error);
  const auto scan = cfg.paths.volumes_dir / (ds.records[0].scan_id + ".raw");
  EXPECT_THROW(cmd_predict(fold_dir(cfg, 0) / "checkpoint.bin", scan, {30, 0, 0, 40, 5, 5}, Aggregation::sum),
               ValidationError);
  EXPECT_THROW(cmd_predict(fold_dir(cfg, 0) / "checkpoint.bin", scan, {5, 5, 5, 5, 9, 9}, Aggregation::sum),
               ValidationError);
}

TEST(Pipeline, MulticlassProducesThreeReports) {
  TempDir dir;
  auto spec = small_spec();
  auto ds = make_synthetic_dataset(spec);
  save_synthetic_dataset(ds, dir.path() / "in" / "volumes", dir.path() / "in" / "manifest.json");
  const auto cfg = small_config(dir, Task::multiclass4);
  cmd_extract(cfg);
  const auto result = cmd_train_eval(cfg);
  ASSERT_EQ(result.reports.size(), 3u);
  EXPECT_EQ(result.reports[0].kind, "multiclass");
  EXPECT_EQ(result.reports[1].kind, "binary-sum");
  EXPECT_EQ(result.reports[2].kind, "binary-max");
  for (const auto& p : result.pooled) EXPECT_EQ(p.probabilities.size(), 4u);
  const auto out = nlohmann::json::parse(cmd_predict(fold_dir(cfg, 1) / "checkpoint.bin",
                                                     cfg.paths.volumes_dir / (ds.records[1].scan_id + ".raw"),
                                                     ds.records[1].bbox, Aggregation::max));
  EXPECT_EQ(out.at("probabilities").size(), 4u);
  EXPECT_NEAR(out.at("p_dangerous").get<double>() + out.at("p_not_dangerous").get<double>(), 1.0, 1e-12);
}

TEST(Pipeline, CrossValidationInMemoryCoversEveryNodule) {
  auto spec = small_spec();
  auto ds = make_synthetic_dataset(spec);
  TempDir dir;
  auto cfg = small_config(dir, Task::binary);
  cfg.folds = 3;
  const auto folds = grouped_kfold(ds.records, cfg.folds, cfg.seed);
  apply_folds(ds.records, folds);
  std::vector<CtVolume> volumes;
  for (const auto& v : ds.volumes) volumes.push_back(normalize_intensity(v));
  const Dataset data = make_dataset(std::move(volumes), ds.records, cfg.crop_size);
  const auto result = run_cross_validation(data, cfg);
  std::set<std::string> ids;
  for (const auto& p : result.pooled) ids.insert(p.nodule_id);
  EXPECT_EQ(ids.size(), 24u);
  const auto again = run_cross_validation(data, cfg);
  EXPECT_EQ(predictions_to_jsonl(again.pooled), predictions_to_jsonl(result.pooled));
}

TEST(Pipeline, SingleClassFoldIsSkippedWithWarning) {
  auto spec = small_spec();
  spec.positive_fraction = 1.0;
  auto ds = make_synthetic_dataset(spec);
  // A lone negative: the fold validating it trains on positives only.
  ds.records[0].annotator_labels = {SuspicionLevel::HighlyUnlikely};
  TempDir dir;
  auto cfg = small_config(dir, Task::binary);
  const auto folds = grouped_kfold(ds.records, cfg.folds, cfg.seed);
  apply_folds(ds.records, folds);
  const int lone_fold = *ds.records[0].fold;
  std::vector<CtVolume> volumes;
  for (const auto& v : ds.volumes) volumes.push_back(normalize_intensity(v));
  const Dataset data = make_dataset(std::move(volumes), ds.records, cfg.crop_size);
  const auto result = run_cross_validation(data, cfg);
  ASSERT_EQ(result.folds.size(), 2u);
  EXPECT_TRUE(result.folds[static_cast<std::size_t>(lone_fold)].skipped);
  EXPECT_FALSE(result.folds[static_cast<std::size_t>(1 - lone_fold)].skipped);
  ASSERT_FALSE(result.warnings.empty());
  EXPECT_NE(result.warnings[0].find("skipped"), std::string::npos);
  for (const auto& p : result.pooled) EXPECT_EQ(p.true_label, 1);
}

TEST(Pipeline, AllFoldsSkippedIsAnError) {
  auto spec = small_spec();
  spec.positive_fraction = 1.0;
  auto ds = make_synthetic_dataset(spec);
  TempDir dir;
  auto cfg = small_config(dir, Task::binary);
  apply_folds(ds.records, grouped_kfold(ds.records, cfg.folds, cfg.seed));
  std::vector<CtVolume> volumes;
  for (const auto& v : ds.volumes) volumes.push_back(normalize_intensity(v));
  const Dataset data = make_dataset(std::move(volumes), ds.records, cfg.crop_size);
  EXPECT_THROW(run_cross_validation(data, cfg), ValidationError);
}

}  // namespace
}  // namespace nodulenet
