#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nodulenet/augment.hpp"
#include "nodulenet/checkpoint.hpp"
#include "nodulenet/evaluation.hpp"
#include "nodulenet/model.hpp"
#include "nodulenet/shards.hpp"
#include "nodulenet/training.hpp"
#include "nodulenet/volume.hpp"

namespace nodulenet {

struct ExperimentPaths {
  std::filesystem::path volumes_dir;
  std::filesystem::path manifest;
  std::filesystem::path output_dir;
};

struct ExperimentConfig {
  ExperimentPaths paths;
  VoxelSpacing target_spacing = kCanonicalSpacing;
  NormalizationParams normalization;
  int crop_size = kCropSize;
  AugmentConfig augment;
  ModelConfig model = ModelConfig::resnet50(4);
  TrainConfig train;
  Task task = Task::multiclass4;
  Aggregation aggregation = Aggregation::sum;
  bool keep_indeterminate = false;
  int folds = 5;
  std::uint64_t seed = 0;
  double threshold = 0.5;

  /// Mode/field consistency; does not touch the filesystem.
  void validate() const;
  /// Pins the derived fields (head width, training task) to `task`.
  void sync_task();

  std::string to_json() const;
  /// Relative paths resolve against `base_dir`. Missing keys keep defaults.
  static ExperimentConfig from_json(std::string_view text, const std::filesystem::path& base_dir = {});
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

using ProgressSink = std::function<void(const std::string&)>;

// Output layout under paths.output_dir.
std::filesystem::path cached_volume_path(const ExperimentConfig& cfg, const std::string& scan_id);
std::filesystem::path shard_path(const ExperimentConfig& cfg, int fold);
std::filesystem::path fold_dir(const ExperimentConfig& cfg, int fold);

struct ExtractSummary {
  std::size_t total = 0;
  std::size_t retained = 0;
  std::array<std::size_t, kSuspicionLevels> class_histogram{};
  std::size_t resized = 0;
  std::vector<std::size_t> fold_sizes;

  std::string to_json() const;
};

/// Resamples + normalizes every referenced scan (cached under the output
/// dir), extracts canonical patches for retained nodules, assigns folds and
/// writes one shard per fold plus the fold-annotated manifest.
ExtractSummary cmd_extract(const ExperimentConfig& cfg, const ProgressSink& progress = {});

/// Nodules ready for cross-validation: canonical patches plus the volumes
/// they were cut from.
struct Dataset {
  std::vector<std::shared_ptr<const CtVolume>> volumes;
  std::vector<ShardRecord> records;
  std::vector<std::size_t> volume_of;  // record -> index into volumes
};

/// Builds a dataset in memory from normalized canonical-spacing volumes.
/// Records must carry folds.
Dataset make_dataset(std::vector<CtVolume> volumes, std::span<const NoduleRecord> records, int crop_size);

struct FoldOutcome {
  int fold = 0;
  bool skipped = false;
  std::string warning;
  TrainLog log;
  Checkpoint checkpoint;
  std::vector<Prediction> predictions;
};

struct CrossValidationResult {
  std::vector<FoldOutcome> folds;
  std::vector<Prediction> pooled;
  /// multiclass: macro, binary-sum, binary-max; binary: one report.
  std::vector<MetricsReport> reports;
  std::vector<std::string> warnings;
};

/// Trains one model per fold (sequentially), TTA-predicts its validation
/// fold and pools the predictions.
CrossValidationResult run_cross_validation(const Dataset& data, const ExperimentConfig& cfg,
                                           const ProgressSink& progress = {});

/// Reports for pooled predictions of `task`.
std::vector<MetricsReport> build_reports(std::span<const Prediction> pooled, Task task, double threshold);

/// Reads shards + cached volumes, runs cross-validation and writes
/// checkpoints, logs, predictions and reports.
CrossValidationResult cmd_train_eval(const ExperimentConfig& cfg, const ProgressSink& progress = {});

/// JSON record with class probabilities and P(Dangerous) for one box.
std::string cmd_predict(const std::filesystem::path& checkpoint, const std::filesystem::path& volume,
                        const BoundingBox& bbox, Aggregation aggregation);

/// Recomputes and rewrites the reports from the pooled predictions file.
std::vector<MetricsReport> cmd_report(const ExperimentConfig& cfg);

}  // namespace nodulenet
