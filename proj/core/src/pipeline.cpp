#include "nodulenet/pipeline.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <set>

#include "io_util.hpp"
#include "json_convert.hpp"
#include "nodulenet/error.hpp"
#include "nodulenet/parallel.hpp"
#include "nodulenet/splits.hpp"

namespace nodulenet {

namespace fs = std::filesystem;
using nlohmann::json;

void ExperimentConfig::validate() const {
  if (!target_spacing.valid()) throw ValidationError("non-positive target spacing");
  if (!normalization.valid()) throw ValidationError("invalid normalization window");
  if (crop_size < 1) throw ValidationError("crop_size must be >= 1");
  augment.validate();
  model.validate();
  train.validate();
  if (folds < 2) throw ValidationError("folds must be >= 2 (a validation fold is required)");
  if (model.num_outputs != num_outputs(task)) throw ValidationError("model num_outputs does not match the task");
  if (train.task != task) throw ValidationError("train.task does not match the task");
  if (task == Task::multiclass5 && !keep_indeterminate) {
    throw ValidationError("multiclass5 needs keep_indeterminate");
  }
  if (crop_size % model.downsampling() != 0) {
    throw ValidationError("crop_size must be divisible by the model's downsampling factor");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("threshold must be in (0, 1)");
}

void ExperimentConfig::sync_task() {
  model.num_outputs = num_outputs(task);
  train.task = task;
  if (task == Task::multiclass5) keep_indeterminate = true;
}

std::string ExperimentConfig::to_json() const {
  const json j{{"paths",
                {{"volumes_dir", paths.volumes_dir.string()},
                 {"manifest", paths.manifest.string()},
                 {"output_dir", paths.output_dir.string()}}},
               {"target_spacing", nodulenet::to_json(target_spacing)},
               {"normalization", nodulenet::to_json(normalization)},
               {"crop_size", crop_size},
               {"augment", nodulenet::to_json(augment)},
               {"model", nodulenet::to_json(model)},
               {"train", nodulenet::to_json(train)},
               {"task", std::string(to_string(task))},
               {"aggregation", std::string(to_string(aggregation))},
               {"keep_indeterminate", keep_indeterminate},
               {"folds", folds},
               {"seed", seed},
               {"threshold", threshold}};
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(std::string_view text, const fs::path& base_dir) {
  ExperimentConfig c;
  try {
    const json j = json::parse(text);
    auto resolve = [&](const json& p) {
      fs::path path = p.get<std::string>();
      return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      if (p.contains("volumes_dir")) c.paths.volumes_dir = resolve(p.at("volumes_dir"));
      if (p.contains("manifest")) c.paths.manifest = resolve(p.at("manifest"));
      if (p.contains("output_dir")) c.paths.output_dir = resolve(p.at("output_dir"));
    }
    if (j.contains("target_spacing")) c.target_spacing = spacing_from_json(j.at("target_spacing"));
    if (j.contains("normalization")) c.normalization = normalization_from_json(j.at("normalization"));
    c.crop_size = j.value("crop_size", c.crop_size);
    if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
    if (j.contains("task")) c.task = parse_task(j.at("task").get<std::string>());
    if (j.contains("model")) {
      json m = j.at("model");
      if (!m.contains("num_outputs")) m["num_outputs"] = num_outputs(c.task);
      c.model = model_config_from_json(m);
    } else {
      c.model.num_outputs = num_outputs(c.task);
    }
    if (j.contains("train")) {
      json t = j.at("train");
      if (!t.contains("task")) t["task"] = std::string(to_string(c.task));
      c.train = train_config_from_json(t);
    } else {
      c.train.task = c.task;
    }
    if (j.contains("aggregation")) c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    c.keep_indeterminate = j.value("keep_indeterminate", c.task == Task::multiclass5);
    c.folds = j.value("folds", c.folds);
    c.seed = j.value("seed", c.seed);
    c.threshold = j.value("threshold", c.threshold);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  return ExperimentConfig::from_json(read_text_file(path), path.parent_path());
}

fs::path cached_volume_path(const ExperimentConfig& cfg, const std::string& scan_id) {
  return cfg.paths.output_dir / "volumes" / (scan_id + ".raw");
}

fs::path shard_path(const ExperimentConfig& cfg, int fold) {
  return cfg.paths.output_dir / "shards" / ("fold-" + std::to_string(fold) + ".shard");
}

fs::path fold_dir(const ExperimentConfig& cfg, int fold) {
  return cfg.paths.output_dir / "folds" / ("fold-" + std::to_string(fold));
}

namespace {

void say(const ProgressSink& progress, const std::string& msg) {
  if (progress) progress(msg);
}

fs::path manifest_out(const ExperimentConfig& cfg) { return cfg.paths.output_dir / "manifest.json"; }
fs::path pooled_predictions_path(const ExperimentConfig& cfg) { return cfg.paths.output_dir / "predictions.jsonl"; }

CtVolume preprocess(const CtVolume& raw, const ExperimentConfig& cfg) {
  if (raw.normalized) return resample_volume(raw, cfg.target_spacing, cfg.normalization);
  return normalize_intensity(resample_volume(raw, cfg.target_spacing, cfg.normalization), cfg.normalization);
}

}  // namespace

std::string ExtractSummary::to_json() const {
  json hist = json::object();
  for (int c = 0; c < kSuspicionLevels; ++c) {
    hist[std::string(nodulenet::to_string(suspicion_from_code(c)))] = class_histogram[static_cast<std::size_t>(c)];
  }
  const json j{{"total", total},
               {"retained", retained},
               {"class_histogram", hist},
               {"resized", resized},
               {"resize_needed_rate", retained ? static_cast<double>(resized) / static_cast<double>(retained) : 0.0},
               {"fold_sizes", fold_sizes}};
  return j.dump(2);
}

ExtractSummary cmd_extract(const ExperimentConfig& cfg, const ProgressSink& progress) {
  cfg.validate();
  const auto all = load_manifest(cfg.paths.manifest);
  const auto labeled = filter_targets(all, cfg.keep_indeterminate);
  if (labeled.empty()) throw ValidationError("no nodules left after label filtering");

  std::vector<NoduleRecord> records;
  records.reserve(labeled.size());
  for (const auto& l : labeled) records.push_back(l.record);
  const FoldAssignment folds = grouped_kfold(records, cfg.folds, cfg.seed);
  apply_folds(records, folds);

  std::map<std::string, std::vector<std::size_t>> by_scan;
  for (std::size_t i = 0; i < records.size(); ++i) by_scan[records[i].scan_id].push_back(i);
  std::vector<std::string> scans;
  for (const auto& [scan, idx] : by_scan) {
    if (!fs::exists(cfg.paths.volumes_dir / (scan + ".raw"))) throw ValidationError("unknown scan reference: " + scan);
    scans.push_back(scan);
  }

  fs::create_directories(cfg.paths.output_dir / "volumes");
  fs::create_directories(cfg.paths.output_dir / "shards");
  std::vector<ShardRecord> shard_records(records.size());
  std::mutex progress_mutex;
  std::size_t done = 0;
  parallel_for(scans.size(), [&](std::size_t s) {
    const std::string& scan = scans[s];
    CtVolume raw;
    try {
      raw = load_volume(cfg.paths.volumes_dir / (scan + ".raw"));
    } catch (const Error& e) {
      throw FormatError("unreadable volume " + scan + ": " + e.what());
    }
    CtVolume v = preprocess(raw, cfg);
    v.scan_id = scan;
    const fs::path cached = cached_volume_path(cfg, scan);
    save_volume(v, cached);
    for (std::size_t i : by_scan.at(scan)) {
      ShardRecord& r = shard_records[i];
      r.patch = extract_patch(v, records[i].bbox, cfg.crop_size, &r.resized);
      r.patch.scan_id = scan;
      r.patch.nodule_id = records[i].nodule_id;
      r.patient_id = records[i].patient_id;
      r.scan_id = scan;
      r.nodule_id = records[i].nodule_id;
      r.label = labeled[i].label;
      r.fold = *records[i].fold;
      r.bbox = records[i].bbox;
      r.volume = fs::relative(cached, cfg.paths.output_dir / "shards").generic_string();
    }
    std::lock_guard lock(progress_mutex);
    ++done;
    if (progress && (done % 50 == 0 || done == scans.size())) {
      progress("extracted " + std::to_string(done) + "/" + std::to_string(scans.size()) + " scans");
    }
  });

  ExtractSummary summary;
  summary.total = all.size();
  summary.retained = records.size();
  summary.fold_sizes.assign(static_cast<std::size_t>(cfg.folds), 0);
  std::vector<std::vector<ShardRecord>> per_fold(static_cast<std::size_t>(cfg.folds));
  for (auto& r : shard_records) {
    summary.class_histogram[static_cast<std::size_t>(code_of(r.label))] += 1;
    summary.resized += r.resized ? 1 : 0;
    summary.fold_sizes[static_cast<std::size_t>(r.fold)] += 1;
    per_fold[static_cast<std::size_t>(r.fold)].push_back(std::move(r));
  }
  for (int f = 0; f < cfg.folds; ++f) write_shard(per_fold[static_cast<std::size_t>(f)], shard_path(cfg, f));
  save_manifest(records, manifest_out(cfg));
  write_file_atomic(cfg.paths.output_dir / "extract_summary.json", summary.to_json());
  say(progress, "wrote " + std::to_string(cfg.folds) + " shards");
  return summary;
}

Dataset make_dataset(std::vector<CtVolume> volumes, std::span<const NoduleRecord> records, int crop_size) {
  Dataset d;
  std::map<std::string, std::size_t> index;
  for (auto& v : volumes) {
    if (!v.normalized) throw ValidationError("dataset volumes must be normalized: " + v.scan_id);
    index[v.scan_id] = d.volumes.size();
    d.volumes.push_back(std::make_shared<const CtVolume>(std::move(v)));
  }
  d.records.resize(records.size());
  d.volume_of.resize(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto it = index.find(records[i].scan_id);
    if (it == index.end()) throw ValidationError("unknown scan reference: " + records[i].scan_id);
    if (!records[i].fold) throw ValidationError("record without a fold: " + records[i].nodule_id);
    d.volume_of[i] = it->second;
  }
  parallel_for(records.size(), [&](std::size_t i) {
    const NoduleRecord& rec = records[i];
    ShardRecord& r = d.records[i];
    r.patch = extract_patch(*d.volumes[d.volume_of[i]], rec.bbox, crop_size, &r.resized);
    r.patch.scan_id = rec.scan_id;
    r.patch.nodule_id = rec.nodule_id;
    r.patient_id = rec.patient_id;
    r.scan_id = rec.scan_id;
    r.nodule_id = rec.nodule_id;
    r.label = aggregate_annotations(rec.annotator_labels);
    r.fold = *rec.fold;
    r.bbox = rec.bbox;
  });
  return d;
}

std::vector<MetricsReport> build_reports(std::span<const Prediction> pooled, Task task, double threshold) {
  std::vector<MetricsReport> reports;
  reports.push_back(classification_metrics(pooled, task, threshold));
  if (task != Task::binary) {
    for (Aggregation mode : {Aggregation::sum, Aggregation::max}) {
      const auto binary = to_binary_predictions(pooled, task, mode);
      if (binary.empty()) continue;
      MetricsReport r = classification_metrics(binary, Task::binary, threshold);
      r.kind = "binary-" + std::string(to_string(mode));
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

CrossValidationResult run_cross_validation(const Dataset& data, const ExperimentConfig& cfg,
                                           const ProgressSink& progress) {
  cfg.validate();
  // Records the task cannot use are left out here, not at extraction.
  std::vector<std::size_t> usable;
  std::vector<int> target(data.records.size(), -1);
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const auto& r = data.records[i];
    if (r.label == SuspicionLevel::Indeterminate && cfg.task != Task::multiclass5) continue;
    if (r.fold < 0 || r.fold >= cfg.folds) throw ValidationError("record fold outside [0, folds): " + r.nodule_id);
    target[i] = class_index(r.label, cfg.task);
    usable.push_back(i);
  }

  CrossValidationResult result;
  std::vector<std::vector<Prediction>> per_fold;
  for (int f = 0; f < cfg.folds; ++f) {
    FoldOutcome outcome;
    outcome.fold = f;
    std::vector<TrainSample> train_set;
    std::vector<TrainSample> val_set;
    std::vector<Patch> val_patches;
    for (std::size_t i : usable) {
      const auto& r = data.records[i];
      TrainSample s{data.volumes[data.volume_of[i]].get(), r.bbox, target[i], r.nodule_id};
      if (r.fold == f) {
        val_set.push_back(s);
        val_patches.push_back(r.patch);
      } else {
        train_set.push_back(s);
      }
    }
    std::set<int> train_classes;
    for (const auto& s : train_set) train_classes.insert(s.target);
    if (val_set.empty() || train_set.empty() || train_classes.size() < 2) {
      outcome.skipped = true;
      outcome.warning = "fold " + std::to_string(f) + " skipped: empty split or single-class training set";
      result.warnings.push_back(outcome.warning);
      say(progress, outcome.warning);
      result.folds.push_back(std::move(outcome));
      continue;
    }

    TrainConfig tc = cfg.train;
    tc.seed = RngStream(cfg.seed).fork(1000 + static_cast<std::uint64_t>(f)).next_u64();
    say(progress, "fold " + std::to_string(f) + ": training on " + std::to_string(train_set.size()) +
                      ", validating on " + std::to_string(val_set.size()));
    TrainResult trained =
        train_fold(train_set, val_set, cfg.model, tc, cfg.augment, cfg.crop_size, [&](const EpochLog& e) {
          say(progress, "fold " + std::to_string(f) + " epoch " + std::to_string(e.epoch) +
                            " loss " + std::to_string(e.train_loss) + " val_f1 " + std::to_string(e.val_f1) +
                            (e.best ? " *" : ""));
        });

    const auto probs = tta_predict(trained.best, val_patches, std::min(cfg.train.batch_size, 16));
    for (std::size_t i = 0; i < val_set.size(); ++i) {
      outcome.predictions.push_back({val_set[i].nodule_id, probs[i], val_set[i].target});
    }
    outcome.log = std::move(trained.log);
    outcome.checkpoint.params = std::move(trained.best);
    outcome.checkpoint.task = cfg.task;
    outcome.checkpoint.epoch = outcome.log.best_epoch;
    outcome.checkpoint.metric = outcome.log.best_f1;
    outcome.checkpoint.fold = f;
    outcome.checkpoint.spacing = cfg.target_spacing;
    outcome.checkpoint.normalization = cfg.normalization;
    outcome.checkpoint.crop_size = cfg.crop_size;
    per_fold.push_back(outcome.predictions);
    result.folds.push_back(std::move(outcome));
  }
  result.pooled = pool_predictions(per_fold);
  if (result.pooled.empty()) throw ValidationError("every fold was skipped; nothing to evaluate");
  result.reports = build_reports(result.pooled, cfg.task, cfg.threshold);
  return result;
}

namespace {

void write_reports(const ExperimentConfig& cfg, std::span<const MetricsReport> reports) {
  for (const auto& r : reports) {
    r.check_invariants();
    write_file_atomic(cfg.paths.output_dir / ("report_" + r.kind + ".json"), report_to_json(r));
    write_file_atomic(cfg.paths.output_dir / ("confusion_" + r.kind + ".csv"), confusion_to_csv(r));
  }
}

}  // namespace

CrossValidationResult cmd_train_eval(const ExperimentConfig& cfg, const ProgressSink& progress) {
  cfg.validate();
  Dataset data;
  std::map<std::string, std::size_t> loaded;
  for (int f = 0; f < cfg.folds; ++f) {
    const fs::path path = shard_path(cfg, f);
    if (!fs::exists(path)) throw ValidationError("missing shard: " + path.string() + " (run extract first)");
    for (auto& r : read_shard(path)) {
      auto it = loaded.find(r.volume);
      if (it == loaded.end()) {
        auto v = std::make_shared<const CtVolume>(load_volume(path.parent_path() / r.volume));
        it = loaded.emplace(r.volume, data.volumes.size()).first;
        data.volumes.push_back(std::move(v));
      }
      data.volume_of.push_back(it->second);
      data.records.push_back(std::move(r));
    }
  }
  say(progress, "loaded " + std::to_string(data.records.size()) + " nodules from " +
                    std::to_string(data.volumes.size()) + " cached volumes");

  CrossValidationResult result = run_cross_validation(data, cfg, progress);
  for (const auto& fold : result.folds) {
    if (fold.skipped) continue;
    const fs::path dir = fold_dir(cfg, fold.fold);
    fs::create_directories(dir);
    save_checkpoint(fold.checkpoint, dir / "checkpoint.bin");
    write_file_atomic(dir / "train_log.jsonl", fold.log.to_jsonl());
    write_file_atomic(dir / "predictions.jsonl", predictions_to_jsonl(fold.predictions));
  }
  write_file_atomic(pooled_predictions_path(cfg), predictions_to_jsonl(result.pooled));
  write_reports(cfg, result.reports);
  write_file_atomic(cfg.paths.output_dir / "experiment.json", cfg.to_json());
  return result;
}

std::string cmd_predict(const fs::path& checkpoint_path, const fs::path& volume_path, const BoundingBox& bbox,
                        Aggregation aggregation) {
  if (!bbox.valid()) throw ValidationError("degenerate bbox (max <= min on some axis)");
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const CtVolume raw = load_volume(volume_path);
  CtVolume v = raw.normalized ? resample_volume(raw, ckpt.spacing, ckpt.normalization)
                              : normalize_intensity(resample_volume(raw, ckpt.spacing, ckpt.normalization),
                                                    ckpt.normalization);
  if (bbox.x_max <= 0 || bbox.y_max <= 0 || bbox.z_max <= 0 || bbox.x_min >= v.dims.nx || bbox.y_min >= v.dims.ny ||
      bbox.z_min >= v.dims.nz) {
    throw ValidationError("bbox lies outside the volume");
  }
  Patch patch = extract_patch(v, bbox, ckpt.crop_size);
  const auto probs = tta_predict(ckpt.params, patch);

  json out{{"scan_id", raw.scan_id}, {"bbox", to_json(bbox)}, {"task", std::string(to_string(ckpt.task))}};
  if (ckpt.task == Task::binary) {
    out["p_dangerous"] = probs[0];
  } else {
    const auto names = class_names(ckpt.task);
    json p = json::object();
    for (std::size_t c = 0; c < names.size(); ++c) p[names[c]] = probs[c];
    out["probabilities"] = p;
    const auto agg = aggregate_binary(ClassProbabilities::from_vector(probs, ckpt.task), aggregation);
    out["aggregation"] = std::string(to_string(aggregation));
    out["p_dangerous"] = agg.dangerous;
    out["p_not_dangerous"] = agg.not_dangerous;
  }
  return out.dump();
}

std::vector<MetricsReport> cmd_report(const ExperimentConfig& cfg) {
  const fs::path path = pooled_predictions_path(cfg);
  if (!fs::exists(path)) throw ValidationError("missing predictions: " + path.string() + " (run train first)");
  const auto pooled = predictions_from_jsonl(read_text_file(path));
  if (pooled.empty()) throw ValidationError("no predictions in " + path.string());
  auto reports = build_reports(pooled, cfg.task, cfg.threshold);
  write_reports(cfg, reports);
  return reports;
}

}  // namespace nodulenet
