#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nodulenet/cropping.hpp"
#include "nodulenet/model.hpp"
#include "nodulenet/task.hpp"

namespace nodulenet {

/// Softmax output of a multiclass model, by suspicion level.
struct ClassProbabilities {
  double highly_unlikely = 0.0;
  double moderately_unlikely = 0.0;
  double moderately_suspicious = 0.0;
  double highly_suspicious = 0.0;
  std::optional<double> indeterminate;

  /// `probs` in class-index order of a multiclass task.
  static ClassProbabilities from_vector(std::span<const double> probs, Task t);
  bool valid(double tol = 1e-6) const;
};

struct BinaryProbabilities {
  double dangerous = 0.0;
  double not_dangerous = 1.0;
};

/// Dangerous = max(MS, HS) or MS + HS; NotDangerous = 1 - Dangerous.
BinaryProbabilities aggregate_binary(const ClassProbabilities& p, Aggregation mode);

/// One evaluated nodule. For the binary task `probabilities` holds the
/// single value P(Dangerous); otherwise one entry per class.
struct Prediction {
  std::string nodule_id;
  std::vector<double> probabilities;
  int true_label = 0;
};

inline constexpr int kTtaVariants = 8;

/// The 8 axis-flip combinations of a patch. Variant v flips axis a when bit
/// a of v is set; variant 0 is the patch itself.
std::array<Patch, kTtaVariants> tta_variants(const Patch& p);

/// Softmax (or sigmoid for a single output) of one logit row.
std::vector<double> output_probabilities(std::span<const float> logits);

/// Eval-mode probabilities without augmentation, batched.
std::vector<std::vector<double>> predict_single_view(const ModelParams<float>& params, std::span<const Patch> patches,
                                                     int batch_size = 16);

/// Mean of the per-variant probabilities over all 8 flips.
std::vector<double> tta_predict(const ModelParams<float>& params, const Patch& patch);
std::vector<std::vector<double>> tta_predict(const ModelParams<float>& params, std::span<const Patch> patches,
                                             int batch_size = 16);

/// P(random positive scores above random negative), ties count 1/2.
/// Throws when either class is missing.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct MetricsReport {
  std::string kind;  // "multiclass", "binary", "binary-sum", "binary-max"
  std::vector<std::string> class_names;
  std::size_t count = 0;
  double roc_auc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<double> class_precision;
  std::vector<double> class_recall;
  std::vector<double> class_f1;
  std::vector<std::size_t> support;
  /// rows = truth, columns = prediction
  std::vector<std::vector<std::size_t>> confusion;
  std::vector<std::string> warnings;

  /// Throws ValidationError on inconsistent counts or out-of-range metrics.
  void check_invariants() const;
};

/// Binary: threshold on P(Dangerous), positive-class precision/recall/F1 and
/// plain AUC. Multiclass: argmax, macro averages and one-vs-rest macro AUC.
/// Zero denominators give 0 plus a warning.
MetricsReport classification_metrics(std::span<const Prediction> predictions, Task task, double threshold = 0.5);

/// Multiclass predictions turned into binary ones (Indeterminate truths are
/// dropped).
std::vector<Prediction> to_binary_predictions(std::span<const Prediction> predictions, Task task, Aggregation mode);

/// Concatenates disjoint per-fold predictions. Throws on a nodule seen twice.
std::vector<Prediction> pool_predictions(std::span<const std::vector<Prediction>> per_fold);
MetricsReport pool_folds(std::span<const std::vector<Prediction>> per_fold, Task task, double threshold = 0.5);

std::string report_to_json(const MetricsReport& r);
MetricsReport report_from_json(std::string_view text);
std::string confusion_to_csv(const MetricsReport& r);
std::string predictions_to_jsonl(std::span<const Prediction> predictions);
std::vector<Prediction> predictions_from_jsonl(std::string_view text);

}  // namespace nodulenet
