#include "nodulenet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "nodulenet/augment.hpp"
#include "nodulenet/error.hpp"

namespace nodulenet {

using nlohmann::json;

ClassProbabilities ClassProbabilities::from_vector(std::span<const double> probs, Task t) {
  ClassProbabilities p;
  switch (t) {
    case Task::multiclass4:
      if (probs.size() != 4) throw ValidationError("multiclass4 expects 4 probabilities");
      p.highly_unlikely = probs[0];
      p.moderately_unlikely = probs[1];
      p.moderately_suspicious = probs[2];
      p.highly_suspicious = probs[3];
      break;
    case Task::multiclass5:
      if (probs.size() != 5) throw ValidationError("multiclass5 expects 5 probabilities");
      p.highly_unlikely = probs[0];
      p.moderately_unlikely = probs[1];
      p.indeterminate = probs[2];
      p.moderately_suspicious = probs[3];
      p.highly_suspicious = probs[4];
      break;
    case Task::binary:
      throw ValidationError("binary outputs carry no class probabilities");
  }
  return p;
}

bool ClassProbabilities::valid(double tol) const {
  const double parts[] = {highly_unlikely, moderately_unlikely, moderately_suspicious, highly_suspicious,
                          indeterminate.value_or(0.0)};
  double sum = 0.0;
  for (double v : parts) {
    if (!(v >= 0.0 && v <= 1.0)) return false;
    sum += v;
  }
  return std::abs(sum - 1.0) <= tol;
}

BinaryProbabilities aggregate_binary(const ClassProbabilities& p, Aggregation mode) {
  BinaryProbabilities out;
  out.dangerous = mode == Aggregation::max ? std::max(p.moderately_suspicious, p.highly_suspicious)
                                           : p.moderately_suspicious + p.highly_suspicious;
  out.not_dangerous = 1.0 - out.dangerous;
  return out;
}

std::array<Patch, kTtaVariants> tta_variants(const Patch& p) {
  std::array<Patch, kTtaVariants> out;
  for (int v = 0; v < kTtaVariants; ++v) {
    out[v] = p;
    for (int axis = 0; axis < 3; ++axis) {
      if (v & (1 << axis)) flip_patch(out[v], axis);
    }
  }
  return out;
}

std::vector<double> output_probabilities(std::span<const float> logits) {
  if (logits.empty()) throw ValidationError("empty logit row");
  if (logits.size() == 1) return {1.0 / (1.0 + std::exp(-static_cast<double>(logits[0])))};
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - peak);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

namespace {

// Runs eval-mode forward over `count` inputs produced by fill(i, dst) in
// batches, returning per-input probabilities.
template <typename Fill>
std::vector<std::vector<double>> batched_probabilities(const ModelParams<float>& params, std::size_t count, int edge,
                                                       int batch_size, Fill fill) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  const std::size_t per_sample = 2 * Patch::voxels_per_channel(edge);
  const std::size_t e = static_cast<std::size_t>(edge);
  std::vector<std::vector<double>> out;
  out.reserve(count);
  for (std::size_t start = 0; start < count; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min<std::size_t>(batch_size, count - start);
    Tensor<float> x({n, 2, e, e, e});
    for (std::size_t i = 0; i < n; ++i) fill(start + i, x.data.data() + i * per_sample);
    const Tensor<float> logits = forward(params, x, Mode::eval);
    for (std::size_t i = 0; i < n; ++i) out.push_back(output_probabilities(logits.sample(i)));
  }
  return out;
}

int common_edge(std::span<const Patch> patches) {
  if (patches.empty()) return 0;
  const int edge = patches.front().edge;
  for (const auto& p : patches) {
    if (p.edge != edge) throw ValidationError("patches in one batch must share an edge length");
  }
  return edge;
}

}  // namespace

std::vector<std::vector<double>> predict_single_view(const ModelParams<float>& params, std::span<const Patch> patches,
                                                     int batch_size) {
  const int edge = common_edge(patches);
  return batched_probabilities(params, patches.size(), edge, batch_size, [&](std::size_t i, float* dst) {
    std::copy(patches[i].data.begin(), patches[i].data.end(), dst);
  });
}

std::vector<std::vector<double>> tta_predict(const ModelParams<float>& params, std::span<const Patch> patches,
                                             int batch_size) {
  const int edge = common_edge(patches);
  // Variants are materialized one patch at a time to bound memory.
  std::size_t cached_for = patches.size();
  std::array<Patch, kTtaVariants> variants;
  auto views = batched_probabilities(params, patches.size() * kTtaVariants, edge, batch_size,
                                     [&](std::size_t i, float* dst) {
                                       const std::size_t which = i / kTtaVariants;
                                       if (which != cached_for) {
                                         variants = tta_variants(patches[which]);
                                         cached_for = which;
                                       }
                                       const auto& v = variants[i % kTtaVariants].data;
                                       std::copy(v.begin(), v.end(), dst);
                                     });
  std::vector<std::vector<double>> out(patches.size());
  for (std::size_t p = 0; p < patches.size(); ++p) {
    std::vector<double> mean(views[p * kTtaVariants].size(), 0.0);
    for (int v = 0; v < kTtaVariants; ++v) {
      const auto& row = views[p * kTtaVariants + v];
      for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += row[c];
    }
    for (double& m : mean) m /= kTtaVariants;
    out[p] = std::move(mean);
  }
  return out;
}

std::vector<double> tta_predict(const ModelParams<float>& params, const Patch& patch) {
  return tta_predict(params, std::span<const Patch>(&patch, 1), kTtaVariants).front();
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
  std::size_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ValidationError("labels must be 0 or 1");
    n_pos += static_cast<std::size_t>(l);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("roc_auc needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Mann-Whitney U with mid-ranks for ties. Ranks are doubled so every
  // intermediate stays an exact integer.
  std::uint64_t doubled_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t doubled_mid = i + 1 + j;  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) doubled_rank_sum += doubled_mid;
    }
    i = j;
  }
  const std::uint64_t doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(doubled_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

void MetricsReport::check_invariants() const {
  const std::size_t k = class_names.size();
  if (confusion.size() != k) throw ValidationError("confusion matrix size does not match class count");
  std::size_t total = 0;
  for (std::size_t r = 0; r < k; ++r) {
    if (confusion[r].size() != k) throw ValidationError("confusion matrix is not square");
    const std::size_t row = std::accumulate(confusion[r].begin(), confusion[r].end(), std::size_t{0});
    if (r < support.size() && row != support[r]) throw ValidationError("confusion row does not match support");
    total += row;
  }
  if (total != count) throw ValidationError("confusion total does not match prediction count");
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  for (double v : {roc_auc, precision, recall, f1}) {
    if (!in_unit(v)) throw ValidationError("metric outside [0, 1]");
  }
  for (const auto* vec : {&class_precision, &class_recall, &class_f1}) {
    for (double v : *vec) {
      if (!in_unit(v)) throw ValidationError("per-class metric outside [0, 1]");
    }
  }
}

namespace {

double safe_ratio(double num, double den, const std::string& what, std::vector<std::string>& warnings) {
  if (den == 0.0) {
    warnings.push_back(what + " undefined (zero denominator), reported as 0");
    return 0.0;
  }
  return num / den;
}

int argmax(const std::vector<double>& p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace

MetricsReport classification_metrics(std::span<const Prediction> predictions, Task task, double threshold) {
  if (predictions.empty()) throw ValidationError("no predictions to evaluate");
  MetricsReport r;
  r.kind = task == Task::binary ? "binary" : "multiclass";
  r.class_names = class_names(task);
  const std::size_t k = r.class_names.size();
  const std::size_t outputs = static_cast<std::size_t>(num_outputs(task));
  r.count = predictions.size();
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  r.support.assign(k, 0);

  for (const auto& p : predictions) {
    if (p.probabilities.size() != outputs) throw ValidationError("prediction width does not match task: " + p.nodule_id);
    if (p.true_label < 0 || static_cast<std::size_t>(p.true_label) >= k) {
      throw ValidationError("true label out of range: " + p.nodule_id);
    }
    const int decided = task == Task::binary ? (p.probabilities[0] >= threshold ? 1 : 0) : argmax(p.probabilities);
    r.confusion[p.true_label][decided] += 1;
    r.support[p.true_label] += 1;
  }

  r.class_precision.assign(k, 0.0);
  r.class_recall.assign(k, 0.0);
  r.class_f1.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(r.confusion[c][c]);
    double predicted = 0.0;
    for (std::size_t t = 0; t < k; ++t) predicted += static_cast<double>(r.confusion[t][c]);
    const double actual = static_cast<double>(r.support[c]);
    const std::string& name = r.class_names[c];
    if (predicted == 0.0 && actual == 0.0) {
      r.warnings.push_back("class " + name + " absent from truth and predictions, scored 0");
      continue;
    }
    r.class_precision[c] = safe_ratio(tp, predicted, "precision of " + name, r.warnings);
    r.class_recall[c] = safe_ratio(tp, actual, "recall of " + name, r.warnings);
    const double f1_den = 2.0 * tp + (predicted - tp) + (actual - tp);
    r.class_f1[c] = f1_den == 0.0 ? 0.0 : 2.0 * tp / f1_den;
  }

  if (task == Task::binary) {
    r.precision = r.class_precision[1];
    r.recall = r.class_recall[1];
    r.f1 = r.class_f1[1];
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& p : predictions) {
      scores.push_back(p.probabilities[0]);
      labels.push_back(p.true_label);
    }
    if (r.support[0] == 0 || r.support[1] == 0) {
      r.warnings.push_back("roc_auc undefined with a single class, reported as 0");
    } else {
      r.roc_auc = roc_auc(scores, labels);
    }
  } else {
    const double kd = static_cast<double>(k);
    r.precision = std::accumulate(r.class_precision.begin(), r.class_precision.end(), 0.0) / kd;
    r.recall = std::accumulate(r.class_recall.begin(), r.class_recall.end(), 0.0) / kd;
    r.f1 = std::accumulate(r.class_f1.begin(), r.class_f1.end(), 0.0) / kd;
    double auc_sum = 0.0;
    int auc_classes = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (r.support[c] == 0 || r.support[c] == r.count) {
        r.warnings.push_back("one-vs-rest roc_auc of " + r.class_names[c] + " undefined, left out of the macro mean");
        continue;
      }
      std::vector<double> scores;
      std::vector<int> labels;
      for (const auto& p : predictions) {
        scores.push_back(p.probabilities[c]);
        labels.push_back(p.true_label == static_cast<int>(c) ? 1 : 0);
      }
      auc_sum += roc_auc(scores, labels);
      ++auc_classes;
    }
    r.roc_auc = auc_classes ? auc_sum / auc_classes : 0.0;
  }
  r.check_invariants();
  return r;
}

std::vector<Prediction> to_binary_predictions(std::span<const Prediction> predictions, Task task, Aggregation mode) {
  if (task == Task::binary) throw ValidationError("predictions are already binary");
  std::vector<Prediction> out;
  out.reserve(predictions.size());
  for (const auto& p : predictions) {
    const SuspicionLevel truth = level_of_class(p.true_label, task);
    if (truth == SuspicionLevel::Indeterminate) continue;
    const auto probs = ClassProbabilities::from_vector(p.probabilities, task);
    out.push_back({p.nodule_id, {aggregate_binary(probs, mode).dangerous}, static_cast<int>(binarize_label(truth))});
  }
  return out;
}

std::vector<Prediction> pool_predictions(std::span<const std::vector<Prediction>> per_fold) {
  std::vector<Prediction> pooled;
  std::unordered_set<std::string> seen;
  for (const auto& fold : per_fold) {
    for (const auto& p : fold) {
      if (!seen.insert(p.nodule_id).second) throw ValidationError("nodule appears in more than one fold: " + p.nodule_id);
      pooled.push_back(p);
    }
  }
  return pooled;
}

MetricsReport pool_folds(std::span<const std::vector<Prediction>> per_fold, Task task, double threshold) {
  const auto pooled = pool_predictions(per_fold);
  return classification_metrics(pooled, task, threshold);
}

std::string report_to_json(const MetricsReport& r) {
  json j;
  j["kind"] = r.kind;
  j["count"] = r.count;
  j["roc_auc"] = r.roc_auc;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["classes"] = r.class_names;
  j["class_precision"] = r.class_precision;
  j["class_recall"] = r.class_recall;
  j["class_f1"] = r.class_f1;
  j["support"] = r.support;
  j["confusion_matrix"] = r.confusion;
  j["warnings"] = r.warnings;
  return j.dump(2);
}

MetricsReport report_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    MetricsReport r;
    r.kind = j.at("kind").get<std::string>();
    r.count = j.at("count").get<std::size_t>();
    r.roc_auc = j.at("roc_auc").get<double>();
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.class_names = j.at("classes").get<std::vector<std::string>>();
    r.class_precision = j.at("class_precision").get<std::vector<double>>();
    r.class_recall = j.at("class_recall").get<std::vector<double>>();
    r.class_f1 = j.at("class_f1").get<std::vector<double>>();
    r.support = j.at("support").get<std::vector<std::size_t>>();
    r.confusion = j.at("confusion_matrix").get<std::vector<std::vector<std::size_t>>>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    r.check_invariants();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad metrics report: ") + e.what());
  }
}

std::string confusion_to_csv(const MetricsReport& r) {
  std::ostringstream out;
  out << "truth\\predicted";
  for (const auto& n : r.class_names) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    out << r.class_names[i];
    for (std::size_t v : r.confusion[i]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

std::string predictions_to_jsonl(std::span<const Prediction> predictions) {
  std::string out;
  for (const auto& p : predictions) {
    json j{{"nodule_id", p.nodule_id}, {"probabilities", p.probabilities}, {"true_label", p.true_label}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<Prediction> predictions_from_jsonl(std::string_view text) {
  std::vector<Prediction> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("nodule_id").get<std::string>(), j.at("probabilities").get<std::vector<double>>(),
                     j.at("true_label").get<int>()});
    } catch (const json::exception& e) {
      throw FormatError("bad prediction line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace nodulenet
