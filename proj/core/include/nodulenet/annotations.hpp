#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nodulenet/cropping.hpp"

namespace nodulenet {

/// Radiologist malignancy-suspicion rating on its ordinal scale.
enum class SuspicionLevel : int {
  HighlyUnlikely = 0,
  ModeratelyUnlikely = 1,
  Indeterminate = 2,
  ModeratelySuspicious = 3,
  HighlySuspicious = 4,
};

inline constexpr int kSuspicionLevels = 5;

SuspicionLevel suspicion_from_code(int code);
inline int code_of(SuspicionLevel s) { return static_cast<int>(s); }
std::string_view to_string(SuspicionLevel s);

enum class BinaryLabel : int { NotDangerous = 0, Dangerous = 1 };

struct NoduleRecord {
  std::string patient_id;
  std::string scan_id;
  std::string nodule_id;
  BoundingBox bbox;
  std::vector<SuspicionLevel> annotator_labels;
  /// Cross-validation fold, once assigned.
  std::optional<int> fold;
};

/// Median of the ordinal codes. For an even count the mean of the two middle
/// codes is taken, rounding a half-integer up ([0,1] -> 1, [1,3] -> 2).
SuspicionLevel aggregate_annotations(std::span<const SuspicionLevel> labels);

struct LabeledRecord {
  NoduleRecord record;
  SuspicionLevel label;
};

/// Pairs every record with its aggregated label and, unless
/// keep_indeterminate is set, drops the Indeterminate ones. Order is kept.
std::vector<LabeledRecord> filter_targets(std::span<const NoduleRecord> records, bool keep_indeterminate);

/// {0,1} -> NotDangerous, {3,4} -> Dangerous. Indeterminate throws.
BinaryLabel binarize_label(SuspicionLevel s);

/// JSON array of records: {"patient_id", "scan_id", "nodule_id",
/// "bbox": [x0,y0,z0,x1,y1,z1], "labels": [codes...], optional "fold"}.
std::vector<NoduleRecord> parse_manifest(std::string_view json_text);
std::vector<NoduleRecord> load_manifest(const std::filesystem::path& path);
std::string manifest_to_json(std::span<const NoduleRecord> records);
void save_manifest(std::span<const NoduleRecord> records, const std::filesystem::path& path);

}  // namespace nodulenet
