#include "nodulenet/annotations.hpp"

#include <algorithm>

#include "io_util.hpp"
#include "json.hpp"
#include "nodulenet/error.hpp"

namespace nodulenet {

using nlohmann::json;

SuspicionLevel suspicion_from_code(int code) {
  if (code < 0 || code >= kSuspicionLevels) throw ValidationError("suspicion code out of range: " + std::to_string(code));
  return static_cast<SuspicionLevel>(code);
}

std::string_view to_string(SuspicionLevel s) {
  switch (s) {
    case SuspicionLevel::HighlyUnlikely: return "HighlyUnlikely";
    case SuspicionLevel::ModeratelyUnlikely: return "ModeratelyUnlikely";
    case SuspicionLevel::Indeterminate: return "Indeterminate";
    case SuspicionLevel::ModeratelySuspicious: return "ModeratelySuspicious";
    case SuspicionLevel::HighlySuspicious: return "HighlySuspicious";
  }
  return "?";
}

SuspicionLevel aggregate_annotations(std::span<const SuspicionLevel> labels) {
  if (labels.empty()) throw ValidationError("cannot aggregate an empty label list");
  std::vector<int> codes;
  codes.reserve(labels.size());
  for (auto s : labels) codes.push_back(code_of(s));
  std::sort(codes.begin(), codes.end());
  const std::size_t mid = codes.size() / 2;
  if (codes.size() % 2 == 1) return static_cast<SuspicionLevel>(codes[mid]);
  // Even count: mean of the two middle codes, a half-integer rounding up
  // toward higher suspicion.
  return static_cast<SuspicionLevel>((codes[mid - 1] + codes[mid] + 1) / 2);
}

std::vector<LabeledRecord> filter_targets(std::span<const NoduleRecord> records, bool keep_indeterminate) {
  std::vector<LabeledRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const auto label = aggregate_annotations(r.annotator_labels);
    if (!keep_indeterminate && label == SuspicionLevel::Indeterminate) continue;
    out.push_back({r, label});
  }
  return out;
}

BinaryLabel binarize_label(SuspicionLevel s) {
  switch (s) {
    case SuspicionLevel::HighlyUnlikely:
    case SuspicionLevel::ModeratelyUnlikely:
      return BinaryLabel::NotDangerous;
    case SuspicionLevel::ModeratelySuspicious:
    case SuspicionLevel::HighlySuspicious:
      return BinaryLabel::Dangerous;
    case SuspicionLevel::Indeterminate:
      break;
  }
  throw ValidationError("no binary mapping for Indeterminate");
}

std::vector<NoduleRecord> parse_manifest(std::string_view json_text) {
  std::vector<NoduleRecord> out;
  try {
    const json doc = json::parse(json_text);
    if (!doc.is_array()) throw FormatError("manifest must be a JSON array");
    out.reserve(doc.size());
    for (const auto& item : doc) {
      NoduleRecord r;
      r.patient_id = item.at("patient_id").get<std::string>();
      r.scan_id = item.at("scan_id").get<std::string>();
      r.nodule_id = item.at("nodule_id").get<std::string>();
      const auto b = item.at("bbox").get<std::vector<int>>();
      if (b.size() != 6) throw FormatError("bbox must have six integers (nodule " + r.nodule_id + ")");
      r.bbox = {b[0], b[1], b[2], b[3], b[4], b[5]};
      if (!r.bbox.valid()) throw ValidationError("degenerate bbox (nodule " + r.nodule_id + ")");
      for (int code : item.at("labels").get<std::vector<int>>()) r.annotator_labels.push_back(suspicion_from_code(code));
      if (r.annotator_labels.empty()) throw ValidationError("nodule " + r.nodule_id + " has no labels");
      if (item.contains("fold") && !item["fold"].is_null()) r.fold = item["fold"].get<int>();
      out.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  return out;
}

std::vector<NoduleRecord> load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_text_file(path));
}

std::string manifest_to_json(std::span<const NoduleRecord> records) {
  json doc = json::array();
  for (const auto& r : records) {
    json labels = json::array();
    for (auto s : r.annotator_labels) labels.push_back(code_of(s));
    json item = {
        {"patient_id", r.patient_id},
        {"scan_id", r.scan_id},
        {"nodule_id", r.nodule_id},
        {"bbox", {r.bbox.x_min, r.bbox.y_min, r.bbox.z_min, r.bbox.x_max, r.bbox.y_max, r.bbox.z_max}},
        {"labels", labels},
    };
    if (r.fold) item["fold"] = *r.fold;
    doc.push_back(std::move(item));
  }
  return doc.dump(1) + "\n";
}

void save_manifest(std::span<const NoduleRecord> records, const std::filesystem::path& path) {
  write_file_atomic(path, manifest_to_json(records));
}

}  // namespace nodulenet
