#include "nodulenet/shards.hpp"

#include <cstring>

#include "io_util.hpp"
#include "json_convert.hpp"
#include "nodulenet/error.hpp"

namespace nodulenet {

using nlohmann::json;

std::string serialize_shard(std::span<const ShardRecord> records) {
  const int edge = records.empty() ? kCropSize : records.front().patch.edge;
  json header{{"count", records.size()}, {"shape", {2, edge, edge, edge}}, {"dtype", "f32"}};
  std::string out = header.dump();
  out += '\n';
  for (const auto& r : records) {
    if (r.patch.edge != edge) throw ValidationError("all patches in a shard must share a size");
    const json meta{{"patient_id", r.patient_id},
                    {"scan_id", r.scan_id},
                    {"nodule_id", r.nodule_id},
                    {"label", code_of(r.label)},
                    {"binary_label", r.label == SuspicionLevel::Indeterminate
                                         ? json(nullptr)
                                         : json(static_cast<int>(binarize_label(r.label)))},
                    {"fold", r.fold},
                    {"bbox", to_json(r.bbox)},
                    {"volume", r.volume},
                    {"resized", r.resized}};
    out += meta.dump();
    out += '\n';
    out.append(reinterpret_cast<const char*>(r.patch.data.data()), r.patch.data.size() * sizeof(float));
  }
  return out;
}

std::vector<ShardRecord> deserialize_shard(std::string_view bytes) {
  ByteCursor in(bytes);
  try {
    const json header = json::parse(in.line());
    if (header.at("dtype").get<std::string>() != "f32") throw FormatError("unsupported shard dtype");
    const auto shape = header.at("shape").get<std::vector<int>>();
    if (shape.size() != 4 || shape[0] != 2 || shape[1] != shape[2] || shape[2] != shape[3] || shape[1] < 1) {
      throw FormatError("shard shape must be [2, e, e, e]");
    }
    const std::size_t count = header.at("count").get<std::size_t>();
    std::vector<ShardRecord> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const json meta = json::parse(in.line());
      ShardRecord r;
      r.patient_id = meta.at("patient_id").get<std::string>();
      r.scan_id = meta.at("scan_id").get<std::string>();
      r.nodule_id = meta.at("nodule_id").get<std::string>();
      r.label = suspicion_from_code(meta.at("label").get<int>());
      r.fold = meta.at("fold").get<int>();
      r.bbox = bbox_from_json(meta.at("bbox"));
      r.volume = meta.at("volume").get<std::string>();
      r.resized = meta.value("resized", false);
      r.patch = Patch(shape[1]);
      r.patch.scan_id = r.scan_id;
      r.patch.nodule_id = r.nodule_id;
      const auto payload = in.take(r.patch.data.size() * sizeof(float));
      std::memcpy(r.patch.data.data(), payload.data(), payload.size());
      out.push_back(std::move(r));
    }
    if (!in.done()) throw FormatError("trailing bytes after shard records");
    return out;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad shard metadata: ") + e.what());
  }
}

void write_shard(std::span<const ShardRecord> records, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_shard(records));
}

std::vector<ShardRecord> read_shard(const std::filesystem::path& path) {
  return deserialize_shard(read_binary_file(path));
}

}  // namespace nodulenet
