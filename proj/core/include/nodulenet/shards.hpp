#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nodulenet/annotations.hpp"
#include "nodulenet/cropping.hpp"

namespace nodulenet {

/// A canonical (un-augmented) patch plus what training needs to re-extract
/// jittered views from the cached volume.
struct ShardRecord {
  Patch patch;
  std::string patient_id;
  std::string scan_id;
  std::string nodule_id;
  SuspicionLevel label = SuspicionLevel::Indeterminate;
  int fold = -1;
  BoundingBox bbox;
  std::string volume;  // cached volume path, relative to the shard directory
  bool resized = false;
};

/// Header line {"count", "shape": [2, e, e, e], "dtype": "f32"}, then per
/// record a JSON metadata line followed by its raw f32 patch.
std::string serialize_shard(std::span<const ShardRecord> records);
std::vector<ShardRecord> deserialize_shard(std::string_view bytes);

void write_shard(std::span<const ShardRecord> records, const std::filesystem::path& path);
std::vector<ShardRecord> read_shard(const std::filesystem::path& path);

}  // namespace nodulenet
