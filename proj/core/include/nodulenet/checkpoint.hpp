#pragma once

#include <filesystem>
#include <string>

#include "nodulenet/model.hpp"
#include "nodulenet/task.hpp"
#include "nodulenet/volume.hpp"

namespace nodulenet {

/// Trained weights plus what inference needs to reproduce the inputs.
struct Checkpoint {
  ModelParams<float> params;
  Task task = Task::multiclass4;
  int epoch = -1;
  double metric = 0.0;  // validation F1 at `epoch`
  int fold = -1;
  VoxelSpacing spacing = kCanonicalSpacing;
  NormalizationParams normalization;
  int crop_size = 64;
};

/// One JSON header line, then for every parameter and buffer in order:
/// u32 rank, u32 dims[rank], f32 values (all little-endian).
std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nodulenet
