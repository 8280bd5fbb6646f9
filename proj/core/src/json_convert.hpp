#pragma once

// JSON mappings shared by the checkpoint, shard and config readers.

#include "json.hpp"
#include "nodulenet/augment.hpp"
#include "nodulenet/model.hpp"
#include "nodulenet/training.hpp"
#include "nodulenet/volume.hpp"

namespace nodulenet {

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const VoxelSpacing& s);
VoxelSpacing spacing_from_json(const nlohmann::json& j);

nlohmann::json to_json(const NormalizationParams& p);
NormalizationParams normalization_from_json(const nlohmann::json& j);

nlohmann::json to_json(const AugmentConfig& a);
/// Missing keys keep the defaults in `base`.
AugmentConfig augment_from_json(const nlohmann::json& j, AugmentConfig base = {});

nlohmann::json to_json(const TrainConfig& t);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

nlohmann::json to_json(const BoundingBox& b);
BoundingBox bbox_from_json(const nlohmann::json& j);

}  // namespace nodulenet
