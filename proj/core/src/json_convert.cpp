#include "json_convert.hpp"

#include "nodulenet/error.hpp"

namespace nodulenet {

using nlohmann::json;

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"block_kind", c.block_kind == BlockKind::basic ? "basic" : "bottleneck"},
              {"blocks_per_stage", c.blocks_per_stage},
              {"base_width", c.base_width},
              {"num_outputs", c.num_outputs},
              {"input_channels", c.input_channels},
              {"norm", c.norm == nn::NormKind::batch ? "batch" : "group"},
              {"stem_pool", c.stem_pool}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  if (j.contains("block_kind")) {
    const auto kind = j.at("block_kind").get<std::string>();
    if (kind == "basic") c.block_kind = BlockKind::basic;
    else if (kind == "bottleneck") c.block_kind = BlockKind::bottleneck;
    else throw ValidationError("unknown block_kind: " + kind);
  }
  read_opt(j, "blocks_per_stage", c.blocks_per_stage);
  read_opt(j, "base_width", c.base_width);
  read_opt(j, "num_outputs", c.num_outputs);
  read_opt(j, "input_channels", c.input_channels);
  if (j.contains("norm")) {
    const auto norm = j.at("norm").get<std::string>();
    if (norm == "batch") c.norm = nn::NormKind::batch;
    else if (norm == "group") c.norm = nn::NormKind::group;
    else throw ValidationError("unknown norm: " + norm);
  }
  read_opt(j, "stem_pool", c.stem_pool);
  c.validate();
  return c;
}

json to_json(const VoxelSpacing& s) { return json::array({s.dx, s.dy, s.dz}); }

VoxelSpacing spacing_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw ValidationError("spacing needs 3 values");
  VoxelSpacing s{v[0], v[1], v[2]};
  if (!s.valid()) throw ValidationError("non-positive spacing");
  return s;
}

json to_json(const NormalizationParams& p) {
  return json{{"a_min", p.a_min}, {"a_max", p.a_max}, {"b_min", p.b_min}, {"b_max", p.b_max}};
}

NormalizationParams normalization_from_json(const json& j) {
  NormalizationParams p;
  read_opt(j, "a_min", p.a_min);
  read_opt(j, "a_max", p.a_max);
  read_opt(j, "b_min", p.b_min);
  read_opt(j, "b_max", p.b_max);
  if (!p.valid()) throw ValidationError("normalization window needs a_max > a_min and b_max > b_min");
  return p;
}

json to_json(const AugmentConfig& a) {
  return json{{"jitter_enabled", a.jitter_enabled},
              {"jitter_alpha", {a.jitter.alpha_min, a.jitter.alpha_max}},
              {"mask_dropout_p", a.mask_dropout_p},
              {"flip_p", a.flip_p},
              {"rot90_xy", a.rot90_xy},
              {"rot90_p", a.rot90_p},
              {"zoom_p", a.zoom_p},
              {"zoom_range", {a.zoom_lo, a.zoom_hi}},
              {"noise_p", a.noise_p},
              {"noise_sigma_max", a.noise_sigma_max},
              {"smooth_p", a.smooth_p},
              {"smooth_sigma_range", {a.smooth_sigma_lo, a.smooth_sigma_hi}}};
}

AugmentConfig augment_from_json(const json& j, AugmentConfig a) {
  read_opt(j, "jitter_enabled", a.jitter_enabled);
  if (j.contains("jitter_alpha")) {
    const auto v = j.at("jitter_alpha").get<std::array<double, 2>>();
    a.jitter = {v[0], v[1]};
  }
  read_opt(j, "mask_dropout_p", a.mask_dropout_p);
  read_opt(j, "flip_p", a.flip_p);
  read_opt(j, "rot90_xy", a.rot90_xy);
  read_opt(j, "rot90_p", a.rot90_p);
  read_opt(j, "zoom_p", a.zoom_p);
  if (j.contains("zoom_range")) {
    const auto v = j.at("zoom_range").get<std::array<double, 2>>();
    a.zoom_lo = v[0];
    a.zoom_hi = v[1];
  }
  read_opt(j, "noise_p", a.noise_p);
  read_opt(j, "noise_sigma_max", a.noise_sigma_max);
  read_opt(j, "smooth_p", a.smooth_p);
  if (j.contains("smooth_sigma_range")) {
    const auto v = j.at("smooth_sigma_range").get<std::array<double, 2>>();
    a.smooth_sigma_lo = v[0];
    a.smooth_sigma_hi = v[1];
  }
  a.validate();
  return a;
}

json to_json(const TrainConfig& t) {
  return json{{"max_epochs", t.max_epochs},
              {"batch_size", t.batch_size},
              {"lr_start", t.lr_start},
              {"lr_end", t.lr_end},
              {"task", std::string(to_string(t.task))},
              {"early_stop_patience", t.early_stop_patience},
              {"seed", t.seed}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig t) {
  read_opt(j, "max_epochs", t.max_epochs);
  read_opt(j, "batch_size", t.batch_size);
  read_opt(j, "lr_start", t.lr_start);
  read_opt(j, "lr_end", t.lr_end);
  if (j.contains("task")) t.task = parse_task(j.at("task").get<std::string>());
  read_opt(j, "early_stop_patience", t.early_stop_patience);
  read_opt(j, "seed", t.seed);
  t.validate();
  return t;
}

json to_json(const BoundingBox& b) { return json::array({b.x_min, b.y_min, b.z_min, b.x_max, b.y_max, b.z_max}); }

BoundingBox bbox_from_json(const json& j) {
  const auto v = j.get<std::vector<int>>();
  if (v.size() != 6) throw ValidationError("bbox needs 6 values");
  return {v[0], v[1], v[2], v[3], v[4], v[5]};
}

}  // namespace nodulenet
