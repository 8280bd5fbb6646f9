#include "nodulenet/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "nodulenet/error.hpp"
#include "io_util.hpp"

namespace nodulenet {

using nlohmann::json;

bool VoxelSpacing::valid() const {
  auto ok = [](double s) { return std::isfinite(s) && s > 0.0; };
  return ok(dx) && ok(dy) && ok(dz);
}

void validate(const CtVolume& v) {
  if (v.dims.nx < 1 || v.dims.ny < 1 || v.dims.nz < 1) throw ValidationError("volume dims must be >= 1");
  if (v.voxels.size() != v.dims.count()) throw ValidationError("payload length mismatch");
  if (!v.spacing.valid()) throw ValidationError("non-positive spacing");
}

std::filesystem::path sidecar_path(const std::filesystem::path& payload) {
  auto p = payload;
  p.replace_extension(".json");
  return p;
}

CtVolume load_volume(const std::filesystem::path& payload) {
  const auto sidecar = sidecar_path(payload);
  if (!std::filesystem::exists(sidecar)) throw FormatError("missing sidecar: " + sidecar.string());
  json meta;
  try {
    meta = json::parse(read_text_file(sidecar));
  } catch (const json::exception& e) {
    throw FormatError("malformed sidecar " + sidecar.string() + ": " + e.what());
  }

  CtVolume v;
  try {
    const auto shape = meta.at("shape").get<std::vector<long long>>();
    const auto spacing = meta.at("spacing").get<std::vector<double>>();
    if (shape.size() != 3 || spacing.size() != 3) throw FormatError("sidecar shape/spacing must have 3 entries");
    if (shape[0] < 1 || shape[1] < 1 || shape[2] < 1) throw ValidationError("volume dims must be >= 1");
    v.dims = {static_cast<int>(shape[0]), static_cast<int>(shape[1]), static_cast<int>(shape[2])};
    v.spacing = {spacing[0], spacing[1], spacing[2]};
    v.normalized = meta.value("normalized", false);
    v.patient_id = meta.value("patient_id", std::string{});
    v.scan_id = meta.value("scan_id", std::string{});
    if (!v.spacing.valid()) throw ValidationError("non-positive spacing");

    const std::string dtype = meta.at("dtype").get<std::string>();
    const std::string bytes = read_binary_file(payload);
    const std::size_t n = v.dims.count();
    if (dtype == "i16") {
      if (bytes.size() != n * 2) throw ValidationError("payload length mismatch");
      v.voxels.resize(n);
      for (std::size_t i = 0; i < n; ++i) v.voxels[i] = static_cast<float>(load_le<std::int16_t>(bytes.data() + 2 * i));
    } else if (dtype == "f32") {
      if (bytes.size() != n * 4) throw ValidationError("payload length mismatch");
      v.voxels.resize(n);
      for (std::size_t i = 0; i < n; ++i) v.voxels[i] = load_le<float>(bytes.data() + 4 * i);
    } else {
      throw FormatError("unsupported dtype: " + dtype);
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed sidecar " + sidecar.string() + ": " + e.what());
  }
  return v;
}

void save_volume(const CtVolume& v, const std::filesystem::path& payload) {
  validate(v);
  std::string bytes;
  const bool as_float = v.normalized;
  bytes.reserve(v.voxels.size() * (as_float ? 4 : 2));
  for (float value : v.voxels) {
    if (as_float) {
      append_le(bytes, value);
    } else {
      const double r = std::clamp(std::round(static_cast<double>(value)), -32768.0, 32767.0);
      append_le(bytes, static_cast<std::int16_t>(r));
    }
  }
  json meta = {
      {"shape", {v.dims.nx, v.dims.ny, v.dims.nz}},
      {"spacing", {v.spacing.dx, v.spacing.dy, v.spacing.dz}},
      {"dtype", as_float ? "f32" : "i16"},
      {"normalized", v.normalized},
      {"patient_id", v.patient_id},
      {"scan_id", v.scan_id},
  };
  write_file_atomic(payload, bytes);
  write_file_atomic(sidecar_path(payload), meta.dump() + "\n");
}

GridDims resampled_dims(GridDims dims, VoxelSpacing from, VoxelSpacing to) {
  auto axis = [](int n, double s_in, double s_out) {
    return std::max(1, static_cast<int>(std::lround(n * s_in / s_out)));
  };
  return {axis(dims.nx, from.dx, to.dx), axis(dims.ny, from.dy, to.dy), axis(dims.nz, from.dz, to.dz)};
}

CtVolume resample_volume(const CtVolume& v, VoxelSpacing target, const NormalizationParams& window) {
  validate(v);
  if (!target.valid()) throw ValidationError("non-positive spacing");
  CtVolume out;
  out.patient_id = v.patient_id;
  out.scan_id = v.scan_id;
  out.normalized = v.normalized;
  out.spacing = target;
  if (target == v.spacing) {
    out.dims = v.dims;
    out.voxels = v.voxels;
    return out;
  }
  out.dims = resampled_dims(v.dims, v.spacing, target);
  const float fill = static_cast<float>(v.normalized ? window.b_min : window.a_min);
  out.voxels = trilinear_resample(v.voxels, v.dims, out.dims,
                                  {target.dx / v.spacing.dx, target.dy / v.spacing.dy, target.dz / v.spacing.dz},
                                  {0.0, 0.0, 0.0}, fill);
  return out;
}

double normalize_value(double hu, const NormalizationParams& p) {
  const double mapped = p.b_min + (hu - p.a_min) * (p.b_max - p.b_min) / (p.a_max - p.a_min);
  return std::clamp(mapped, p.b_min, p.b_max);
}

CtVolume normalize_intensity(const CtVolume& v, const NormalizationParams& p) {
  validate(v);
  if (v.normalized) throw ValidationError("volume is already normalized");
  if (!p.valid()) throw ValidationError("invalid normalization window");
  CtVolume out = v;
  for (float& value : out.voxels) value = static_cast<float>(normalize_value(value, p));
  out.normalized = true;
  return out;
}

}  // namespace nodulenet
