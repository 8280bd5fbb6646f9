#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "nodulenet/grid.hpp"

namespace nodulenet {

/// Physical voxel size in millimetres along X, Y and Z.
struct VoxelSpacing {
  double dx = 1.0;
  double dy = 1.0;
  double dz = 1.0;

  bool valid() const;
  std::array<double, 3> as_array() const { return {dx, dy, dz}; }
  bool operator==(const VoxelSpacing&) const = default;
};

/// Canonical geometry every volume is resampled to before cropping.
inline constexpr VoxelSpacing kCanonicalSpacing{0.625, 0.625, 1.0};

/// Linear intensity window mapping [a_min, a_max] HU onto [b_min, b_max].
struct NormalizationParams {
  double a_min = -1024.0;
  double a_max = 700.0;
  double b_min = 0.0;
  double b_max = 1.0;

  bool valid() const { return a_max > a_min && b_max > b_min; }
};

/// A CT volume. Intensities are HU until normalize_intensity() runs, then
/// unitless values in [b_min, b_max]. Storage is X-fastest.
struct CtVolume {
  GridDims dims;
  std::vector<float> voxels;
  VoxelSpacing spacing;
  bool normalized = false;
  std::string patient_id;
  std::string scan_id;

  float at(int x, int y, int z) const { return voxels[dims.index(x, y, z)]; }
  float& at(int x, int y, int z) { return voxels[dims.index(x, y, z)]; }
};

/// Throws ValidationError when dims, voxel count or spacing are inconsistent.
void validate(const CtVolume& v);

/// Reads `<stem>.raw` (or whatever payload path is given) plus the JSON
/// sidecar `<stem>.json` next to it.
CtVolume load_volume(const std::filesystem::path& payload);

/// Writes payload + sidecar. Raw volumes are stored as little-endian int16
/// (rounded HU); normalized volumes as little-endian float32.
void save_volume(const CtVolume& v, const std::filesystem::path& payload);

std::filesystem::path sidecar_path(const std::filesystem::path& payload);

/// Output grid size after resampling: round(n * from / to), at least 1.
GridDims resampled_dims(GridDims dims, VoxelSpacing from, VoxelSpacing to);

/// Trilinear resampling to `target` spacing. Sample points beyond the
/// source's physical extent read as air (a_min, or b_min once normalized).
CtVolume resample_volume(const CtVolume& v, VoxelSpacing target,
                         const NormalizationParams& window = NormalizationParams{});

/// Applies the intensity window and clamps to [b_min, b_max].
CtVolume normalize_intensity(const CtVolume& v, const NormalizationParams& p = NormalizationParams{});

/// Single-value form of the window, exposed for tests and tooling.
double normalize_value(double hu, const NormalizationParams& p);

}  // namespace nodulenet
