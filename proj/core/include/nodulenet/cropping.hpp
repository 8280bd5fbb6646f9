#pragma once

#include <array>
#include <string>
#include <vector>

#include "nodulenet/grid.hpp"

namespace nodulenet {

struct CtVolume;

/// Half-open voxel box [min, max) in canonical-spacing coordinates.
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int z_min = 0;
  int x_max = 0;
  int y_max = 0;
  int z_max = 0;

  bool valid() const { return x_max > x_min && y_max > y_min && z_max > z_min; }
  std::array<int, 3> lengths() const { return {x_max - x_min, y_max - y_min, z_max - z_min}; }
  std::array<int, 3> lo() const { return {x_min, y_min, z_min}; }
  std::array<int, 3> hi() const { return {x_max, y_max, z_max}; }
  static BoundingBox from(std::array<int, 3> lo, std::array<int, 3> hi) {
    return {lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]};
  }
  BoundingBox translated(std::array<int, 3> d) const {
    return {x_min + d[0], y_min + d[1], z_min + d[2], x_max + d[0], y_max + d[1], z_max + d[2]};
  }
  bool operator==(const BoundingBox&) const = default;
};

inline constexpr int kCropSize = 64;
inline constexpr int kOversizePadding = 8;

/// Two-channel cubic model input: channel 0 is the crop, channel 1 the crop
/// masked to the nodule box. Layout [channel][z][y][x], x fastest.
struct Patch {
  int edge = kCropSize;
  std::vector<float> data;
  std::string scan_id;
  std::string nodule_id;

  Patch() = default;
  explicit Patch(int e) : edge(e), data(2 * voxels_per_channel(e), 0.0f) {}

  static std::size_t voxels_per_channel(int e) {
    return static_cast<std::size_t>(e) * static_cast<std::size_t>(e) * static_cast<std::size_t>(e);
  }
  std::size_t channel_size() const { return voxels_per_channel(edge); }
  GridDims dims() const { return {edge, edge, edge}; }

  float* channel(int c) { return data.data() + static_cast<std::size_t>(c) * channel_size(); }
  const float* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * channel_size(); }
  float& at(int c, int x, int y, int z) { return channel(c)[dims().index(x, y, z)]; }
  float at(int c, int x, int y, int z) const { return channel(c)[dims().index(x, y, z)]; }
};

struct CropWindow {
  BoundingBox window;
  bool resize_needed = false;
};

/// Region of the volume read for a nodule. Boxes that fit are centred in a
/// crop_size cube (centre = floor((min + max) / 2)); axes longer than
/// crop_size instead span the box plus kOversizePadding per side and the
/// window is later resized to the cube.
CropWindow crop_window(const BoundingBox& bbox, int crop_size = kCropSize);

/// Builds the two-channel patch for `bbox` from a normalized volume. Voxels
/// outside the volume read as 0.
Patch extract_patch(const CtVolume& v, const BoundingBox& bbox, int crop_size = kCropSize);

/// Same as extract_patch but also reports whether the resize path ran.
Patch extract_patch(const CtVolume& v, const BoundingBox& bbox, int crop_size, bool* resized);

}  // namespace nodulenet
