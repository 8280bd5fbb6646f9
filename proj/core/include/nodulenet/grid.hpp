#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace nodulenet {

/// Extent of a dense 3D scalar grid stored X-fastest.
struct GridDims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * z);
  }
  bool operator==(const GridDims&) const = default;
};

/// Maps an output voxel index to a source coordinate with centers aligned:
/// src = (i + 0.5) * scale - 0.5.
inline double center_aligned(int i, double scale) { return (i + 0.5) * scale - 0.5; }

/// Trilinear resampling of `src` onto `out_dims`. Output voxel (i, j, k) reads
/// the source at (offset + center_aligned(i, scale[0]), ...). Coordinates inside
/// the source's physical extent [-0.5, n - 0.5] are clamped to the nearest voxel
/// center before interpolation; coordinates beyond it read `fill`.
std::vector<float> trilinear_resample(std::span<const float> src, GridDims src_dims, GridDims out_dims,
                                      std::array<double, 3> scale, std::array<double, 3> offset, float fill);

}  // namespace nodulenet
