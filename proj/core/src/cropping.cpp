#include "nodulenet/cropping.hpp"

#include <algorithm>
#include <cmath>

#include "nodulenet/error.hpp"
#include "nodulenet/volume.hpp"

namespace nodulenet {

namespace {

int floor_div2(int v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

bool overlaps_volume(const BoundingBox& b, GridDims d) {
  return b.x_max > 0 && b.y_max > 0 && b.z_max > 0 && b.x_min < d.nx && b.y_min < d.ny && b.z_min < d.nz;
}

/// Gathers window voxels from `v`, zero outside the volume.
std::vector<float> gather(const CtVolume& v, const BoundingBox& w) {
  const auto len = w.lengths();
  const GridDims wd{len[0], len[1], len[2]};
  std::vector<float> out(wd.count(), 0.0f);
  const int x0 = std::max(w.x_min, 0);
  const int x1 = std::min(w.x_max, v.dims.nx);
  if (x1 <= x0) return out;
  for (int z = std::max(w.z_min, 0); z < std::min(w.z_max, v.dims.nz); ++z) {
    for (int y = std::max(w.y_min, 0); y < std::min(w.y_max, v.dims.ny); ++y) {
      const float* src = &v.voxels[v.dims.index(x0, y, z)];
      float* dst = &out[wd.index(x0 - w.x_min, y - w.y_min, z - w.z_min)];
      std::copy(src, src + (x1 - x0), dst);
    }
  }
  return out;
}

}  // namespace

CropWindow crop_window(const BoundingBox& bbox, int crop_size) {
  if (!bbox.valid()) throw ValidationError("degenerate bbox");
  if (crop_size < 1) throw ValidationError("crop size must be positive");
  const auto lo = bbox.lo();
  const auto hi = bbox.hi();
  const auto len = bbox.lengths();
  const bool oversized = std::any_of(len.begin(), len.end(), [&](int l) { return l > crop_size; });

  std::array<int, 3> wlo{}, whi{};
  for (int a = 0; a < 3; ++a) {
    if (len[a] > crop_size) {
      wlo[a] = lo[a] - kOversizePadding;
      whi[a] = hi[a] + kOversizePadding;
    } else {
      const int center = floor_div2(lo[a] + hi[a]);
      wlo[a] = center - crop_size / 2;
      whi[a] = wlo[a] + crop_size;
    }
  }
  return {BoundingBox::from(wlo, whi), oversized};
}

Patch extract_patch(const CtVolume& v, const BoundingBox& bbox, int crop_size) {
  return extract_patch(v, bbox, crop_size, nullptr);
}

Patch extract_patch(const CtVolume& v, const BoundingBox& bbox, int crop_size, bool* resized) {
  if (!v.normalized) throw ValidationError("extract_patch requires a normalized volume");
  if (!bbox.valid()) throw ValidationError("degenerate bbox");
  if (!overlaps_volume(bbox, v.dims)) throw ValidationError("bbox entirely outside the volume");

  const CropWindow cw = crop_window(bbox, crop_size);
  if (resized) *resized = cw.resize_needed;
  const auto wlen = cw.window.lengths();
  const GridDims wd{wlen[0], wlen[1], wlen[2]};
  const std::vector<float> crop = gather(v, cw.window);

  // Box indicator in window coordinates.
  const BoundingBox local = bbox.translated({-cw.window.x_min, -cw.window.y_min, -cw.window.z_min});
  auto inside = [&](int x, int y, int z) {
    return x >= local.x_min && x < local.x_max && y >= local.y_min && y < local.y_max && z >= local.z_min &&
           z < local.z_max;
  };

  Patch p(crop_size);
  float* image = p.channel(0);
  float* mask = p.channel(1);
  const GridDims pd = p.dims();

  if (!cw.resize_needed) {
    std::copy(crop.begin(), crop.end(), image);
    for (int z = 0; z < pd.nz; ++z)
      for (int y = 0; y < pd.ny; ++y)
        for (int x = 0; x < pd.nx; ++x) {
          const std::size_t i = pd.index(x, y, z);
          mask[i] = inside(x, y, z) ? image[i] : 0.0f;
        }
    return p;
  }

  std::vector<float> indicator(wd.count());
  for (int z = 0; z < wd.nz; ++z)
    for (int y = 0; y < wd.ny; ++y)
      for (int x = 0; x < wd.nx; ++x) indicator[wd.index(x, y, z)] = inside(x, y, z) ? 1.0f : 0.0f;

  const std::array<double, 3> scale{static_cast<double>(wd.nx) / crop_size, static_cast<double>(wd.ny) / crop_size,
                                    static_cast<double>(wd.nz) / crop_size};
  const auto resized_image = trilinear_resample(crop, wd, pd, scale, {0, 0, 0}, 0.0f);
  const auto resized_mask = trilinear_resample(indicator, wd, pd, scale, {0, 0, 0}, 0.0f);
  std::copy(resized_image.begin(), resized_image.end(), image);
  for (std::size_t i = 0; i < pd.count(); ++i) mask[i] = resized_mask[i] >= 0.5f ? image[i] : 0.0f;
  return p;
}

}  // namespace nodulenet
