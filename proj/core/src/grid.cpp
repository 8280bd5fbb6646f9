#include "nodulenet/grid.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nodulenet/tensor.hpp"

namespace nodulenet {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

struct AxisTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
  bool outside = false;
};

std::vector<AxisTap> axis_taps(int n_out, int n_src, double scale, double offset) {
  std::vector<AxisTap> taps(static_cast<std::size_t>(n_out));
  for (int i = 0; i < n_out; ++i) {
    const double c = offset + center_aligned(i, scale);
    AxisTap t;
    if (c < -0.5 || c > n_src - 0.5) {
      t.outside = true;
    } else {
      const double cc = std::clamp(c, 0.0, static_cast<double>(n_src - 1));
      const double f = std::floor(cc);
      t.lo = static_cast<int>(f);
      t.hi = std::min(t.lo + 1, n_src - 1);
      t.frac = cc - f;
    }
    taps[static_cast<std::size_t>(i)] = t;
  }
  return taps;
}

}  // namespace

std::vector<float> trilinear_resample(std::span<const float> src, GridDims src_dims, GridDims out_dims,
                                      std::array<double, 3> scale, std::array<double, 3> offset, float fill) {
  const auto tx = axis_taps(out_dims.nx, src_dims.nx, scale[0], offset[0]);
  const auto ty = axis_taps(out_dims.ny, src_dims.ny, scale[1], offset[1]);
  const auto tz = axis_taps(out_dims.nz, src_dims.nz, scale[2], offset[2]);

  std::vector<float> out(out_dims.count());
  std::size_t o = 0;
  for (int k = 0; k < out_dims.nz; ++k) {
    const AxisTap& az = tz[static_cast<std::size_t>(k)];
    for (int j = 0; j < out_dims.ny; ++j) {
      const AxisTap& ay = ty[static_cast<std::size_t>(j)];
      for (int i = 0; i < out_dims.nx; ++i, ++o) {
        const AxisTap& ax = tx[static_cast<std::size_t>(i)];
        if (ax.outside || ay.outside || az.outside) {
          out[o] = fill;
          continue;
        }
        auto at = [&](int x, int y, int z) { return static_cast<double>(src[src_dims.index(x, y, z)]); };
        const double c00 = at(ax.lo, ay.lo, az.lo) * (1 - ax.frac) + at(ax.hi, ay.lo, az.lo) * ax.frac;
        const double c10 = at(ax.lo, ay.hi, az.lo) * (1 - ax.frac) + at(ax.hi, ay.hi, az.lo) * ax.frac;
        const double c01 = at(ax.lo, ay.lo, az.hi) * (1 - ax.frac) + at(ax.hi, ay.lo, az.hi) * ax.frac;
        const double c11 = at(ax.lo, ay.hi, az.hi) * (1 - ax.frac) + at(ax.hi, ay.hi, az.hi) * ax.frac;
        const double c0 = c00 * (1 - ay.frac) + c10 * ay.frac;
        const double c1 = c01 * (1 - ay.frac) + c11 * ay.frac;
        out[o] = static_cast<float>(c0 * (1 - az.frac) + c1 * az.frac);
      }
    }
  }
  return out;
}

}  // namespace nodulenet
