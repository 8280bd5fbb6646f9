#include "nodulenet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "nodulenet/error.hpp"

namespace nodulenet {

namespace {

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

}  // namespace

void AugmentConfig::validate() const {
  if (!jitter.valid()) throw ValidationError("jitter alpha_max < alpha_min");
  const double probs[] = {mask_dropout_p, flip_p[0], flip_p[1], flip_p[2], rot90_p, zoom_p, noise_p, smooth_p};
  for (double p : probs) {
    if (!is_probability(p)) throw ValidationError("augmentation probability outside [0, 1]");
  }
  if (!(zoom_lo > 0.0 && zoom_lo <= zoom_hi)) throw ValidationError("zoom range must satisfy 0 < lo <= hi");
  if (noise_sigma_max < 0.0) throw ValidationError("noise_sigma_max must be non-negative");
  if (!(smooth_sigma_lo >= 0.0 && smooth_sigma_lo <= smooth_sigma_hi)) throw ValidationError("bad smoothing sigma range");
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.jitter_enabled = false;
  c.jitter = {0.0, 0.0};
  c.mask_dropout_p = 0.0;
  c.flip_p = {0.0, 0.0, 0.0};
  c.rot90_p = 0.0;
  c.zoom_p = 0.0;
  c.noise_p = 0.0;
  c.smooth_p = 0.0;
  return c;
}

JitterTrace jitter_box_traced(const BoundingBox& b, GridDims volume, const JitterConfig& cfg, RngStream& rng) {
  if (!b.valid()) throw ValidationError("degenerate bbox");
  if (!cfg.valid()) throw ValidationError("jitter alpha_max < alpha_min");
  const std::array<int, 3> extent{volume.nx, volume.ny, volume.nz};
  const auto len = b.lengths();
  const auto lo = b.lo();

  JitterTrace t;
  std::array<int, 3> new_lo{};
  for (int a = 0; a < 3; ++a) {
    if (len[a] > extent[a]) throw ValidationError("bbox larger than volume; cannot jitter");
    const double delta = rng.uniform(len[a] * cfg.alpha_min, len[a] * cfg.alpha_max);
    t.raw_delta[a] = delta;
    int shifted = lo[a] + static_cast<int>(std::lround(delta));
    shifted = std::clamp(shifted, 0, extent[a] - len[a]);
    new_lo[a] = shifted;
    t.applied[a] = shifted - lo[a];
  }
  t.box = b.translated(t.applied);
  return t;
}

BoundingBox jitter_box(const BoundingBox& b, GridDims volume, const JitterConfig& cfg, RngStream& rng) {
  return jitter_box_traced(b, volume, cfg, rng).box;
}

bool mask_dropout(Patch& p, double prob, RngStream& rng) {
  if (!rng.bernoulli(prob)) return false;
  std::fill(p.channel(1), p.channel(1) + p.channel_size(), 0.0f);
  return true;
}

void flip_patch(Patch& p, int axis) {
  if (axis < 0 || axis > 2) throw ValidationError("flip axis must be 0, 1 or 2");
  const GridDims d = p.dims();
  const int e = p.edge;
  for (int c = 0; c < 2; ++c) {
    float* ch = p.channel(c);
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y) {
        if (axis == 0) {
          std::reverse(ch + d.index(0, y, z), ch + d.index(0, y, z) + e);
        } else if (axis == 1 && y < e / 2) {
          std::swap_ranges(ch + d.index(0, y, z), ch + d.index(0, y, z) + e, ch + d.index(0, e - 1 - y, z));
        } else if (axis == 2 && z < e / 2) {
          std::swap_ranges(ch + d.index(0, y, z), ch + d.index(0, y, z) + e, ch + d.index(0, y, e - 1 - z));
        }
      }
  }
}

void rot90_xy(Patch& p, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return;
  const GridDims d = p.dims();
  const int e = p.edge;
  std::vector<float> plane(static_cast<std::size_t>(e) * e);
  for (int c = 0; c < 2; ++c) {
    float* ch = p.channel(c);
    for (int z = 0; z < d.nz; ++z) {
      float* slab = ch + d.index(0, 0, z);
      std::copy(slab, slab + plane.size(), plane.begin());
      for (int y = 0; y < e; ++y)
        for (int x = 0; x < e; ++x) {
          // out(x, y) = in(rotate^-1(x, y))
          int sx = x, sy = y;
          switch (k) {
            case 1: sx = y; sy = e - 1 - x; break;
            case 2: sx = e - 1 - x; sy = e - 1 - y; break;
            case 3: sx = e - 1 - y; sy = x; break;
          }
          slab[static_cast<std::size_t>(y) * e + x] = plane[static_cast<std::size_t>(sy) * e + sx];
        }
    }
  }
}

void zoom_patch(Patch& p, double scale) {
  if (!(scale > 0.0)) throw ValidationError("zoom scale must be positive");
  const GridDims d = p.dims();
  // Output voxel i samples the input at c + (i - c) / scale, c = (e - 1) / 2.
  const double inv = 1.0 / scale;
  const double c = (p.edge - 1) / 2.0;
  const double offset = c - (c + 0.5) * inv + 0.5;
  const std::array<double, 3> s{inv, inv, inv};
  const std::array<double, 3> o{offset, offset, offset};

  std::vector<float> image(p.channel(0), p.channel(0) + p.channel_size());
  std::vector<float> support(p.channel_size());
  for (std::size_t i = 0; i < support.size(); ++i) support[i] = p.channel(1)[i] != 0.0f ? 1.0f : 0.0f;

  const auto zi = trilinear_resample(image, d, d, s, o, 0.0f);
  const auto zs = trilinear_resample(support, d, d, s, o, 0.0f);
  std::copy(zi.begin(), zi.end(), p.channel(0));
  float* mask = p.channel(1);
  for (std::size_t i = 0; i < zs.size(); ++i) mask[i] = zs[i] >= 0.5f ? zi[i] : 0.0f;
}

void geometric_augs(Patch& p, const AugmentConfig& cfg, RngStream& rng) {
  for (int axis = 0; axis < 3; ++axis) {
    if (rng.bernoulli(cfg.flip_p[static_cast<std::size_t>(axis)])) flip_patch(p, axis);
  }
  if (cfg.rot90_xy && rng.bernoulli(cfg.rot90_p)) rot90_xy(p, 1 + static_cast<int>(rng.index(3)));
  if (rng.bernoulli(cfg.zoom_p)) zoom_patch(p, rng.uniform(cfg.zoom_lo, cfg.zoom_hi));
}

void add_gaussian_noise(std::span<float> values, double sigma, RngStream& rng) {
  for (float& v : values) v = static_cast<float>(v + sigma * rng.normal());
}

void gaussian_smooth(std::span<float> channel, int edge, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (double& w : kernel) w /= total;

  const GridDims d{edge, edge, edge};
  std::vector<float> line(static_cast<std::size_t>(edge));
  const std::size_t strides[3] = {1, static_cast<std::size_t>(edge), static_cast<std::size_t>(edge) * edge};
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t stride = strides[axis];
    for (int b = 0; b < edge; ++b)
      for (int a = 0; a < edge; ++a) {
        // Start of the line along `axis` through the other two coordinates.
        std::size_t base = 0;
        if (axis == 0) base = d.index(0, a, b);
        if (axis == 1) base = d.index(a, 0, b);
        if (axis == 2) base = d.index(a, b, 0);
        for (int i = 0; i < edge; ++i) line[static_cast<std::size_t>(i)] = channel[base + i * stride];
        for (int i = 0; i < edge; ++i) {
          double acc = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            const int j = std::clamp(i + k, 0, edge - 1);
            acc += kernel[static_cast<std::size_t>(k + radius)] * line[static_cast<std::size_t>(j)];
          }
          channel[base + i * stride] = static_cast<float>(acc);
        }
      }
  }
}

void resync_mask(Patch& p) {
  const float* image = p.channel(0);
  float* mask = p.channel(1);
  for (std::size_t i = 0; i < p.channel_size(); ++i) mask[i] = mask[i] != 0.0f ? image[i] : 0.0f;
}

void intensity_augs(Patch& p, const AugmentConfig& cfg, RngStream& rng) {
  std::span<float> image(p.channel(0), p.channel_size());
  const bool noise = rng.bernoulli(cfg.noise_p);
  const double noise_sigma = rng.uniform(0.0, cfg.noise_sigma_max);
  const bool smooth = rng.bernoulli(cfg.smooth_p);
  const double smooth_sigma = rng.uniform(cfg.smooth_sigma_lo, cfg.smooth_sigma_hi);
  if (!noise && !smooth) return;
  if (noise && noise_sigma > 0.0) add_gaussian_noise(image, noise_sigma, rng);
  if (smooth) gaussian_smooth(image, p.edge, smooth_sigma);
  for (float& v : image) v = std::clamp(v, 0.0f, 1.0f);
  resync_mask(p);
}

}  // namespace nodulenet
