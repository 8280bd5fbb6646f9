#pragma once

#include <array>
#include <span>

#include "nodulenet/cropping.hpp"
#include "nodulenet/rng.hpp"

namespace nodulenet {

/// Per-axis bounds for box jittering, as fractions of the box side length.
struct JitterConfig {
  double alpha_min = -0.75;
  double alpha_max = 0.75;

  bool valid() const { return alpha_max >= alpha_min; }
};

struct AugmentConfig {
  JitterConfig jitter;
  bool jitter_enabled = true;
  double mask_dropout_p = 0.5;

  std::array<double, 3> flip_p{0.5, 0.5, 0.5};  // X, Y, Z
  bool rot90_xy = true;
  double rot90_p = 0.5;

  double zoom_p = 0.2;
  double zoom_lo = 0.9;
  double zoom_hi = 1.1;

  double noise_p = 0.2;
  double noise_sigma_max = 0.05;

  double smooth_p = 0.2;
  double smooth_sigma_lo = 0.5;
  double smooth_sigma_hi = 1.0;

  void validate() const;

  /// Everything off; handy as a baseline in tests.
  static AugmentConfig none();
};

struct JitterTrace {
  BoundingBox box;
  std::array<double, 3> raw_delta{};  // before rounding
  std::array<int, 3> applied{};       // after rounding and clamping
};

/// Shifts the whole box by delta_i ~ U(L_i * alpha_min, L_i * alpha_max)
/// per axis (rounded to nearest, ties away from zero), then translates it
/// back inside [0, dims) without changing its size.
BoundingBox jitter_box(const BoundingBox& b, GridDims volume, const JitterConfig& cfg, RngStream& rng);
JitterTrace jitter_box_traced(const BoundingBox& b, GridDims volume, const JitterConfig& cfg, RngStream& rng);

/// With probability `prob`, zeroes the mask channel. The image channel is
/// never touched. Returns whether the channel was dropped.
bool mask_dropout(Patch& p, double prob, RngStream& rng);

// Geometric primitives; both channels move together.
void flip_patch(Patch& p, int axis);        // axis 0 = X, 1 = Y, 2 = Z
void rot90_xy(Patch& p, int quarter_turns);  // counter-clockwise in the X-Y plane
void zoom_patch(Patch& p, double scale);     // about the centre, zero outside

/// flip -> rot90 -> zoom, each gated by its own probability.
void geometric_augs(Patch& p, const AugmentConfig& cfg, RngStream& rng);

/// Adds N(0, sigma^2) to every value, no clamping.
void add_gaussian_noise(std::span<float> values, double sigma, RngStream& rng);

/// Separable Gaussian blur of one cubic channel with edge replication.
void gaussian_smooth(std::span<float> channel, int edge, double sigma);

/// Noise and smoothing on the image channel, clamp to [0, 1], then rebuild
/// the mask as image * (mask != 0).
void intensity_augs(Patch& p, const AugmentConfig& cfg, RngStream& rng);

/// Rebuilds channel 1 from channel 0 on the current mask support.
void resync_mask(Patch& p);

}  // namespace nodulenet
