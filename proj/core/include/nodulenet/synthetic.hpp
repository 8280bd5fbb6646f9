#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "nodulenet/annotations.hpp"
#include "nodulenet/rng.hpp"
#include "nodulenet/volume.hpp"

namespace nodulenet {

/// Sphere-in-noise volumes for end-to-end sanity runs. Positives get a bright
/// sphere, negatives a faint one of the same size range; levels are in
/// normalized units and converted to HU through `window`.
struct SyntheticSpec {
  int count = 400;
  int patients = 200;
  GridDims dims{64, 64, 64};
  double background = 0.2;
  double negative_level = 0.45;
  double positive_level = 0.75;
  double noise_sigma = 0.05;
  int radius_min = 5;
  int radius_max = 8;
  double positive_fraction = 0.5;
  NormalizationParams window;
  std::uint64_t seed = 0;
};

struct SyntheticDataset {
  std::vector<CtVolume> volumes;  // raw HU at canonical spacing, one nodule each
  std::vector<NoduleRecord> records;
};

SyntheticDataset make_synthetic_dataset(const SyntheticSpec& spec);

/// Writes `<scan_id>.raw` plus sidecar per volume into `volumes_dir` and the
/// manifest JSON to `manifest`.
void save_synthetic_dataset(const SyntheticDataset& ds, const std::filesystem::path& volumes_dir,
                            const std::filesystem::path& manifest);

/// 1-4 annotator ratings whose aggregate is exactly `target`.
std::vector<SuspicionLevel> ratings_with_median(SuspicionLevel target, RngStream& rng);

/// Nodule counts per level (HU, MU, I, MS, HS) of the reference cohort.
inline constexpr std::array<int, 5> kCohortClassCounts{312, 532, 1177, 332, 172};

/// Manifest with the reference cohort's aggregated class counts, random
/// boxes and `patients` patients (one scan each).
std::vector<NoduleRecord> make_cohort_manifest(std::uint64_t seed, int patients = 875);

}  // namespace nodulenet
