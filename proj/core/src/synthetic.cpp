#include "nodulenet/synthetic.hpp"

#include <algorithm>
#include <cstdio>

#include "nodulenet/error.hpp"
#include "nodulenet/parallel.hpp"

namespace nodulenet {

namespace {

std::string numbered(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05d", prefix, i);
  return buf;
}

double to_hu(double level, const NormalizationParams& w) {
  return w.a_min + (level - w.b_min) / (w.b_max - w.b_min) * (w.a_max - w.a_min);
}

}  // namespace

std::vector<SuspicionLevel> ratings_with_median(SuspicionLevel target, RngStream& rng) {
  const int t = code_of(target);
  const int n = 1 + static_cast<int>(rng.index(4));
  const int mid = n / 2;
  std::vector<SuspicionLevel> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int code = t;
    if (i < mid) code = std::max(0, t - static_cast<int>(rng.index(2)));
    if (i > mid) code = std::min(kSuspicionLevels - 1, t + static_cast<int>(rng.index(2)));
    out[static_cast<std::size_t>(i)] = suspicion_from_code(code);
  }
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.index(i)]);
  return out;
}

SyntheticDataset make_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.count < 1 || spec.patients < 1) throw ValidationError("synthetic count and patients must be positive");
  if (spec.radius_min < 1 || spec.radius_max < spec.radius_min) throw ValidationError("bad synthetic radius range");
  const int min_dim = std::min({spec.dims.nx, spec.dims.ny, spec.dims.nz});
  if (2 * spec.radius_max + 3 > min_dim) throw ValidationError("synthetic volume too small for the sphere size");

  SyntheticDataset ds;
  ds.volumes.resize(static_cast<std::size_t>(spec.count));
  ds.records.resize(static_cast<std::size_t>(spec.count));
  const RngStream root(spec.seed);
  parallel_for(static_cast<std::size_t>(spec.count), [&](std::size_t i) {
    RngStream rng = root.fork(i);
    const bool positive = rng.uniform() < spec.positive_fraction;
    const int r = spec.radius_min + static_cast<int>(rng.index(static_cast<std::uint64_t>(spec.radius_max - spec.radius_min + 1)));
    std::array<int, 3> c{};
    const std::array<int, 3> n{spec.dims.nx, spec.dims.ny, spec.dims.nz};
    for (int a = 0; a < 3; ++a) {
      // Keep the whole sphere and a one-voxel margin inside the volume.
      c[a] = r + 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(n[a] - 2 * r - 2)));
    }
    const double level = positive ? spec.positive_level : spec.negative_level;

    CtVolume& v = ds.volumes[i];
    v.dims = spec.dims;
    v.spacing = kCanonicalSpacing;
    v.patient_id = numbered("patient-", static_cast<int>(i % static_cast<std::size_t>(spec.patients)));
    v.scan_id = numbered("scan-", static_cast<int>(i));
    v.voxels.resize(spec.dims.count());
    RngStream noise = rng.fork(1);
    for (int z = 0; z < n[2]; ++z) {
      for (int y = 0; y < n[1]; ++y) {
        for (int x = 0; x < n[0]; ++x) {
          const int dx = x - c[0], dy = y - c[1], dz = z - c[2];
          const bool inside = dx * dx + dy * dy + dz * dz <= r * r;
          const double value = (inside ? level : spec.background) + spec.noise_sigma * noise.normal();
          v.at(x, y, z) = static_cast<float>(to_hu(value, spec.window));
        }
      }
    }

    NoduleRecord& rec = ds.records[i];
    rec.patient_id = v.patient_id;
    rec.scan_id = v.scan_id;
    rec.nodule_id = numbered("nodule-", static_cast<int>(i));
    rec.bbox = BoundingBox::from({c[0] - r, c[1] - r, c[2] - r}, {c[0] + r + 1, c[1] + r + 1, c[2] + r + 1});
    RngStream label_rng = rng.fork(2);
    const SuspicionLevel target = positive
        ? (label_rng.bernoulli(0.5) ? SuspicionLevel::HighlySuspicious : SuspicionLevel::ModeratelySuspicious)
        : (label_rng.bernoulli(0.5) ? SuspicionLevel::HighlyUnlikely : SuspicionLevel::ModeratelyUnlikely);
    rec.annotator_labels = ratings_with_median(target, label_rng);
  });
  return ds;
}

void save_synthetic_dataset(const SyntheticDataset& ds, const std::filesystem::path& volumes_dir,
                            const std::filesystem::path& manifest) {
  std::filesystem::create_directories(volumes_dir);
  for (const auto& v : ds.volumes) save_volume(v, volumes_dir / (v.scan_id + ".raw"));
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  save_manifest(ds.records, manifest);
}

std::vector<NoduleRecord> make_cohort_manifest(std::uint64_t seed, int patients) {
  if (patients < 1) throw ValidationError("patients must be positive");
  std::vector<SuspicionLevel> levels;
  for (int code = 0; code < kSuspicionLevels; ++code) {
    levels.insert(levels.end(), static_cast<std::size_t>(kCohortClassCounts[static_cast<std::size_t>(code)]),
                  suspicion_from_code(code));
  }
  RngStream rng(seed);
  for (std::size_t i = levels.size(); i > 1; --i) std::swap(levels[i - 1], levels[rng.index(i)]);

  std::vector<NoduleRecord> out(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    NoduleRecord& r = out[i];
    // The first `patients` nodules seed one patient each; the rest land on
    // random patients.
    const int patient = i < static_cast<std::size_t>(patients) ? static_cast<int>(i)
                                                                : static_cast<int>(rng.index(static_cast<std::uint64_t>(patients)));
    r.patient_id = numbered("patient-", patient);
    r.scan_id = numbered("scan-", patient);
    r.nodule_id = numbered("nodule-", static_cast<int>(i));
    const int side = 3 + static_cast<int>(rng.index(30));
    const std::array<int, 3> lo{static_cast<int>(rng.index(480)), static_cast<int>(rng.index(480)),
                                static_cast<int>(rng.index(200))};
    r.bbox = BoundingBox::from(lo, {lo[0] + side, lo[1] + side, lo[2] + std::max(2, side / 2)});
    r.annotator_labels = ratings_with_median(levels[i], rng);
  }
  return out;
}

}  // namespace nodulenet
