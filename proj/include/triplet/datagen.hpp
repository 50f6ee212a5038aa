#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "triplet/projection.hpp"

namespace triplet::data {

/// Derives an independent stream seed from a master seed and a tag sequence.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags);

struct PhantomConfig {
  std::array<int, 3> size{64, 64, 16};
  /// Organs plus lesions; a third of them (rounded down) are lesions.
  int n_structures = 8;
  double intensity_min = 0.2;
  double intensity_max = 1.0;
  double blur_sigma = 0.8;
};

struct Ellipsoid {
  std::array<double, 3> center{};  // row, col, slice (voxel units)
  std::array<double, 3> axes{};    // semi-axes along the rotated row/col and slice
  double angle = 0.0;              // in-plane rotation, radians
  double intensity = 0.0;
  enum class Kind { Background, Organ, Lesion } kind = Kind::Organ;
};

struct Phantom {
  Tensor volume;  // [N,N,Z], nonnegative
  std::uint64_t seed = 0;
  std::vector<Ellipsoid> structures;  // painting order, background first
};

/// Background ellipsoid, interior organs and small hot lesions, painted in
/// that order and smoothed with a separable Gaussian. Organ intensities are
/// uniform over the configured range, the background over its lowest quarter
/// and lesions over its top quarter. Throws when N or Z is below 8.
Phantom generate_phantom(const PhantomConfig& cfg, std::uint64_t seed);

enum class Normalization { MinMax, ZScore };
Normalization parse_normalization(const std::string& name);
std::string to_string(Normalization n);

/// Order statistics used for the clamp: the low bound rounds its rank down
/// and the high bound rounds up, so a clamped volume maps to itself.
std::pair<float, float> percentile_bounds(const Tensor& volume, double lo = 0.05, double hi = 0.95);

/// Clamps to the [5th, 95th] percentile, then rescales to [0,1] (MinMax) or
/// to zero mean and unit variance (ZScore). A constant volume yields zeros.
Tensor preprocess(const Tensor& volume, Normalization mode = Normalization::MinMax);

struct Patch {
  std::array<std::int64_t, 3> origin{};
  Tensor data;
};

/// Patches of the given extent whose origins are chosen to cover voxels
/// above threshold * max. Each new patch is placed around a still-uncovered
/// active voxel; once all are covered, around any active voxel. Patches may
/// overlap. Throws when a patch extent exceeds the volume.
std::vector<Patch> extract_patches(const Tensor& volume, std::array<std::int64_t, 3> patch, int n_patches,
                                   double threshold, std::uint64_t seed);

/// Fraction of voxels above threshold * max that lie in at least one patch.
double patch_coverage(const Tensor& volume, std::array<std::int64_t, 3> patch,
                      const std::vector<std::array<std::int64_t, 3>>& origins, double threshold);

enum class Reconstructor { Fbp, Osem };
Reconstructor parse_reconstructor(const std::string& name);
std::string to_string(Reconstructor r);

struct PairOptions {
  projection::Geometry geometry;
  double dose = 0.1;
  /// Expected counts per unit of sinogram value at full dose.
  double count_scale = 20.0;
  Reconstructor reconstructor = Reconstructor::Fbp;
  projection::Filter filter = projection::Filter::Hann;
  int osem_iterations = 5;
  int osem_subsets = 4;
};

struct SamplePair {
  Tensor s_std, s_low;  // [A, bins, Z]
  Tensor i_std, i_low;  // [N, N, Z]
};

Tensor reconstruct(const Tensor& sinogram, const PairOptions& opt);

/// s_std = forward_project(patch); s_low is its Poisson resampling at the
/// given dose; both images come from the same reconstructor.
SamplePair make_pair(const Tensor& patch, const PairOptions& opt, std::uint64_t seed);

/// Fold id per phantom: a seeded shuffle dealt round-robin, so fold sizes
/// differ by at most one. Throws when n_phantoms < k or k < 1.
std::vector<int> split_folds(int n_phantoms, int k, std::uint64_t seed);

/// Single-split fallback: true marks the ~20% of phantoms held out for test.
std::vector<bool> holdout_split(int n_phantoms, std::uint64_t seed, double test_fraction = 0.2);

struct DatasetConfig {
  PhantomConfig phantom;
  int n_phantoms = 20;
  std::array<int, 3> patch{32, 32, 16};
  int patches_per_phantom = 8;
  double activity_threshold = 0.3;
  Normalization normalization = Normalization::MinMax;
  int n_angles = 32;
  double dose = 0.1;
  double count_scale = 20.0;
  Reconstructor reconstructor = Reconstructor::Fbp;
  projection::Filter filter = projection::Filter::Hann;
  int osem_iterations = 5;
  int osem_subsets = 4;
  int folds = 5;

  projection::Geometry geometry() const;
  PairOptions pair_options() const;
};
void to_json(nlohmann::json& j, const PhantomConfig& c);
void from_json(const nlohmann::json& j, PhantomConfig& c);
void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct Sample {
  int phantom_id = 0;
  int patch_id = 0;
  std::array<std::int64_t, 3> origin{};
  SamplePair pair;
};

struct Dataset {
  DatasetConfig config;
  std::uint64_t seed = 0;
  std::vector<int> phantom_fold;  // fold id per phantom (all 0 when folds = 1)
  std::vector<Sample> samples;

  int fold_of(const Sample& s) const { return phantom_fold.at(static_cast<std::size_t>(s.phantom_id)); }
};

/// Generates, preprocesses, patches and pairs every phantom. Phantom p uses
/// derive_seed(seed, {p}) so results do not depend on generation order.
Dataset build_dataset(const DatasetConfig& cfg, std::uint64_t seed);

/// 16-hex-digit FNV-1a of the config's canonical JSON.
std::string config_hash(const nlohmann::json& j);

/// Writes <dir>/<phantom>/<patch>/{s_std,s_low,i_std,i_low}.tnsr and
/// <dir>/manifest.json.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
/// Throws std::runtime_error when the manifest is missing or inconsistent.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace triplet::data
