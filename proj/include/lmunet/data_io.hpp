#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "lmunet/tensor.hpp"
#include "lmunet/train.hpp"

namespace lmunet::data {

// ---- tensor files ---------------------------------------------------------

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, LabelMap>;

template <typename T>
void save_tensor(const Tensor<T>& t, const std::filesystem::path& path);

/// Any supported dtype; bad magic, rank > 8 or truncation -> LoadError.
AnyTensor load_tensor_any(const std::filesystem::path& path);

/// Typed load; a dtype other than T -> LoadError.
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

inline constexpr std::size_t kMaxTensorRank = 8;

// ---- preprocessing --------------------------------------------------------

/// Per-sample z-score over all elements; a constant image maps to zeros.
template <typename T>
Tensor<T> znorm(const Tensor<T>& image);

/// Linear interpolation of a channel-first image (C, spatial...) to `extents`,
/// half-pixel aligned with edge clamping, for any scale factor.
template <typename T>
Tensor<T> resize_image(const Tensor<T>& image, const Shape& extents);

/// Nearest-neighbour resize of a label map; labels are never blended.
LabelMap resize_mask(const LabelMap& mask, const Shape& extents);

// ---- manifests ------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::string image;  // relative to the manifest directory
  std::string mask;
};

struct DatasetManifest {
  int version = 1;
  int rank = 2;
  std::size_t num_classes = 3;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  std::string split = "all";
  std::filesystem::path root;  // directory holding the manifest (not serialized)

  /// Unique ids, non-empty fields, and (with check_files) existing files.
  void validate(bool check_files = true) const;
};

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Reads every sample, checking image/mask extents and label range.
std::vector<train::Sample> load_dataset(const DatasetManifest& m);

// ---- synthetic data ---------------------------------------------------------

struct SynthSample {
  Tensor<float> image;  // (1, spatial...)
  LabelMap mask;
};

/// Organ (label 1) ellipse/ellipsoid with 0-2 tumours (label 2) inside it over
/// smooth noise. A pure function of (seed, index, extents).
SynthSample synth_sample(std::uint64_t seed, std::size_t index, const Shape& extents, std::size_t num_classes = 3);

/// Writes n samples plus manifest.json under `dir`; returns the manifest.
DatasetManifest synth_generate(std::uint64_t seed, std::size_t n, int rank, const Shape& extents,
                               const std::filesystem::path& dir, std::size_t num_classes = 3);

struct Split {
  DatasetManifest train, val, test;
};

/// Seeded shuffle then contiguous partition by largest-remainder rounding.
Split split(const DatasetManifest& m, std::array<double, 3> ratios, std::uint64_t seed);

}  // namespace lmunet::data
