#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "inmars/tensor.hpp"

namespace inmars::datasets {

inline constexpr std::int32_t kInvalidLabel = -1;

/// One image with its validity mask and optional ground truth.
/// `image` is (c,h,w) in [0,1]; `gt_labels` holds kInvalidLabel off the valid mask.
struct Sample {
  std::string id;
  Tensor image;
  Mask valid_mask;
  std::optional<Grid<std::int32_t>> gt_labels;

  int channels() const { return image.dim(0); }
  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }
  std::size_t valid_count() const;
};

/// Throws DataError when a sample breaks its invariants.
void validate(const Sample& sample, int class_count = -1);

/// Source label -> coarse label, or invalid.
class ClassMergeMap {
 public:
  ClassMergeMap() = default;
  explicit ClassMergeMap(std::map<std::int32_t, std::int32_t> table) : table_(std::move(table)) {}

  /// Identity over [0, n).
  static ClassMergeMap identity(int n);
  /// Parses lines `src_id -> coarse_id|invalid`; `#` starts a comment.
  static ClassMergeMap parse(const std::string& text);
  static ClassMergeMap load(const std::filesystem::path& path);

  std::string serialize() const;
  /// Throws DataError for ids outside the domain.
  std::int32_t apply(std::int32_t source) const;
  bool contains(std::int32_t source) const { return table_.count(source) != 0; }
  /// Coarse ids reached by the map (excluding invalid).
  std::vector<std::int32_t> image() const;
  const std::map<std::int32_t, std::int32_t>& table() const { return table_; }

 private:
  std::map<std::int32_t, std::int32_t> table_;
};

struct SplitFractions {
  double train = 0.8;
  double tuning = 0.1;
  double eval = 0.1;
};

struct DatasetSpec {
  std::string name;
  int height = 0;
  int width = 0;
  int channels = 3;
  int class_count = 0;
  ClassMergeMap merge_map;
  SplitFractions split;
  std::uint64_t seed = 0;
  /// Optional loader-side resize (bilinear images, nearest labels).
  std::optional<std::array<int, 2>> resize_to;

  /// Checks channels, sizes, fractions and that the merge map covers [0, class_count)
  /// (or maps everything to invalid).
  void validate() const;

  /// Benchmark presets; merge tables come from external mapping files.
  static DatasetSpec potsdam(int class_count, ClassMergeMap merge_map);
  static DatasetSpec coco_stuff(int class_count, ClassMergeMap merge_map);
};

struct SyntheticSpec {
  int class_count = 3;
  int height = 64;
  int width = 64;
  int image_count = 250;
  int blob_min = 1;
  int blob_max = 3;
  /// Ellipse semi-axes as fractions of min(h, w).
  double radius_min = 0.125;
  double radius_max = 1.0 / 3.0;
  /// Per-class RGB means in [0,1]; filled from a default palette when empty.
  std::vector<std::array<double, 3>> class_colors;
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  std::vector<std::array<double, 3>> resolved_colors() const;
  void validate() const;
};

/// Loads `<root>/images/*.png|*.tif` with optional `<root>/labels/<stem>.png`.
/// Labels are remapped through the merge map; invalid-mapped pixels leave the valid mask.
/// Warnings (e.g. a sample with no valid pixel) are appended to `warnings` when given
/// and echoed to stderr otherwise.
std::vector<Sample> load_dataset(const DatasetSpec& spec, const std::filesystem::path& root,
                                 std::vector<std::string>* warnings = nullptr);

/// Deterministic blob images: a background class plus elliptical blobs of other classes.
std::vector<Sample> generate_synthetic(const SyntheticSpec& spec);

/// Writes samples in the loader layout (8-bit PNG images, 8-bit label PNGs, identity mapping file).
void write_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples, int class_count);

struct Partitions {
  std::vector<Sample> train;
  std::vector<Sample> tuning;
  std::vector<Sample> eval;
};

/// Seeded shuffle then cut by the spec's fractions; every partition must be non-empty.
Partitions split(std::vector<Sample> samples, const DatasetSpec& spec);
/// Index form of split(); sizes are (round(f_tune*n), round(f_eval*n)) with train taking the rest.
std::array<std::vector<std::size_t>, 3> split_indices(std::size_t n, const SplitFractions& f, std::uint64_t seed);

/// Bilinear image resize and nearest-neighbour grid resize.
Tensor resize_bilinear(const Tensor& image, int height, int width);
template <typename T>
Grid<T> resize_nearest(const Grid<T>& grid, int height, int width) {
  Grid<T> out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(grid.height() - 1, static_cast<int>((y + 0.5) * grid.height() / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(grid.width() - 1, static_cast<int>((x + 0.5) * grid.width() / width));
      out.at(y, x) = grid.at(sy, sx);
    }
  }
  return out;
}

/// Content hash over ids, images, masks and labels.
std::string dataset_hash(const std::vector<Sample>& samples);

}  // namespace inmars::datasets
