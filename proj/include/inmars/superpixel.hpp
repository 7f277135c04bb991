#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "inmars/datasets.hpp"
#include "inmars/tensor.hpp"

namespace inmars::superpixel {

/// How orphaned or excess regions pick the neighbour they are merged into.
enum class MergeRule { nearest_mean, largest };

struct SlicParams {
  int n_segments = 6;
  double compactness = 5.0;
  int max_iters = 10;
  double min_region_fraction = 0.25;
  std::uint64_t seed = 0;
  MergeRule merge_rule = MergeRule::nearest_mean;

  void validate() const;
};

std::string to_string(MergeRule rule);
MergeRule parse_merge_rule(const std::string& s);

/// Partition of an image into R regions with ids 0..R-1, each 4-connected.
struct LabelGrid {
  Grid<std::int32_t> labels;
  int region_count = 0;

  int height() const { return labels.height(); }
  int width() const { return labels.width(); }
  bool operator==(const LabelGrid&) const = default;

  /// Builds from raw ids, checking the partition invariants (not connectivity).
  static LabelGrid from_labels(Grid<std::int32_t> labels);
};

/// Throws DataError if ids are not contiguous or a region is not 4-connected.
void check_partition(const LabelGrid& grid);
bool is_four_connected(const LabelGrid& grid);

/// Per-pixel SLIC features: CIELAB for RGB, L for one channel, IR*100 appended for 4 channels.
Tensor slic_features(const Tensor& image);

/// Initial cluster-centre grid: rows x cols with rows*cols == n_segments, aspect closest to h/w.
/// When no such factorisation fits inside the image, the product closest to n_segments is used.
std::pair<int, int> seed_grid(int height, int width, int n_segments);

/// k-means in joint (colour, position) space with windowed search, followed by
/// connectivity enforcement (orphans merged into a neighbour, region count capped
/// at 2*n_segments).
LabelGrid slic_segment(const Tensor& image, const SlicParams& params);

/// Relabels connected components and merges small/excess regions; exposed for tests.
/// With `features` ([F,H,W]) a region joins the neighbour whose mean feature is closest
/// (ties to the larger); without, it joins the largest neighbour.
LabelGrid enforce_connectivity(const Grid<std::int32_t>& assignment, int n_segments, double min_region_fraction,
                               const Tensor* features = nullptr);

/// [N, 2N, N^2] deduplicated, ascending.
std::vector<int> resolution_set(int class_count);

struct CacheEntry {
  std::string sample_id;
  int n_segments = 0;
  std::filesystem::path path;
  std::string sha256;
};

struct CacheManifest {
  std::filesystem::path root;
  std::vector<CacheEntry> entries;
  int written = 0;
  int reused = 0;

  const CacheEntry* find(const std::string& sample_id, int n_segments) const;
  /// Hash of the manifest file contents.
  std::string hash() const;
};

inline constexpr const char* kManifestName = "manifest.tsv";

/// Computes (or reuses) one 16-bit PNG label grid per (sample, params) under `cache_dir`.
/// Existing files whose hash matches the manifest are kept; missing or corrupt ones are rebuilt.
CacheManifest cache_superpixels(const std::vector<datasets::Sample>& samples, const std::vector<SlicParams>& params,
                                const std::filesystem::path& cache_dir);

/// Reads the manifest written by cache_superpixels. Throws MissingPrerequisite if absent.
CacheManifest load_manifest(const std::filesystem::path& cache_dir);

/// File name used for a (sample, params) entry; depends on the image content and parameters.
std::string cache_file_name(const datasets::Sample& sample, const SlicParams& params);

/// Loads the label grid for a sample at `params`, verifying its hash.
LabelGrid load_cached(const CacheManifest& manifest, const datasets::Sample& sample, const SlicParams& params);

LabelGrid read_label_grid(const std::filesystem::path& path);

}  // namespace inmars::superpixel
