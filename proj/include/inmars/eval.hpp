#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "inmars/datasets.hpp"
#include "inmars/io.hpp"
#include "inmars/model.hpp"
#include "inmars/superpixel.hpp"

namespace inmars::eval {

/// K x N_gt pixel counts: rows are predicted clusters, columns ground-truth classes.
class ConfusionMatrix {
 public:
  ConfusionMatrix(int clusters, int classes);
  static ConfusionMatrix from_rows(const std::vector<std::vector<std::int64_t>>& rows);

  int clusters() const { return k_; }
  int classes() const { return n_; }
  std::int64_t& at(int cluster, int cls) { return counts_[static_cast<std::size_t>(cluster) * n_ + cls]; }
  std::int64_t at(int cluster, int cls) const { return counts_[static_cast<std::size_t>(cluster) * n_ + cls]; }
  std::int64_t total() const;

  /// Counts valid pixels with a defined prediction. Returns how many were added.
  std::int64_t add(const model::SegmentationMask& pred, const Grid<std::int32_t>& gt, const Mask& valid);
  void merge(const ConfusionMatrix& other);

 private:
  int k_, n_;
  std::vector<std::int64_t> counts_;
};

inline constexpr int kUnmatched = -1;

struct MappingResult {
  std::vector<int> cluster_to_class;  // kUnmatched for clusters left over when K > N_gt
  std::int64_t matched = 0;
  double acc = 0;
};

/// Maximum-weight one-to-one assignment on a square cost matrix; returns col of each row.
std::vector<int> hungarian_max(const std::vector<std::vector<std::int64_t>>& weights);

/// Best one-to-one mapping. Among optimal mappings the lexicographically smallest
/// cluster_to_class wins, with an unmatched cluster ordered after every class.
MappingResult best_mapping(const ConfusionMatrix& cm);

/// Recall of each class under the mapping; NaN for classes with no pixels.
std::vector<double> per_class_recall(const ConfusionMatrix& cm, const MappingResult& m);

enum class Variant { b, standard, plus };
std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

/// Superpixel access for the region variants.
struct RegionSource {
  const superpixel::CacheManifest* manifest = nullptr;
  superpixel::SlicParams base;  // n_segments is overridden per resolution
  int class_count = 0;          // N_gt; sets the resolutions
};

/// Per-pixel prediction of one variant, undefined off the valid mask.
model::SegmentationMask predict(Variant v, const model::Model& model, const datasets::Sample& sample,
                                const RegionSource& regions);
model::SegmentationMask predict_with_grids(Variant v, const model::Model& model, const datasets::Sample& sample,
                                           const std::vector<superpixel::LabelGrid>& grids);

/// Label grids a variant needs, loaded from the cache; a missing resolution is a ConfigError.
std::vector<superpixel::LabelGrid> grids_for(Variant v, const datasets::Sample& sample, const RegionSource& regions);

struct EvalReport {
  Variant variant = Variant::standard;
  ConfusionMatrix confusion{1, 1};
  MappingResult mapping;
  std::vector<double> recall;
  std::vector<std::string> sample_ids;
  std::vector<model::SegmentationMask> masks;

  std::string to_text() const;
};

/// Global mapping over the whole set; invalid pixels never enter the confusion matrix.
EvalReport evaluate(Variant v, const model::Model& model, const std::vector<datasets::Sample>& samples,
                    const RegionSource& regions, int class_count, bool keep_masks = false);

/// Fixed bright palette (index 0..) then golden-angle hues; never near black.
std::array<std::uint8_t, 3> palette_color(int index);
std::vector<std::array<std::uint8_t, 3>> default_palette(int n);

/// Colour rendering of a mask; undefined pixels are black.
io::Rgb8Image render_mask(const model::SegmentationMask& mask, const std::vector<std::array<std::uint8_t, 3>>& palette);
/// Inverse of render_mask; black decodes to kUndefined. Throws DataError on unknown colours.
model::SegmentationMask decode_mask(const io::Rgb8Image& image, const std::vector<std::array<std::uint8_t, 3>>& palette);

/// Writes `<dir>/<id>.png` (8-bit ids, 255 undefined) and `<dir>/<id>_color.png`.
void write_masks(const std::filesystem::path& dir, const std::vector<std::string>& ids,
                 const std::vector<model::SegmentationMask>& masks, int palette_size);
void write_label_mask(const std::filesystem::path& path, const model::SegmentationMask& mask);

}  // namespace inmars::eval
