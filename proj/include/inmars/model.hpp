#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "inmars/autodiff.hpp"
#include "inmars/superpixel.hpp"
#include "inmars/tensor.hpp"
#include "json.hpp"

namespace inmars::model {

using superpixel::LabelGrid;
using json = nlohmann::json;

/// Per-pixel cluster ids; kUndefined where no prediction exists (dropped regions).
using SegmentationMask = Grid<std::int32_t>;
inline constexpr std::int32_t kUndefined = -1;

enum class RweStrategy { max, mean, spp, interp };
std::string to_string(RweStrategy s);
RweStrategy parse_rwe(const std::string& s);

struct ModelConfig {
  int in_channels = 3;
  int clusters = 3;  // K: backbone output channels and head output width
  int width = 4;     // channels at full resolution; doubled per level
  int depth = 2;     // down/up levels
  ad::Activation activation = ad::Activation::relu;
  RweStrategy rwe = RweStrategy::spp;
  std::vector<int> spp_levels{1, 2, 4};
  std::array<int, 2> interp_size{8, 8};
  int fc_hidden = 64;

  void validate() const;
  /// Length of the per-region vector fed to the FC head (or the logits for max/mean).
  int feature_length() const;
  bool has_fc_head() const { return rwe == RweStrategy::spp || rwe == RweStrategy::interp; }
  int channels_at(int level) const { return width << level; }

  json to_json() const;
  static ModelConfig from_json(const json& j);
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Trainable parameters of backbone + RWE head.
class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig config);

  /// He-normal weights, zero biases.
  void initialize(std::uint64_t seed);
  /// Zeroes the backbone's 1x1 output layer.
  void zero_output_layer();

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  const Tensor& parameter(const std::string& name) const;
  Tensor& parameter(const std::string& name);
  std::size_t parameter_count() const;
  bool all_finite() const;

 private:
  ModelConfig config_;
  std::vector<NamedTensor> params_;
};

/// Model parameters placed on a graph as leaves.
struct BoundModel {
  const Model* model = nullptr;
  std::vector<ad::Var> params;  // same order as Model::parameters()
  ad::Var get(const std::string& name) const;
};
BoundModel bind(ad::Graph& g, const Model& model, bool requires_grad);

/// Encoder-decoder with skip connections: (c,h,w) -> (K,h,w). h and w must be divisible by 2^depth.
ad::Var backbone_forward(ad::Graph& g, const BoundModel& m, ad::Var image);
Tensor backbone_forward(const Model& model, const Tensor& image);

// ---- region-wise embedding ------------------------------------------------------

/// Fixed-length rows for the regions that kept at least one valid pixel.
struct RegionEmbeddings {
  Tensor rows;                   // (R_kept, F)
  std::vector<int> region_ids;   // LabelGrid id of each row
  std::vector<int> dropped;      // regions with no valid pixel
};

/// A region read-out as a sparse linear map of the (c,h,w) embedding.
struct RegionPlan {
  ad::SparsePlan plan;
  std::vector<int> region_ids;
  std::vector<int> dropped;
};

enum class PoolStrategy { max, mean };

/// Sub-region max/mean pooling over member pixels that are valid.
RegionPlan pool_plan(const Tensor& emb, const LabelGrid& regions, const Mask& valid, PoolStrategy strategy);
/// Masked spatial pyramid max-pooling over each region's bounding box.
/// Features are ordered level, channel, bin row, bin column.
RegionPlan spp_plan(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::span<const int> levels);
/// Masked bounding-box crop resized bilinearly (half-pixel centres) to `size`, flattened channel-major.
RegionPlan interp_plan(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::array<int, 2> size);

RegionEmbeddings pool_regions(const Tensor& emb, const LabelGrid& regions, const Mask& valid, PoolStrategy strategy);
RegionEmbeddings spp_features(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::span<const int> levels);
RegionEmbeddings interp_features(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::array<int, 2> size);

/// Two linear layers with a nonlinearity in between.
struct FcHead {
  Tensor w1, b1, w2, b2;
  ad::Activation activation = ad::Activation::relu;
  Tensor apply(const Tensor& features) const;
  static FcHead from_model(const Model& model);
};
RegionEmbeddings spp_embed(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::span<const int> levels,
                           const FcHead& head);
RegionEmbeddings interp_embed(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::array<int, 2> size,
                              const FcHead& head);

/// Region plan for the configured strategy.
RegionPlan region_plan(const ModelConfig& cfg, const Tensor& emb, const LabelGrid& regions, const Mask& valid);

struct RegionLogits {
  ad::Var logits;  // (R_kept, K)
  std::vector<int> region_ids;
  std::vector<int> dropped;
};
/// RWE head on a graph: read-out plan, then the FC head for spp/interp.
RegionLogits region_head(ad::Graph& g, const BoundModel& m, ad::Var emb, const LabelGrid& regions, const Mask& valid);

// ---- distributions and masks ------------------------------------------------------

struct RegionDistribution {
  Tensor probs;  // (R, K), rows on the simplex
  std::vector<int> region_ids;
};

RegionDistribution region_softmax(const Tensor& logits, std::vector<int> region_ids = {});

/// Argmax of each pixel's region row, ties to the lowest class; undefined for dropped regions.
SegmentationMask broadcast_labels(const RegionDistribution& dist, const LabelGrid& regions);

/// Per-pixel class probabilities; `defined` is false on pixels of dropped regions.
struct PixelDistribution {
  Tensor probs;  // (K, h, w)
  Mask defined;
};
PixelDistribution broadcast_probs(const RegionDistribution& dist, const LabelGrid& regions);
/// Per-pixel softmax of a (K,h,w) backbone map.
PixelDistribution pixel_softmax(const Tensor& logits);

/// Averages per-pixel probabilities over the scales that define each pixel, then takes the argmax.
SegmentationMask multiscale_fuse(std::span<const PixelDistribution> scales);
/// Per-pixel argmax of a (K,h,w) map, ties to the lowest index.
SegmentationMask argmax_map(const Tensor& map, const Mask* defined = nullptr);

/// Full inference for one image and one superpixel resolution.
RegionDistribution predict_regions(const Model& model, const Tensor& image, const Mask& valid, const LabelGrid& regions);

// ---- checkpoints ---------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

/// Text header (magic + version + JSON with architecture, entry table and optional
/// training state) followed by a flat little-endian float64 blob.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const json& train_state = json::object());
struct LoadedCheckpoint {
  Model model;
  json train_state;
  std::vector<NamedTensor> extra;  // optimiser moments etc.
};
void save_checkpoint(const std::filesystem::path& path, const Model& model, const json& train_state,
                     const std::vector<NamedTensor>& extra);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace inmars::model
