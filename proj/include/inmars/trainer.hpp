#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "inmars/datasets.hpp"
#include "inmars/model.hpp"
#include "inmars/objective.hpp"
#include "inmars/superpixel.hpp"
#include "json.hpp"

namespace inmars::trainer {

using json = nlohmann::json;

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  int epochs = 100;
  double lr_init = 1e-5;
  double alpha = 0.96;
  double gamma_start = 1.0;
  double gamma_end = 0.1;
  int batch_size = 8;
  AdamParams adam;
  objective::MIHyper hyper;
  objective::AffineParams affine;
  objective::RegularizerWeights weights;
  model::ModelConfig model;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 keeps only the final checkpoint

  void validate() const;
  json to_json() const;
  static TrainConfig from_json(const json& j);
};

/// alpha^i * lr_init.
double lr_schedule(int epoch, const TrainConfig& cfg);
/// Linear from gamma_start at epoch 0 to gamma_end at epoch epochs-1.
double gamma_schedule(int epoch, const TrainConfig& cfg);

class Adam {
 public:
  Adam() = default;
  Adam(const model::Model& model, AdamParams params);

  void step(model::Model& model, const std::vector<Tensor>& grads, double lr);
  long steps() const { return t_; }

  /// Moments as named tensors for checkpointing, and their inverse.
  std::vector<model::NamedTensor> state() const;
  void restore(const std::vector<model::NamedTensor>& state, long steps);

 private:
  AdamParams params_;
  std::vector<std::string> names_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

struct StepRecord {
  long step = 0;
  int epoch = 0;
  objective::LossTerms terms;
};

struct EpochRecord {
  int epoch = 0;
  objective::LossTerms mean;
  double lr = 0;
  double gamma = 0;
  double seconds = 0;
};

struct TrainLog {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;

  static std::string csv_header();
  static std::string csv_row(const StepRecord& r);
  std::string steps_csv() const;
  std::string epochs_csv() const;
};

/// Everything needed to continue training from an epoch boundary.
struct TrainState {
  model::Model model;
  Adam adam;
  int epochs_done = 0;
  long step = 0;
};

TrainState initial_state(const TrainConfig& cfg);

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> step_log;  // CSV appended as steps complete
  /// Stop after this many total epochs (for interrupted runs); defaults to cfg.epochs.
  std::optional<int> stop_after;
  std::function<void(const EpochRecord&, const TrainState&)> on_epoch;
};

struct TrainResult {
  TrainState state;
  TrainLog log;
};

/// Trains on `samples` with one label grid per sample at the training resolution.
/// Starts from `resume` when given.
TrainResult train(const TrainConfig& cfg, const std::vector<datasets::Sample>& samples,
                  const std::vector<superpixel::LabelGrid>& regions, const TrainOptions& options = {},
                  std::optional<TrainState> resume = std::nullopt);

/// One optimisation step on the given batch; exposed for tests.
objective::LossTerms train_step(TrainState& state, const TrainConfig& cfg, const std::vector<const datasets::Sample*>& batch,
                                const std::vector<const superpixel::LabelGrid*>& regions, int epoch);

/// Epoch-ordered sample indices.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

void save_state(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg);
TrainState load_state(const std::filesystem::path& path, TrainConfig* cfg = nullptr);

}  // namespace inmars::trainer
