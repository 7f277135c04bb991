#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "inmars/autodiff.hpp"
#include "inmars/model.hpp"
#include "inmars/rng.hpp"
#include "inmars/superpixel.hpp"

namespace inmars::objective {

/// Floor applied to probabilities inside logarithms.
inline constexpr double kLogFloor = 1e-12;

struct MIHyper {
  double lambda = 4.0;    // MI weight
  double gamma = 1.0;     // marginal-entropy weight (scheduled by the trainer)
  double epsilon = 0.25;  // L2 budget of the adversarial perturbation
  double xi = 1e-2;       // finite-difference probe magnitude for the power iteration
  std::vector<double> prior;  // q over K clusters; empty means uniform

  void validate(int clusters) const;
};

/// Ranges of the random affine draw; every range is symmetric about the identity.
struct AffineParams {
  double scale = 0.1;         // s in [1 - scale, 1 + scale]
  double translate = 0.1;     // fraction of the image size
  double rotate_deg = 15.0;
  double shear = 0.1;

  void validate() const;
  bool is_identity() const { return scale == 0 && translate == 0 && rotate_deg == 0 && shear == 0; }
};

// ---- entropy terms on (N, K) probability rows ------------------------------------

/// -sum p log p with the log floor.
double entropy(std::span<const double> p);
/// Running mean of the rows; identical rows average to themselves exactly.
std::vector<double> row_mean(const Tensor& probs);

/// h of the mean row.
double marginal_entropy(const Tensor& probs);
/// Mean of the per-row entropies.
double conditional_entropy(const Tensor& probs);
/// log K - KL(mean row || q); equals marginal_entropy when q is empty (uniform).
double marginal_prior_term(const Tensor& probs, std::span<const double> prior = {});
/// conditional_entropy - gamma * marginal_prior_term.
double mi_loss(const Tensor& probs, double gamma, std::span<const double> prior = {});
/// Mean over aligned rows of sum_j p log(p / p_t).
double kl_consistency(const Tensor& p, const Tensor& p_t);

ad::Var marginal_prior_term(ad::Graph& g, ad::Var probs, std::span<const double> prior = {});
ad::Var conditional_entropy(ad::Graph& g, ad::Var probs);
ad::Var mi_loss(ad::Graph& g, ad::Var probs, double gamma, std::span<const double> prior = {});
/// Sum over rows of KL(p || p_t); differentiable in both arguments.
ad::Var kl_sum(ad::Graph& g, ad::Var p, ad::Var p_t);
ad::Var kl_consistency(ad::Graph& g, ad::Var p, ad::Var p_t);

// ---- adversarial perturbation ------------------------------------------------------

/// Maps an image node to region probabilities on the caller's graph.
using ForwardFn = std::function<ad::Var(ad::Graph&, ad::Var image)>;

/// One power-iteration step for the KL-maximising perturbation within the L2 ball:
/// random unit d (zero on invalid pixels), gradient of KL(p_clean || f(x + xi d)) w.r.t. d,
/// normalised and scaled to epsilon. Falls back to epsilon * d when the gradient vanishes.
/// The result is a constant: nothing of its construction reaches the model gradient.
Tensor adversarial_perturbation(const ForwardFn& forward, const Tensor& image, const Mask& valid, const Tensor& p_clean,
                                double epsilon, double xi, Rng& rng);

/// Random unit-norm direction of the image's shape, zero on invalid pixels.
Tensor random_direction(const std::vector<int>& shape, const Mask& valid, Rng& rng);

// ---- geometric branch -------------------------------------------------------------------

/// 2x2 linear part and translation in pixel units, acting on centred pixel coordinates:
/// q = A (p - c) + t + c with p = (x, y).
struct AffineTransform {
  double a11 = 1, a12 = 0, a21 = 0, a22 = 1;
  double tx = 0, ty = 0;

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(double tx, double ty) { return {1, 0, 0, 1, tx, ty}; }
  static AffineTransform rotation(double degrees);
  /// Scale, shear, rotation then translation, drawn uniformly from the ranges.
  static AffineTransform sample(const AffineParams& params, int height, int width, Rng& rng);
};

/// Warped input plus what is needed to pool the warped branch with the ORIGINAL regions.
struct GeometricPair {
  Tensor image;                 // T(x), bilinear, zero outside the source frame
  Mask image_valid;             // validity of T(x) pixels
  std::vector<int> back_index;  // original pixel -> nearest warped pixel, -1 when out of frame
  Mask aligned_valid;           // original valid & in frame & warped pixel valid
};
GeometricPair geometric_pair(const Tensor& image, const Mask& valid, const AffineTransform& transform);

// ---- total loss ------------------------------------------------------------------------------

/// Weights of the adversarial and geometric regularisers in L_R.
struct RegularizerWeights {
  double adversarial = 0.5;
  double geometric = 0.5;

  static RegularizerWeights none() { return {0.0, 0.0}; }
  static RegularizerWeights adversarial_only() { return {1.0, 0.0}; }
  static RegularizerWeights geometric_only() { return {0.0, 1.0}; }
  static RegularizerWeights both() { return {0.5, 0.5}; }
};

struct BatchItem {
  const Tensor* image = nullptr;
  const Mask* valid = nullptr;
  const superpixel::LabelGrid* regions = nullptr;
};

struct Perturbation {
  Tensor r;                            // additive noise; empty means none
  std::optional<AffineTransform> affine;
};

/// Called once per item after its clean forward pass, with that item's clean probabilities.
using PerturbationFn = std::function<Perturbation(std::size_t item, const Tensor& p_clean)>;

struct LossTerms {
  double marginal = 0;     // H(Y)
  double conditional = 0;  // H(Y|X)
  double mi = 0;           // L_MI
  double r_adv = 0;
  double r_geo = 0;
  double total = 0;
};

struct LossResult {
  LossTerms terms;
  std::vector<Tensor> grads;      // per model parameter; empty unless requested
  std::vector<Tensor> clean_probs;  // per item
};

/// w_adv * R_adv + w_geo * R_geo + lambda * L_MI with every KL anchored on the clean branch
/// and the MI term over the union of the batch's valid regions.
LossResult total_loss(const model::Model& model, std::span<const BatchItem> batch, const MIHyper& hyper,
                      const RegularizerWeights& weights, const PerturbationFn& perturb, bool need_grad);

/// Differentiable clean forward: masked input -> backbone -> RWE -> softmax.
struct CleanForward {
  ad::Var probs;
  std::vector<int> region_ids;
};
CleanForward region_probabilities(ad::Graph& g, const model::BoundModel& m, ad::Var image, const Mask& valid,
                                  const superpixel::LabelGrid& regions);

/// ForwardFn for one item with frozen parameters (used by the power iteration).
ForwardFn frozen_forward(const model::Model& model, const Mask& valid, const superpixel::LabelGrid& regions);

}  // namespace inmars::objective
