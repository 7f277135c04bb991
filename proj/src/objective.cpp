#include "inmars/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "inmars/errors.hpp"

namespace inmars::objective {

void MIHyper::validate(int clusters) const {
  if (lambda < 0 || gamma < 0 || epsilon < 0) throw ConfigError("lambda, gamma and epsilon must be non-negative");
  if (!(xi > 0)) throw ConfigError("xi must be positive");
  if (prior.empty()) return;
  if (static_cast<int>(prior.size()) != clusters) throw ConfigError("prior must have one entry per cluster");
  double s = 0;
  for (double q : prior) {
    if (!(q > 0)) throw ConfigError("prior entries must be positive");
    s += q;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ConfigError("prior must sum to 1");
}

void AffineParams::validate() const {
  if (scale < 0 || scale >= 1) throw ConfigError("affine scale range must be in [0, 1)");
  if (translate < 0 || translate >= 1) throw ConfigError("affine translate range must be in [0, 1)");
  if (rotate_deg < 0 || rotate_deg > 180) throw ConfigError("affine rotation range must be in [0, 180]");
  if (shear < 0 || shear >= 1) throw ConfigError("affine shear range must be in [0, 1)");
}

// ---- plain entropy terms --------------------------------------------------------------

namespace {

void require_rows(const Tensor& p) {
  if (p.rank() != 2) throw ShapeError("expected (rows, K) probabilities, got " + Tensor::shape_string(p.shape()));
  if (p.dim(0) < 1) throw DegenerateInputError("empty batch of region distributions");
}

inline double safe_log(double v) { return std::log(std::max(v, kLogFloor)); }
// d/dp of p * log(max(p, floor)).
inline double plogp_grad(double v) { return v > kLogFloor ? std::log(v) + 1.0 : std::log(kLogFloor); }

std::span<const double> row(const Tensor& t, int i) {
  return t.data().subspan(static_cast<std::size_t>(i) * t.dim(1), static_cast<std::size_t>(t.dim(1)));
}

void require_prior(std::span<const double> prior, int k) {
  if (!prior.empty() && static_cast<int>(prior.size()) != k) throw ShapeError("prior length does not match K");
}

}  // namespace

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) h -= v * safe_log(v);
  return h;
}

std::vector<double> row_mean(const Tensor& probs) {
  require_rows(probs);
  const int n = probs.dim(0), k = probs.dim(1);
  std::vector<double> m(static_cast<std::size_t>(k), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) m[static_cast<std::size_t>(j)] += (probs.at(i, j) - m[static_cast<std::size_t>(j)]) / (i + 1);
  return m;
}

double marginal_entropy(const Tensor& probs) { return entropy(row_mean(probs)); }

double conditional_entropy(const Tensor& probs) {
  require_rows(probs);
  double m = 0.0;
  for (int i = 0; i < probs.dim(0); ++i) m += (entropy(row(probs, i)) - m) / (i + 1);
  return m;
}

double marginal_prior_term(const Tensor& probs, std::span<const double> prior) {
  require_rows(probs);
  require_prior(prior, probs.dim(1));
  if (prior.empty()) return marginal_entropy(probs);
  const auto m = row_mean(probs);
  double kl = 0.0;
  for (std::size_t j = 0; j < m.size(); ++j) kl += m[j] * (safe_log(m[j]) - safe_log(prior[j]));
  return std::log(static_cast<double>(m.size())) - kl;
}

double mi_loss(const Tensor& probs, double gamma, std::span<const double> prior) {
  return conditional_entropy(probs) - gamma * marginal_prior_term(probs, prior);
}

double kl_consistency(const Tensor& p, const Tensor& p_t) {
  require_rows(p);
  if (!p.same_shape(p_t)) throw AlignmentError("kl_consistency: region rows are not aligned");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * (safe_log(p[i]) - safe_log(p_t[i]));
  return s / p.dim(0);
}

// ---- differentiable versions ------------------------------------------------------------

ad::Var marginal_prior_term(ad::Graph& g, ad::Var probs, std::span<const double> prior) {
  const Tensor& p = g.value(probs);
  const double value = marginal_prior_term(p, prior);
  std::vector<double> q(prior.begin(), prior.end());
  return g.record(Tensor({1}, value), {probs}, [probs, q](ad::Graph& gr, const Tensor& go) {
    const Tensor& pv = gr.value(probs);
    const int n = pv.dim(0), k = pv.dim(1);
    const auto m = row_mean(pv);
    // Both forms differentiate to -(log m_j + 1 [- log q_j]) / N per entry.
    std::vector<double> dm(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
      double d = -plogp_grad(m[static_cast<std::size_t>(j)]);
      if (!q.empty()) d += safe_log(q[static_cast<std::size_t>(j)]);
      dm[static_cast<std::size_t>(j)] = d / n;
    }
    Tensor& gi = gr.grad_buffer(probs);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) gi.at(i, j) += go[0] * dm[static_cast<std::size_t>(j)];
  });
}

ad::Var conditional_entropy(ad::Graph& g, ad::Var probs) {
  const double value = conditional_entropy(g.value(probs));
  return g.record(Tensor({1}, value), {probs}, [probs](ad::Graph& gr, const Tensor& go) {
    const Tensor& pv = gr.value(probs);
    const int n = pv.dim(0);
    Tensor& gi = gr.grad_buffer(probs);
    for (std::size_t i = 0; i < pv.size(); ++i) gi[i] += -go[0] * plogp_grad(pv[i]) / n;
  });
}

ad::Var mi_loss(ad::Graph& g, ad::Var probs, double gamma, std::span<const double> prior) {
  const std::array<ad::Var, 2> parts{conditional_entropy(g, probs), marginal_prior_term(g, probs, prior)};
  const std::array<double, 2> w{1.0, -gamma};
  return ad::weighted_sum(g, parts, w);
}

ad::Var kl_sum(ad::Graph& g, ad::Var p, ad::Var p_t) {
  const Tensor& pv = g.value(p);
  const Tensor& qv = g.value(p_t);
  if (pv.rank() != 2 || !pv.same_shape(qv)) throw AlignmentError("kl: region rows are not aligned");
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += pv[i] * (safe_log(pv[i]) - safe_log(qv[i]));
  return g.record(Tensor({1}, s), {p, p_t}, [p, p_t](ad::Graph& gr, const Tensor& go) {
    const Tensor& a = gr.value(p);
    const Tensor& b = gr.value(p_t);
    if (gr.requires_grad(p)) {
      Tensor& ga = gr.grad_buffer(p);
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += go[0] * (plogp_grad(a[i]) - safe_log(b[i]));
    }
    if (gr.requires_grad(p_t)) {
      Tensor& gb = gr.grad_buffer(p_t);
      for (std::size_t i = 0; i < b.size(); ++i) gb[i] += b[i] > kLogFloor ? -go[0] * a[i] / b[i] : 0.0;
    }
  });
}

ad::Var kl_consistency(ad::Graph& g, ad::Var p, ad::Var p_t) {
  const int n = g.value(p).rank() == 2 ? g.value(p).dim(0) : 0;
  if (n < 1) throw DegenerateInputError("kl_consistency: empty batch");
  return ad::scale(g, kl_sum(g, p, p_t), 1.0 / n);
}

// ---- clean forward ----------------------------------------------------------------------------

CleanForward region_probabilities(ad::Graph& g, const model::BoundModel& m, ad::Var image, const Mask& valid,
                                  const superpixel::LabelGrid& regions) {
  ad::Var x = ad::mask_pixels(g, image, valid);
  ad::Var emb = model::backbone_forward(g, m, x);
  model::RegionLogits rl = model::region_head(g, m, emb, regions, valid);
  return CleanForward{ad::softmax_rows(g, rl.logits), std::move(rl.region_ids)};
}

ForwardFn frozen_forward(const model::Model& model, const Mask& valid, const superpixel::LabelGrid& regions) {
  return [&model, &valid, &regions](ad::Graph& g, ad::Var image) {
    const model::BoundModel b = model::bind(g, model, false);
    return region_probabilities(g, b, image, valid, regions).probs;
  };
}

// ---- adversarial perturbation ---------------------------------------------------------------

namespace {

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

void zero_invalid(Tensor& t, const Mask& valid) {
  const std::size_t hw = valid.size();
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!valid[i % hw]) t[i] = 0.0;
}

}  // namespace

Tensor random_direction(const std::vector<int>& shape, const Mask& valid, Rng& rng) {
  Tensor d(shape);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (double& v : d.storage()) v = nd(rng);
  zero_invalid(d, valid);
  const double n = l2_norm(d);
  if (n > 0) for (double& v : d.storage()) v /= n;
  return d;
}

Tensor adversarial_perturbation(const ForwardFn& forward, const Tensor& image, const Mask& valid, const Tensor& p_clean,
                                double epsilon, double xi, Rng& rng) {
  if (epsilon < 0) throw ConfigError("epsilon must be non-negative");
  if (image.rank() != 3 || image.dim(1) != valid.height() || image.dim(2) != valid.width())
    throw ShapeError("perturbation: image and valid mask disagree");
  Tensor d = random_direction(image.shape(), valid, rng);
  if (epsilon == 0.0) return Tensor(image.shape(), 0.0);

  Tensor probe = image;
  for (std::size_t i = 0; i < probe.size(); ++i) probe[i] += xi * d[i];
  ad::Graph g;
  ad::Var x = g.leaf(std::move(probe), true);
  ad::Var p_probe = forward(g, x);
  if (!g.value(p_probe).same_shape(p_clean)) throw AlignmentError("perturbation: clean and probe rows are not aligned");
  g.backward(kl_sum(g, g.constant(p_clean), p_probe));
  Tensor grad = g.grad(x);
  zero_invalid(grad, valid);
  const double n = l2_norm(grad);
  Tensor r = (n > 0 && std::isfinite(n)) ? std::move(grad) : d;
  const double rn = l2_norm(r);
  if (rn == 0.0) return Tensor(image.shape(), 0.0);  // no valid pixel to perturb
  for (double& v : r.storage()) v *= epsilon / rn;
  return r;
}

// ---- geometric branch ---------------------------------------------------------------------------

AffineTransform AffineTransform::rotation(double degrees) {
  const double t = degrees * M_PI / 180.0;
  return {std::cos(t), -std::sin(t), std::sin(t), std::cos(t), 0, 0};
}

AffineTransform AffineTransform::sample(const AffineParams& p, int height, int width, Rng& rng) {
  p.validate();
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double s = 1.0 + p.scale * u(rng);
  const double theta = p.rotate_deg * u(rng) * M_PI / 180.0;
  const double sh = p.shear * u(rng);
  const double tx = p.translate * width * u(rng);
  const double ty = p.translate * height * u(rng);
  const double c = std::cos(theta), sn = std::sin(theta);
  // R(theta) * [[1, sh], [0, 1]] * s
  return {s * c, s * (c * sh - sn), s * sn, s * (sn * sh + c), tx, ty};
}

GeometricPair geometric_pair(const Tensor& image, const Mask& valid, const AffineTransform& t) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double det = t.a11 * t.a22 - t.a12 * t.a21;
  if (std::abs(det) < 1e-9) throw ConfigError("affine transform is singular");
  const double i11 = t.a22 / det, i12 = -t.a12 / det, i21 = -t.a21 / det, i22 = t.a11 / det;

  GeometricPair out{Tensor({c, h, w}), Mask(h, w, 0), std::vector<int>(static_cast<std::size_t>(h) * w, -1), Mask(h, w, 0)};
  // Warped pixel q samples the source at T^-1(q).
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double qx = x - cx - t.tx, qy = y - cy - t.ty;
      const double sx = i11 * qx + i12 * qy + cx, sy = i21 * qx + i22 * qy + cy;
      if (sx < -0.5 || sy < -0.5 || sx > w - 0.5 || sy > h - 0.5) continue;
      const int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, w - 1);
      const int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, h - 1);
      if (!valid.at(ny, nx)) continue;
      out.image_valid.at(y, x) = 1;
      const double fx = std::clamp(sx, 0.0, w - 1.0), fy = std::clamp(sy, 0.0, h - 1.0);
      const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double ax = fx - x0, ay = fy - y0;
      // Invalid source pixels read as zero, as they do in the clean branch.
      const double w00 = valid.at(y0, x0) ? (1 - ay) * (1 - ax) : 0.0;
      const double w01 = ax > 0 && valid.at(y0, x1) ? (1 - ay) * ax : 0.0;
      const double w10 = ay > 0 && valid.at(y1, x0) ? ay * (1 - ax) : 0.0;
      const double w11 = ax > 0 && ay > 0 && valid.at(y1, x1) ? ay * ax : 0.0;
      for (int ch = 0; ch < c; ++ch) {
        double v = w00 != 0.0 ? w00 * image.at(ch, y0, x0) : 0.0;
        if (w01 != 0.0) v += w01 * image.at(ch, y0, x1);
        if (w10 != 0.0) v += w10 * image.at(ch, y1, x0);
        if (w11 != 0.0) v += w11 * image.at(ch, y1, x1);
        out.image.at(ch, y, x) = v;
      }
    }
  // Original pixel p reads the warped embedding at round(T(p)).
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double px = x - cx, py = y - cy;
      const double qx = t.a11 * px + t.a12 * py + t.tx + cx, qy = t.a21 * px + t.a22 * py + t.ty + cy;
      const long nx = std::lround(qx), ny = std::lround(qy);
      if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      out.back_index[p] = static_cast<int>(ny * w + nx);
      out.aligned_valid[p] = valid.at(y, x) && out.image_valid.at(static_cast<int>(ny), static_cast<int>(nx));
    }
  return out;
}

// ---- total loss ---------------------------------------------------------------------------------------

LossResult total_loss(const model::Model& model, std::span<const BatchItem> batch, const MIHyper& hyper,
                      const RegularizerWeights& weights, const PerturbationFn& perturb, bool need_grad) {
  if (batch.empty()) throw DegenerateInputError("total_loss: empty batch");
  hyper.validate(model.config().clusters);
  ad::Graph g;
  const model::BoundModel bm = model::bind(g, model, need_grad);

  LossResult result;
  std::vector<ad::Var> clean;
  std::vector<ad::Var> adv_terms, geo_terms;
  int adv_rows = 0, geo_rows = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const BatchItem& item = batch[i];
    CleanForward cf = region_probabilities(g, bm, g.constant(*item.image), *item.valid, *item.regions);
    clean.push_back(cf.probs);
    result.clean_probs.push_back(g.value(cf.probs));
    const int rows = g.value(cf.probs).dim(0);
    if (weights.adversarial == 0.0 && weights.geometric == 0.0) continue;

    Perturbation pert = perturb ? perturb(i, g.value(cf.probs)) : Perturbation{};
    if (weights.adversarial != 0.0) {
      adv_rows += rows;
      const bool zero_r = pert.r.empty() || std::all_of(pert.r.data().begin(), pert.r.data().end(), [](double v) { return v == 0.0; });
      // KL(p || p) is identically zero in value and gradient, so the branch is skipped.
      if (!zero_r) {
        if (!pert.r.same_shape(*item.image)) throw ShapeError("perturbation r does not match the image shape");
        Tensor shifted = *item.image;
        for (std::size_t k = 0; k < shifted.size(); ++k) shifted[k] += pert.r[k];
        CleanForward adv = region_probabilities(g, bm, g.constant(std::move(shifted)), *item.valid, *item.regions);
        adv_terms.push_back(kl_sum(g, cf.probs, adv.probs));
      }
    }
    if (weights.geometric != 0.0) {
      const AffineTransform tr = pert.affine.value_or(AffineTransform::identity());
      GeometricPair pair = geometric_pair(*item.image, *item.valid, tr);
      ad::Var xw = ad::mask_pixels(g, g.constant(std::move(pair.image)), pair.image_valid);
      ad::Var emb_w = model::backbone_forward(g, bm, xw);
      ad::Var emb_back = ad::gather_pixels(g, emb_w, std::move(pair.back_index));
      // Regions that lose every pixel to the warp drop out of both sides.
      bool any = false;
      for (auto v : pair.aligned_valid.storage()) any = any || v;
      if (!any) continue;
      model::RegionLogits rl = model::region_head(g, bm, emb_back, *item.regions, pair.aligned_valid);
      std::vector<int> rows_in_clean;
      std::size_t pos = 0;
      for (int rid : rl.region_ids) {
        while (pos < cf.region_ids.size() && cf.region_ids[pos] != rid) ++pos;
        if (pos == cf.region_ids.size()) throw AlignmentError("geometric branch kept a region the clean branch dropped");
        rows_in_clean.push_back(static_cast<int>(pos));
      }
      ad::Var anchor = ad::select_rows(g, cf.probs, rows_in_clean);
      geo_terms.push_back(kl_sum(g, anchor, ad::softmax_rows(g, rl.logits)));
      geo_rows += static_cast<int>(rows_in_clean.size());
    }
  }

  ad::Var all = ad::concat_rows(g, clean);
  const Tensor& pv = g.value(all);
  result.terms.marginal = marginal_prior_term(pv, hyper.prior);
  result.terms.conditional = conditional_entropy(pv);
  ad::Var mi = mi_loss(g, all, hyper.gamma, hyper.prior);
  result.terms.mi = g.value(mi)[0];

  std::vector<ad::Var> parts{mi};
  std::vector<double> coefs{hyper.lambda};
  if (!adv_terms.empty()) {
    std::vector<double> ones(adv_terms.size(), 1.0 / adv_rows);
    ad::Var r_adv = ad::weighted_sum(g, adv_terms, ones);
    result.terms.r_adv = g.value(r_adv)[0];
    parts.push_back(r_adv);
    coefs.push_back(weights.adversarial);
  }
  if (!geo_terms.empty()) {
    std::vector<double> ones(geo_terms.size(), 1.0 / geo_rows);
    ad::Var r_geo = ad::weighted_sum(g, geo_terms, ones);
    result.terms.r_geo = g.value(r_geo)[0];
    parts.push_back(r_geo);
    coefs.push_back(weights.geometric);
  }
  ad::Var total = ad::weighted_sum(g, parts, coefs);
  result.terms.total = g.value(total)[0];

  if (need_grad) {
    g.backward(total);
    for (ad::Var v : bm.params) result.grads.push_back(g.grad(v));
  }
  return result;
}

}  // namespace inmars::objective
