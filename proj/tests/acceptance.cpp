// Acceptance checks: one PASS/FAIL line per criterion, exit status 0 only if all pass.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "inmars/datasets.hpp"
#include "inmars/eval.hpp"
#include "inmars/objective.hpp"
#include "inmars/superpixel.hpp"
#include "inmars/trainer.hpp"

using namespace inmars;

namespace {

// ---- tolerances ---------------------------------------------------------------------------

constexpr double kMinAcc = 0.85;
constexpr double kMaxRunSeconds = 15 * 60;
constexpr int kMaxEpochs = 30;
constexpr int kBenchEpochs = 10;
static_assert(kBenchEpochs <= kMaxEpochs);
constexpr double kFdRelErr = 1e-4;
constexpr int kFdCoords = 20;
constexpr std::size_t kFdMaxParams = 1000;
constexpr int kMappingTrials = 1000;
constexpr int kEntropyTrials = 1000;
constexpr double kPriorTol = 1e-12;
constexpr int kVatTrials = 100;
constexpr double kVatWinRate = 0.95;
constexpr double kVatNormTol = 1e-6;
constexpr int kSlicRandom = 100;
constexpr int kSlicStructured = 10;
constexpr int kMaskLayouts = 100;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---- synthetic training harness (criteria 1 and 8) -----------------------------------------

struct SyntheticBench {
  std::vector<datasets::Sample> train, eval;
  std::vector<superpixel::LabelGrid> train_grids;
  std::vector<std::vector<superpixel::LabelGrid>> eval_grids;  // resolution_set(3) per eval image
  int standard_index = 1;                                      // 2 * N_gt within the set
  double slic_seconds = 0;
};

SyntheticBench make_bench() {
  SyntheticBench b;
  datasets::SyntheticSpec ss;
  ss.class_count = 3;
  ss.height = ss.width = 64;
  ss.noise_std = 0.05;
  ss.image_count = 250;
  ss.seed = 1234;
  auto all = datasets::generate_synthetic(ss);
  b.train.assign(all.begin(), all.begin() + 200);
  b.eval.assign(all.begin() + 200, all.end());
  const auto t0 = std::chrono::steady_clock::now();
  superpixel::SlicParams p;
  p.compactness = 5;
  p.n_segments = 2 * ss.class_count;
  for (const auto& s : b.train) b.train_grids.push_back(superpixel::slic_segment(s.image, p));
  const auto set = superpixel::resolution_set(ss.class_count);
  b.standard_index = static_cast<int>(std::find(set.begin(), set.end(), 2 * ss.class_count) - set.begin());
  for (const auto& s : b.eval) {
    std::vector<superpixel::LabelGrid> gs;
    for (int n : set) {
      auto q = p;
      q.n_segments = n;
      gs.push_back(superpixel::slic_segment(s.image, q));
    }
    b.eval_grids.push_back(std::move(gs));
  }
  b.slic_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return b;
}

// Desk-scale settings chosen on the synthetic tuning runs; everything else keeps the library defaults.
trainer::TrainConfig bench_config(std::uint64_t seed, objective::RegularizerWeights w) {
  trainer::TrainConfig c;
  c.epochs = kBenchEpochs;
  c.lr_init = 5e-3;
  c.gamma_start = 2.0;
  c.seed = seed;
  c.weights = w;
  c.model.rwe = model::RweStrategy::mean;
  c.model.activation = ad::Activation::tanh;
  return c;
}

struct RunResult {
  double acc_b = 0, acc_standard = 0, acc_plus = 0;
  double seconds = 0;
};

RunResult train_and_eval(const SyntheticBench& b, const trainer::TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  auto res = trainer::train(cfg, b.train, b.train_grids);
  eval::ConfusionMatrix cb(3, 3), cs(3, 3), cp(3, 3);
  for (std::size_t i = 0; i < b.eval.size(); ++i) {
    const auto& s = b.eval[i];
    const auto& gs = b.eval_grids[i];
    cb.add(eval::predict_with_grids(eval::Variant::b, res.state.model, s, {}), *s.gt_labels, s.valid_mask);
    cs.add(eval::predict_with_grids(eval::Variant::standard, res.state.model, s, {gs[static_cast<std::size_t>(b.standard_index)]}),
           *s.gt_labels, s.valid_mask);
    cp.add(eval::predict_with_grids(eval::Variant::plus, res.state.model, s, gs), *s.gt_labels, s.valid_mask);
  }
  RunResult r;
  r.acc_b = eval::best_mapping(cb).acc;
  r.acc_standard = eval::best_mapping(cs).acc;
  r.acc_plus = eval::best_mapping(cp).acc;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() + b.slic_seconds;
  return r;
}

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

Outcome criterion_synthetic(const std::vector<RunResult>& runs) {
  std::vector<double> acc;
  int plus_wins = 0;
  double slowest = 0;
  std::string per;
  for (const auto& r : runs) {
    acc.push_back(r.acc_standard);
    plus_wins += r.acc_plus >= r.acc_b;
    slowest = std::max(slowest, r.seconds);
    per += fmt(" [std %.4f b %.4f plus %.4f %.0fs]", r.acc_standard, r.acc_b, r.acc_plus, r.seconds);
  }
  const double med = median3(acc);
  return {med >= kMinAcc && slowest < kMaxRunSeconds && plus_wins >= 2,
          fmt("median ACC %.4f (>= %.2f), slowest run %.0fs (< %.0fs), plus >= b in %d/3 seeds;", med, kMinAcc, slowest,
              kMaxRunSeconds, plus_wins) +
              per};
}

Outcome criterion_ablation(const SyntheticBench& b, const std::vector<RunResult>& both_runs) {
  struct Arm {
    const char* name;
    objective::RegularizerWeights w;
  };
  const Arm arms[] = {{"adv", objective::RegularizerWeights::adversarial_only()},
                      {"geo", objective::RegularizerWeights::geometric_only()},
                      {"none", objective::RegularizerWeights::none()}};
  std::vector<double> both;
  for (const auto& r : both_runs) both.push_back(r.acc_standard);
  const double m_both = median3(both);
  bool pass = true;
  std::string detail = fmt("median ACC both %.4f", m_both);
  for (const auto& arm : arms) {
    std::vector<double> acc;
    for (auto seed : kSeeds) {
      acc.push_back(train_and_eval(b, bench_config(seed, arm.w)).acc_standard);
      std::fprintf(stderr, "  ablation %s seed %llu: %.4f\n", arm.name, static_cast<unsigned long long>(seed), acc.back());
    }
    const double m = median3(acc);
    pass = pass && m_both >= m;
    detail += fmt(", %s %.4f", arm.name, m);
  }
  return {pass, detail};
}

// ---- gradients (criterion 2) ----------------------------------------------------------------

model::ModelConfig toy_model_config(model::RweStrategy rwe) {
  model::ModelConfig c;
  c.in_channels = 3;
  c.clusters = 3;
  c.width = 2;
  c.depth = 1;
  c.activation = ad::Activation::tanh;
  c.rwe = rwe;
  c.spp_levels = {1, 2};
  c.fc_hidden = 6;
  return c;
}

std::vector<double> flatten(const model::Model& m) {
  std::vector<double> x;
  for (const auto& p : m.parameters()) x.insert(x.end(), p.value.data().begin(), p.value.data().end());
  return x;
}

model::Model with_params(const model::Model& m, const std::vector<double>& x) {
  model::Model out = m;
  std::size_t o = 0;
  for (auto& p : out.parameters())
    for (auto& v : p.value.storage()) v = x[o++];
  return out;
}

Tensor uniform_tensor(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

superpixel::LabelGrid voronoi_layout(int h, int w, int regions, Rng& rng) {
  std::uniform_real_distribution<double> uy(0, h), ux(0, w);
  std::vector<std::pair<double, double>> seeds(static_cast<std::size_t>(regions));
  for (auto& s : seeds) s = {uy(rng), ux(rng)};
  Grid<std::int32_t> a(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = 0;
      double bd = 1e300;
      for (int r = 0; r < regions; ++r) {
        const double dy = y + 0.5 - seeds[static_cast<std::size_t>(r)].first, dx = x + 0.5 - seeds[static_cast<std::size_t>(r)].second;
        if (dy * dy + dx * dx < bd) {
          bd = dy * dy + dx * dx;
          best = r;
        }
      }
      a.at(y, x) = best;
    }
  return superpixel::enforce_connectivity(a, regions, 1e-9);
}

// Worst relative error between the tape gradient and central differences at sampled coordinates.
double fd_worst(const std::function<double(const model::Model&)>& loss, const model::Model& m,
                const std::vector<Tensor>& grads, Rng& rng) {
  std::vector<double> g;
  for (const auto& t : grads) g.insert(g.end(), t.data().begin(), t.data().end());
  auto x = flatten(m);
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  double worst = 0;
  const double h = 1e-5;
  for (int k = 0; k < kFdCoords; ++k) {
    const std::size_t i = idx[static_cast<std::size_t>(k)];
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = loss(with_params(m, x));
    x[i] = x0 - h;
    const double fm = loss(with_params(m, x));
    x[i] = x0;
    const double num = (fp - fm) / (2 * h);
    worst = std::max(worst, std::abs(num - g[i]) / std::max({std::abs(num), std::abs(g[i]), 1e-6}));
  }
  return worst;
}

Outcome criterion_gradients() {
  Rng rng(2024);
  double worst_mi = 0, worst_kl = 0, worst_total = 0;
  std::size_t max_params = 0;
  for (auto rwe : {model::RweStrategy::mean, model::RweStrategy::spp}) {
    model::Model m(toy_model_config(rwe));
    m.initialize(7);
    max_params = std::max(max_params, m.parameter_count());
    std::vector<Tensor> images;
    std::vector<Mask> valid;
    std::vector<superpixel::LabelGrid> grids;
    for (int i = 0; i < 2; ++i) {
      images.push_back(uniform_tensor({3, 8, 8}, rng, 0, 1));
      Mask mk(8, 8, 1);
      mk.at(2 + i, 5) = 0;
      valid.push_back(mk);
      grids.push_back(voronoi_layout(8, 8, 4, rng));
    }
    std::vector<Tensor> rs{uniform_tensor({3, 8, 8}, rng, -0.05, 0.05), uniform_tensor({3, 8, 8}, rng, -0.05, 0.05)};
    const objective::AffineTransform affine{0.97, 0.08, -0.06, 1.03, 0.6, -0.3};

    // mi_loss over the union of both images' regions.
    auto mi_value = [&](const model::Model& mm, std::vector<Tensor>* grads) {
      ad::Graph g;
      auto bm = model::bind(g, mm, grads != nullptr);
      std::vector<ad::Var> rows;
      for (int i = 0; i < 2; ++i) rows.push_back(objective::region_probabilities(g, bm, g.constant(images[i]), valid[i], grids[i]).probs);
      auto loss = objective::mi_loss(g, ad::concat_rows(g, rows), 0.7);
      if (grads) {
        g.backward(loss);
        for (auto v : bm.params) grads->push_back(g.grad(v));
      }
      return g.value(loss)[0];
    };
    // kl_consistency between clean and r-shifted branches, both differentiated.
    auto kl_value = [&](const model::Model& mm, std::vector<Tensor>* grads) {
      ad::Graph g;
      auto bm = model::bind(g, mm, grads != nullptr);
      Tensor shifted = images[0];
      for (std::size_t k = 0; k < shifted.size(); ++k) shifted[k] += rs[0][k];
      auto p = objective::region_probabilities(g, bm, g.constant(images[0]), valid[0], grids[0]).probs;
      auto q = objective::region_probabilities(g, bm, g.constant(shifted), valid[0], grids[0]).probs;
      auto loss = objective::kl_consistency(g, p, q);
      if (grads) {
        g.backward(loss);
        for (auto v : bm.params) grads->push_back(g.grad(v));
      }
      return g.value(loss)[0];
    };
    std::vector<objective::BatchItem> batch;
    for (int i = 0; i < 2; ++i) batch.push_back({&images[i], &valid[i], &grids[i]});
    auto perturb = [&](std::size_t i, const Tensor&) { return objective::Perturbation{rs[i], affine}; };
    objective::MIHyper hyper;

    std::vector<Tensor> g_mi, g_kl;
    mi_value(m, &g_mi);
    kl_value(m, &g_kl);
    auto total = objective::total_loss(m, batch, hyper, objective::RegularizerWeights::both(), perturb, true);
    worst_mi = std::max(worst_mi, fd_worst([&](const model::Model& mm) { return mi_value(mm, nullptr); }, m, g_mi, rng));
    worst_kl = std::max(worst_kl, fd_worst([&](const model::Model& mm) { return kl_value(mm, nullptr); }, m, g_kl, rng));
    worst_total = std::max(worst_total, fd_worst(
                                            [&](const model::Model& mm) {
                                              return objective::total_loss(mm, batch, hyper, objective::RegularizerWeights::both(),
                                                                           perturb, false)
                                                  .terms.total;
                                            },
                                            m, total.grads, rng));
  }
  const bool pass = max_params <= kFdMaxParams && worst_mi < kFdRelErr && worst_kl < kFdRelErr && worst_total < kFdRelErr;
  return {pass, fmt("%zu params max; worst rel. err mi %.2e, kl %.2e, total %.2e (< %.0e, %d coords each)", max_params,
                    worst_mi, worst_kl, worst_total, kFdRelErr, kFdCoords)};
}

// ---- mapping (criterion 3) ---------------------------------------------------------------------

Outcome criterion_mapping() {
  Rng rng(3);
  int mismatches = 0, total = 0;
  for (int k = 2; k <= 6; ++k) {
    std::vector<int> perm(static_cast<std::size_t>(k));
    for (int t = 0; t < kMappingTrials; ++t) {
      // Alternate tie-heavy and tie-free draws.
      std::uniform_int_distribution<int> u(0, t % 2 ? 3 : 100000);
      eval::ConfusionMatrix cm(k, k);
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c) cm.at(r, c) = u(rng);
      if (cm.total() == 0) cm.at(0, 0) = 1;
      std::iota(perm.begin(), perm.end(), 0);
      std::int64_t best = -1;
      std::vector<int> best_perm;
      do {
        std::int64_t s = 0;
        for (int r = 0; r < k; ++r) s += cm.at(r, perm[static_cast<std::size_t>(r)]);
        if (s > best) {
          best = s;
          best_perm = perm;
        }
      } while (std::next_permutation(perm.begin(), perm.end()));
      const auto m = eval::best_mapping(cm);
      const double acc = static_cast<double>(best) / static_cast<double>(cm.total());
      mismatches += m.matched != best || m.cluster_to_class != best_perm || m.acc != acc;
      ++total;
    }
  }
  return {mismatches == 0, fmt("%d/%d matrices (K = 2..6) equal brute force exactly", total - mismatches, total)};
}

// ---- entropy identities (criterion 4) -------------------------------------------------------------

Outcome criterion_entropy() {
  Rng rng(4);
  int order_fail = 0;
  double worst_prior = 0;
  std::uniform_int_distribution<int> kd(2, 8), nd(1, 64);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < kEntropyTrials; ++t) {
    const int k = kd(rng), n = nd(rng);
    Tensor p({n, k});
    const double sharp = 1 + 10 * u(rng);
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int j = 0; j < k; ++j) s += (p.at(i, j) = std::pow(u(rng), sharp));
      for (int j = 0; j < k; ++j) p.at(i, j) /= s;
    }
    order_fail += objective::marginal_entropy(p) < objective::conditional_entropy(p);
    std::vector<double> q(static_cast<std::size_t>(k), 1.0 / k);
    worst_prior = std::max(worst_prior, std::abs(objective::marginal_prior_term(p, q) - objective::marginal_entropy(p)));
  }
  bool uniform_zero = true;
  for (int k = 2; k <= 8; ++k)
    for (int n : {1, 7, 64}) uniform_zero = uniform_zero && objective::mi_loss(Tensor({n, k}, 1.0 / k), 1.0) == 0.0;
  return {order_fail == 0 && worst_prior <= kPriorTol && uniform_zero,
          fmt("H(Y) >= H(Y|X) in %d/%d batches; uniform-prior gap %.1e (<= %.0e); uniform batch mi_loss == 0: %s",
              kEntropyTrials - order_fail, kEntropyTrials, worst_prior, kPriorTol, uniform_zero ? "yes" : "no")};
}

// ---- VAT (criterion 5) -----------------------------------------------------------------------------

Outcome criterion_vat() {
  Rng rng(5);
  model::Model m(toy_model_config(model::RweStrategy::mean));
  m.initialize(11);
  int wins = 0;
  double worst_norm = 0;
  const double eps = 0.25, xi = 1e-2;
  for (int t = 0; t < kVatTrials; ++t) {
    Tensor img = uniform_tensor({3, 16, 16}, rng, 0, 1);
    Mask valid(16, 16, 1);
    valid.at(t % 16, (3 * t) % 16) = 0;
    auto grid = voronoi_layout(16, 16, 6, rng);
    const Tensor pc = model::predict_regions(m, img, valid, grid).probs;
    Tensor r = objective::adversarial_perturbation(objective::frozen_forward(m, valid, grid), img, valid, pc, eps, xi, rng);
    Tensor d = objective::random_direction(img.shape(), valid, rng);
    double rn = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      rn += r[i] * r[i];
      d[i] *= eps;
    }
    worst_norm = std::max(worst_norm, std::abs(std::sqrt(rn) - eps));
    auto kl_at = [&](const Tensor& delta) {
      Tensor s = img;
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += delta[i];
      return objective::kl_consistency(pc, model::predict_regions(m, s, valid, grid).probs);
    };
    wins += kl_at(r) > kl_at(d);
  }

  // eps = 0 through the full loss.
  Tensor img = uniform_tensor({3, 16, 16}, rng, 0, 1);
  Mask valid(16, 16, 1);
  auto grid = voronoi_layout(16, 16, 6, rng);
  std::vector<objective::BatchItem> batch{{&img, &valid, &grid}};
  auto perturb = [&](std::size_t, const Tensor& pc) {
    return objective::Perturbation{
        objective::adversarial_perturbation(objective::frozen_forward(m, valid, grid), img, valid, pc, 0.0, xi, rng),
        std::nullopt};
  };
  const double r_adv =
      objective::total_loss(m, batch, objective::MIHyper{}, objective::RegularizerWeights::adversarial_only(), perturb, false)
          .terms.r_adv;
  const double rate = static_cast<double>(wins) / kVatTrials;
  return {rate >= kVatWinRate && r_adv == 0.0 && worst_norm <= kVatNormTol,
          fmt("adversarial beats random in %d/%d (>= %.0f%%); eps=0 gives R_adv = %g; max | ||r|| - eps | = %.1e (<= %.0e)",
              wins, kVatTrials, 100 * kVatWinRate, r_adv, worst_norm, kVatNormTol)};
}

// ---- SLIC (criterion 6) -----------------------------------------------------------------------------

bool slic_invariants(const Tensor& img, const superpixel::SlicParams& p, std::string& why) {
  const auto g = superpixel::slic_segment(img, p);
  if (g.height() != img.dim(1) || g.width() != img.dim(2)) return why = "size", false;
  if (g.region_count < 1 || g.region_count > 2 * p.n_segments) return why = "region count", false;
  std::vector<int> seen(static_cast<std::size_t>(g.region_count), 0);
  for (auto v : g.labels.storage()) {
    if (v < 0 || v >= g.region_count) return why = "label range", false;
    seen[static_cast<std::size_t>(v)] = 1;
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) return why = "empty label", false;
  if (!superpixel::is_four_connected(g)) return why = "connectivity", false;
  if (!(superpixel::slic_segment(img, p) == g)) return why = "determinism", false;
  return true;
}

Tensor structured_image(int kind, int h, int w) {
  Tensor t({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double r = 0, g = 0, b = 0;
      switch (kind) {
        case 0: r = g = b = 0.5; break;                                          // constant
        case 1: r = x < w / 2 ? 0.9 : 0.1; g = 0.3; b = x < w / 2 ? 0.1 : 0.8; break;  // two-tone
        case 2: r = g = b = (y / 4) % 2 ? 1.0 : 0.0; break;                      // horizontal stripes
        case 3: r = ((x / 8) + (y / 8)) % 2 ? 0.9 : 0.1; g = 0.5; b = 0.2; break;  // checkerboard
        case 4: r = static_cast<double>(x) / (w - 1); g = static_cast<double>(y) / (h - 1); b = 0.5; break;  // ramps
        case 5: {                                                                 // disc
          const double dy = y - h / 2.0, dx = x - w / 2.0;
          r = dx * dx + dy * dy < h * w / 10.0 ? 1.0 : 0.0;
          g = 1.0 - r;
          break;
        }
        case 6: r = g = b = (x == y || x == w - 1 - y) ? 1.0 : 0.0; break;      // thin diagonals
        case 7: r = (x * 7 + y * 13) % 3 / 2.0; g = (x * 5 + y * 3) % 4 / 3.0; b = 0.5; break;  // periodic texture
        case 8: r = x < w / 3 ? 1.0 : 0.0; g = x >= w / 3 && x < 2 * w / 3 ? 1.0 : 0.0; b = x >= 2 * w / 3 ? 1.0 : 0.0; break;
        default: r = g = b = (x + y) % 2; break;                                  // pixel checkerboard
      }
      t.at(0, y, x) = r;
      t.at(1, y, x) = g;
      t.at(2, y, x) = b;
    }
  return t;
}

Outcome criterion_slic() {
  Rng rng(6);
  int fails = 0;
  std::string why, first_fail;
  std::uniform_int_distribution<int> hd(12, 48), nd(1, 40);
  for (int t = 0; t < kSlicRandom; ++t) {
    const int h = hd(rng), w = hd(rng);
    superpixel::SlicParams p;
    p.n_segments = std::min(nd(rng), h * w);
    p.seed = static_cast<std::uint64_t>(t);
    if (!slic_invariants(uniform_tensor({3, h, w}, rng, 0, 1), p, why)) {
      if (first_fail.empty()) first_fail = "random #" + std::to_string(t) + ": " + why;
      ++fails;
    }
  }
  for (int k = 0; k < kSlicStructured; ++k)
    for (int n : {1, 2, 6, 9, 30}) {
      superpixel::SlicParams p;
      p.n_segments = n;
      if (!slic_invariants(structured_image(k, 32, 40), p, why)) {
        if (first_fail.empty()) first_fail = "structured #" + std::to_string(k) + ": " + why;
        ++fails;
      }
    }
  // Two-tone edge: every horizontal label change within one pixel of the colour edge.
  int edge_fails = 0;
  for (int edge = 3; edge <= 13; ++edge) {
    Tensor img({3, 16, 16});
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        img.at(0, y, x) = x < edge ? 0.9 : 0.1;
        img.at(1, y, x) = x < edge ? 0.2 : 0.7;
        img.at(2, y, x) = x < edge ? 0.1 : 0.9;
      }
    superpixel::SlicParams p;
    p.n_segments = 2;
    p.compactness = 1;
    const auto g = superpixel::slic_segment(img, p);
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x + 1 < 16; ++x)
        if (g.labels.at(y, x) != g.labels.at(y, x + 1) && std::abs(x + 1 - edge) > 1) ++edge_fails;
      if (g.labels.at(y, 0) == g.labels.at(y, 15)) ++edge_fails;
    }
  }
  return {fails == 0 && edge_fails == 0,
          fmt("%d invariant failures over %d random + %d structured images (x5 resolutions); %d two-tone rows off the edge",
              fails, kSlicRandom, kSlicStructured, edge_fails) +
              (first_fail.empty() ? "" : " (first: " + first_fail + ")")};
}

// ---- RWE masking (criterion 7) -------------------------------------------------------------------------

Outcome criterion_masking() {
  Rng rng(7);
  long compared = 0, differing = 0;
  const std::vector<int> levels{1, 2, 4};
  std::uniform_int_distribution<int> rd(2, 12), sd(12, 32);
  for (int t = 0; t < kMaskLayouts; ++t) {
    const int h = sd(rng), w = sd(rng);
    auto g = voronoi_layout(h, w, rd(rng), rng);
    Tensor emb = uniform_tensor({3, h, w}, rng, -1, 1);
    Mask valid(h, w, 1);
    std::bernoulli_distribution drop(0.05);
    for (auto& v : valid.storage()) v = !drop(rng);
    const auto spp0 = model::spp_features(emb, g, valid, levels);
    const auto int0 = model::interp_features(emb, g, valid, {5, 4});
    for (std::size_t i = 0; i < spp0.region_ids.size(); ++i) {
      const int r = spp0.region_ids[i];
      Tensor mutated = emb;
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            if (g.labels.at(y, x) != r || !valid.at(y, x)) mutated.at(c, y, x) = 50.0 + 3 * c - y + x;
      const auto spp1 = model::spp_features(mutated, g, valid, levels);
      const auto int1 = model::interp_features(mutated, g, valid, {5, 4});
      for (int j = 0; j < spp0.rows.dim(1); ++j, ++compared)
        differing += spp1.rows.at(static_cast<int>(i), j) != spp0.rows.at(static_cast<int>(i), j);
      for (int j = 0; j < int0.rows.dim(1); ++j, ++compared)
        differing += int1.rows.at(static_cast<int>(i), j) != int0.rows.at(static_cast<int>(i), j);
    }
  }
  return {differing == 0 && compared > 0,
          fmt("%ld of %ld SPP/interp features changed when non-member pixels were overwritten (%d layouts)", differing,
              compared, kMaskLayouts)};
}

// ---- schedules (criterion 9) ---------------------------------------------------------------------------

Outcome criterion_schedules() {
  trainer::TrainConfig c;  // library defaults: lr 1e-5, alpha 0.96, gamma 1 -> 0.1 over 100 epochs
  const double lr0 = trainer::lr_schedule(0, c), lr1 = trainer::lr_schedule(1, c);
  const double g0 = trainer::gamma_schedule(0, c), gl = trainer::gamma_schedule(c.epochs - 1, c);
  // 0.96 * 1e-5 is one ulp above the double nearest to 9.6e-6; lr(1) must be that exact product.
  const bool lr1_ok = lr1 == 0.96 * 1e-5 && std::abs(lr1 - 9.6e-6) <= std::numeric_limits<double>::epsilon() * 9.6e-6;
  return {lr0 == 1e-5 && lr1_ok && g0 == 1.0 && gl == 0.1,
          fmt("lr(0) = %.17g, lr(1) = %.17g, gamma(0) = %.17g, gamma(%d) = %.17g", lr0, lr1, g0, c.epochs - 1, gl)};
}

int finish(const std::vector<std::pair<std::string, Outcome>>& results) {
  bool all = true;
  for (const auto& [name, o] : results) all = all && o.pass;
  std::printf("%s\n", all ? "ALL PASS" : "SOME CRITERIA FAILED");
  return all ? 0 : 1;
}

}  // namespace

// With arguments, only the listed criteria run (e.g. `acceptance 2 3`).
int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  std::vector<std::pair<std::string, Outcome>> results(9);
  for (auto& r : results) r.second.pass = true;
  auto report = [&](int id, const char* name, auto&& run) {
    if (!wanted(id)) return;
    Outcome o = run();
    std::printf("%s  %d. %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
    results[static_cast<std::size_t>(id - 1)] = {name, std::move(o)};
  };

  report(2, "gradient check", [] { return criterion_gradients(); });
  report(3, "best mapping vs brute force", [] { return criterion_mapping(); });
  report(4, "entropy identities", [] { return criterion_entropy(); });
  report(5, "adversarial perturbation", [] { return criterion_vat(); });
  report(6, "SLIC invariants", [] { return criterion_slic(); });
  report(7, "RWE masking soundness", [] { return criterion_masking(); });
  report(9, "schedules", [] { return criterion_schedules(); });

  if (!wanted(1) && !wanted(8)) return finish(results);
  const auto bench = make_bench();
  std::vector<RunResult> both;
  for (auto seed : kSeeds) {
    both.push_back(train_and_eval(bench, bench_config(seed, objective::RegularizerWeights::both())));
    std::fprintf(stderr, "  synthetic seed %llu: standard %.4f b %.4f plus %.4f (%.0fs)\n",
                 static_cast<unsigned long long>(seed), both.back().acc_standard, both.back().acc_b, both.back().acc_plus,
                 both.back().seconds);
  }
  report(1, "synthetic end-to-end", [&] { return criterion_synthetic(both); });
  report(8, "regulariser ablation", [&] { return criterion_ablation(bench, both); });
  return finish(results);
}
