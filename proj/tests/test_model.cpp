#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "inmars/errors.hpp"
#include "inmars/model.hpp"
#include "test_util.hpp"

using namespace inmars;
using namespace inmars::model;
using superpixel::LabelGrid;
using testutil::random_tensor;

namespace {

ModelConfig toy_config(RweStrategy rwe, int in_channels = 3) {
  ModelConfig c;
  c.in_channels = in_channels;
  c.clusters = 3;
  c.width = 2;
  c.depth = 1;
  c.activation = ad::Activation::tanh;
  c.rwe = rwe;
  c.spp_levels = {1, 2};
  c.interp_size = {3, 3};
  c.fc_hidden = 5;
  return c;
}

LabelGrid quadrants(int h, int w) {
  Grid<std::int32_t> g(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) g.at(y, x) = (y >= h / 2) * 2 + (x >= w / 2);
  return LabelGrid::from_labels(g);
}

// Masked bounding-box crop of one region: (k, bh, bw) with non-members zeroed.
struct Crop {
  Tensor values;
  int y0 = 0, x0 = 0;
};

Crop masked_crop(const Tensor& emb, const LabelGrid& g, const Mask& valid, int r) {
  int y0 = 1 << 30, x0 = 1 << 30, y1 = -1, x1 = -1;
  for (int y = 0; y < g.height(); ++y)
    for (int x = 0; x < g.width(); ++x)
      if (g.labels.at(y, x) == r && valid.at(y, x)) {
        y0 = std::min(y0, y);
        x0 = std::min(x0, x);
        y1 = std::max(y1, y);
        x1 = std::max(x1, x);
      }
  const int k = emb.dim(0), bh = y1 - y0 + 1, bw = x1 - x0 + 1;
  Crop c{Tensor({k, bh, bw}), y0, x0};
  for (int ch = 0; ch < k; ++ch)
    for (int y = 0; y < bh; ++y)
      for (int x = 0; x < bw; ++x) {
        const bool member = g.labels.at(y0 + y, x0 + x) == r && valid.at(y0 + y, x0 + x);
        c.values.at(ch, y, x) = member ? emb.at(ch, y0 + y, x0 + x) : 0.0;
      }
  return c;
}

std::vector<double> spp_oracle(const Crop& c, const std::vector<int>& levels) {
  const int k = c.values.dim(0), bh = c.values.dim(1), bw = c.values.dim(2);
  std::vector<double> out;
  for (int l : levels)
    for (int ch = 0; ch < k; ++ch)
      for (int i = 0; i < l; ++i)
        for (int j = 0; j < l; ++j) {
          const int ya = static_cast<int>(std::floor(static_cast<double>(i) * bh / l));
          const int yb = static_cast<int>(std::ceil(static_cast<double>(i + 1) * bh / l));
          const int xa = static_cast<int>(std::floor(static_cast<double>(j) * bw / l));
          const int xb = static_cast<int>(std::ceil(static_cast<double>(j + 1) * bw / l));
          double m = -1e300;
          for (int y = ya; y < yb; ++y)
            for (int x = xa; x < xb; ++x) m = std::max(m, c.values.at(ch, y, x));
          out.push_back(m);
        }
  return out;
}

// Reference bilinear resize with half-pixel centres and edge clamping.
std::vector<double> interp_oracle(const Crop& c, int th, int tw) {
  const int k = c.values.dim(0), bh = c.values.dim(1), bw = c.values.dim(2);
  std::vector<double> out;
  for (int ch = 0; ch < k; ++ch)
    for (int ty = 0; ty < th; ++ty)
      for (int tx = 0; tx < tw; ++tx) {
        const double sy = std::min(std::max((ty + 0.5) * bh / th - 0.5, 0.0), bh - 1.0);
        const double sx = std::min(std::max((tx + 0.5) * bw / tw - 0.5, 0.0), bw - 1.0);
        const int ya = static_cast<int>(sy), xa = static_cast<int>(sx);
        const int yb = std::min(ya + 1, bh - 1), xb = std::min(xa + 1, bw - 1);
        const double fy = sy - ya, fx = sx - xa;
        out.push_back((1 - fy) * (1 - fx) * c.values.at(ch, ya, xa) + (1 - fy) * fx * c.values.at(ch, ya, xb) +
                      fy * (1 - fx) * c.values.at(ch, yb, xa) + fy * fx * c.values.at(ch, yb, xb));
      }
  return out;
}

}  // namespace

TEST_CASE("backbone keeps spatial size and emits K channels") {
  ModelConfig c;
  c.in_channels = 3;
  c.clusters = 3;
  Model m(c);
  m.initialize(1);
  Rng rng(1);
  auto out = backbone_forward(m, random_tensor({3, 192, 192}, rng, 0, 1));
  CHECK(out.shape() == std::vector<int>{3, 192, 192});
  CHECK(out.all_finite());
  CHECK_THROWS_AS(backbone_forward(m, Tensor({3, 18, 20})), ShapeError);
}

TEST_CASE("zeroed output layer gives constant logits") {
  Model m(toy_config(RweStrategy::mean));
  m.initialize(3);
  m.zero_output_layer();
  Rng rng(2);
  auto out = backbone_forward(m, random_tensor({3, 8, 8}, rng, 0, 1));
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("backbone input gradient matches finite differences") {
  Model m(toy_config(RweStrategy::mean));
  m.initialize(4);
  Rng rng(5);
  const auto img = random_tensor({3, 8, 8}, rng, 0, 1);
  auto value = [&](const std::vector<double>& x) {
    const Tensor out = backbone_forward(m, Tensor({3, 8, 8}, x));
    return std::accumulate(out.data().begin(), out.data().end(), 0.0);
  };
  ad::Graph g;
  auto bm = bind(g, m, false);
  auto in = g.leaf(img, true);
  g.backward(ad::sum(g, backbone_forward(g, bm, in)));
  const Tensor grad = g.grad(in);
  auto rep = testutil::fd_check(value, img.storage(), grad.storage(), testutil::pick_coords(img.size(), 10, rng));
  CHECK(rep.worst < 1e-4);
}

TEST_CASE("pooling small cases") {
  Tensor emb({1, 1, 2}, std::vector<double>{1, 3});
  Grid<std::int32_t> one(1, 2, 0);
  auto g = LabelGrid::from_labels(one);
  Mask valid(1, 2, 1);
  CHECK(pool_regions(emb, g, valid, PoolStrategy::max).rows.at(0, 0) == 3);
  CHECK(pool_regions(emb, g, valid, PoolStrategy::mean).rows.at(0, 0) == 2);

  Tensor constant({2, 4, 4}, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      constant.at(0, y, x) = 0.7;
      constant.at(1, y, x) = -1.25;
    }
  auto q = quadrants(4, 4);
  for (auto s : {PoolStrategy::max, PoolStrategy::mean}) {
    auto rows = pool_regions(constant, q, Mask(4, 4, 1), s).rows;
    for (int r = 0; r < 4; ++r) {
      CHECK(rows.at(r, 0) == doctest::Approx(0.7).epsilon(1e-15));
      CHECK(rows.at(r, 1) == doctest::Approx(-1.25).epsilon(1e-15));
    }
  }
}

TEST_CASE("pooling matches a per-region loop and skips invalid pixels") {
  Rng rng(8);
  auto emb = random_tensor({3, 16, 16}, rng);
  auto g = quadrants(16, 16);
  Mask valid(16, 16, 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) valid.at(y, x) = 0;  // region 0 fully invalid
  valid.at(12, 3) = 0;
  auto mx = pool_regions(emb, g, valid, PoolStrategy::max);
  auto mn = pool_regions(emb, g, valid, PoolStrategy::mean);
  CHECK(mx.dropped == std::vector<int>{0});
  CHECK(mx.region_ids == std::vector<int>{1, 2, 3});
  for (std::size_t i = 0; i < mx.region_ids.size(); ++i) {
    const int r = mx.region_ids[i];
    for (int c = 0; c < 3; ++c) {
      double best = -1e300, sum = 0;
      int n = 0;
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
          if (g.labels.at(y, x) == r && valid.at(y, x)) {
            best = std::max(best, emb.at(c, y, x));
            sum += emb.at(c, y, x);
            ++n;
          }
      CHECK(mx.rows.at(static_cast<int>(i), c) == best);
      CHECK(std::abs(mn.rows.at(static_cast<int>(i), c) - sum / n) < 1e-14);
    }
  }
  CHECK_THROWS_AS(pool_regions(emb, g, Mask(16, 16, 0), PoolStrategy::mean), DegenerateInputError);
}

TEST_CASE("SPP vector length and constant full-box region") {
  Tensor emb({2, 8, 8}, 0.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      emb.at(0, y, x) = 0.5;
      emb.at(1, y, x) = 2.0;
    }
  std::vector<int> levels{1, 2};
  auto f = spp_features(emb, quadrants(8, 8), Mask(8, 8, 1), levels);
  CHECK(f.rows.dim(1) == 2 * (1 + 4));
  for (int r = 0; r < 4; ++r) {
    CHECK(f.rows.at(r, 0) == 0.5);
    CHECK(f.rows.at(r, 1) == 2.0);
  }
}

TEST_CASE("SPP on an L-shaped region matches a masked per-bin oracle") {
  Rng rng(11);
  Grid<std::int32_t> lab(6, 6, 1);
  for (int y = 0; y < 6; ++y) lab.at(y, 0) = lab.at(y, 1) = 0;
  for (int x = 0; x < 6; ++x) lab.at(4, x) = lab.at(5, x) = 0;
  auto g = LabelGrid::from_labels(lab);
  Mask valid(6, 6, 1);
  std::vector<int> levels{1, 2, 3};
  for (int trial = 0; trial < 5; ++trial) {
    // Non-positive embedding so masked zeros are visible in every bin touching a non-member.
    auto emb = random_tensor({2, 6, 6}, rng, -1.0, trial % 2 ? 1.0 : -0.01);
    auto f = spp_features(emb, g, valid, levels);
    for (int r = 0; r < 2; ++r) {
      auto expect = spp_oracle(masked_crop(emb, g, valid, r), levels);
      REQUIRE(static_cast<int>(expect.size()) == f.rows.dim(1));
      for (std::size_t j = 0; j < expect.size(); ++j) CHECK(f.rows.at(r, static_cast<int>(j)) == expect[j]);
    }
  }
}

TEST_CASE("interpolation read-out") {
  Rng rng(12);
  SUBCASE("identity when the box already has the target size") {
    auto emb = random_tensor({2, 6, 6}, rng);
    auto g = quadrants(6, 6);
    auto f = interp_features(emb, g, Mask(6, 6, 1), {3, 3});
    for (int r = 0; r < 4; ++r) {
      auto c = masked_crop(emb, g, Mask(6, 6, 1), r);
      for (std::size_t j = 0; j < c.values.size(); ++j) CHECK(f.rows.at(r, static_cast<int>(j)) == c.values[j]);
    }
  }
  SUBCASE("constant region twice the target size stays constant") {
    Tensor emb({1, 12, 12}, 0.3);
    auto f = interp_features(emb, quadrants(12, 12), Mask(12, 12, 1), {3, 3});
    for (int r = 0; r < 4; ++r)
      for (int j = 0; j < 9; ++j) CHECK(std::abs(f.rows.at(r, j) - 0.3) < 1e-6);
  }
  SUBCASE("random layouts match a reference bilinear resize") {
    for (int t = 0; t < 10; ++t) {
      auto emb = random_tensor({2, 16, 16}, rng);
      auto g = testutil::random_layout(16, 16, 5, rng);
      Mask valid(16, 16, 1);
      valid.at(t, t) = 0;
      auto f = interp_features(emb, g, valid, {4, 5});
      for (std::size_t i = 0; i < f.region_ids.size(); ++i) {
        auto expect = interp_oracle(masked_crop(emb, g, valid, f.region_ids[i]), 4, 5);
        for (std::size_t j = 0; j < expect.size(); ++j)
          CHECK(std::abs(f.rows.at(static_cast<int>(i), static_cast<int>(j)) - expect[j]) < 1e-5);
      }
    }
  }
}

TEST_CASE("every strategy has a fixed row length") {
  Rng rng(13);
  for (auto rwe : {RweStrategy::max, RweStrategy::mean, RweStrategy::spp, RweStrategy::interp}) {
    auto cfg = toy_config(rwe);
    for (int regions : {2, 5, 9}) {
      auto emb = random_tensor({3, 16, 16}, rng);
      auto plan = region_plan(cfg, emb, testutil::random_layout(16, 16, regions, rng), Mask(16, 16, 1));
      CHECK(plan.plan.features == cfg.feature_length());
    }
  }
}

TEST_CASE("masking soundness: foreign pixels in a bounding box never leak") {
  Rng rng(14);
  for (int t = 0; t < 20; ++t) {
    auto g = testutil::random_layout(16, 16, 6, rng);
    auto emb = random_tensor({2, 16, 16}, rng);
    Mask valid(16, 16, 1);
    std::vector<int> levels{1, 2, 4};
    auto spp0 = spp_features(emb, g, valid, levels);
    auto int0 = interp_features(emb, g, valid, {4, 4});
    for (int r = 0; r < g.region_count; ++r) {
      Tensor mutated = emb;
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
          if (g.labels.at(y, x) != r)
            for (int c = 0; c < 2; ++c) mutated.at(c, y, x) = 100.0 + y + x;
      auto spp1 = spp_features(mutated, g, valid, levels);
      auto int1 = interp_features(mutated, g, valid, {4, 4});
      for (int j = 0; j < spp0.rows.dim(1); ++j) CHECK(spp1.rows.at(r, j) == spp0.rows.at(r, j));
      for (int j = 0; j < int0.rows.dim(1); ++j) CHECK(int1.rows.at(r, j) == int0.rows.at(r, j));
    }
  }
}

TEST_CASE("permuting region ids permutes rows") {
  Rng rng(15);
  auto emb = random_tensor({3, 16, 16}, rng);
  auto g = testutil::random_layout(16, 16, 5, rng);
  std::vector<int> perm(static_cast<std::size_t>(g.region_count));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Grid<std::int32_t> lab = g.labels;
  for (auto& v : lab.storage()) v = perm[static_cast<std::size_t>(v)];
  auto gp = LabelGrid::from_labels(lab);
  for (auto rwe : {RweStrategy::max, RweStrategy::mean, RweStrategy::spp, RweStrategy::interp}) {
    auto cfg = toy_config(rwe);
    auto a = region_plan(cfg, emb, g, Mask(16, 16, 1));
    auto b = region_plan(cfg, emb, gp, Mask(16, 16, 1));
    auto ra = a.plan.apply(emb.data()), rb = b.plan.apply(emb.data());
    for (int r = 0; r < g.region_count; ++r)
      for (int j = 0; j < ra.dim(1); ++j) CHECK(ra.at(r, j) == rb.at(perm[static_cast<std::size_t>(r)], j));
  }
}

TEST_CASE("region softmax") {
  auto d = region_softmax(Tensor({1, 3}, std::vector<double>{0, 0, 0}));
  for (int j = 0; j < 3; ++j) CHECK(d.probs.at(0, j) == doctest::Approx(1.0 / 3));
  auto a = region_softmax(Tensor({1, 3}, std::vector<double>{2, 1, 0}));
  auto b = region_softmax(Tensor({1, 3}, std::vector<double>{12, 11, 10}));
  const double z = std::exp(2.0) + std::exp(1.0) + 1;
  CHECK(std::abs(a.probs.at(0, 0) - std::exp(2.0) / z) < 1e-9);
  CHECK(std::abs(a.probs.at(0, 1) - std::exp(1.0) / z) < 1e-9);
  for (int j = 0; j < 3; ++j) CHECK(std::abs(a.probs.at(0, j) - b.probs.at(0, j)) < 1e-15);
}

TEST_CASE("label broadcast") {
  Grid<std::int32_t> one(3, 3, 0);
  RegionDistribution d{Tensor({1, 3}, std::vector<double>{0.2, 0.5, 0.3}), {0}};
  const auto m1 = broadcast_labels(d, LabelGrid::from_labels(one));
  for (auto v : m1.storage()) CHECK(v == 1);
  RegionDistribution tie{Tensor({1, 2}, std::vector<double>{0.5, 0.5}), {0}};
  const auto m2 = broadcast_labels(tie, LabelGrid::from_labels(one));
  for (auto v : m2.storage()) CHECK(v == 0);

  auto q = quadrants(6, 6);
  RegionDistribution four{Tensor({3, 4}, std::vector<double>{0.1, 0.2, 0.3, 0.4,  //
                                                              0.7, 0.1, 0.1, 0.1,  //
                                                              0.0, 0.0, 1.0, 0.0}),
                          {3, 1, 2}};
  auto mask = broadcast_labels(four, q);
  const int expect[4] = {kUndefined, 0, 2, 3};
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) CHECK(mask.at(y, x) == expect[q.labels.at(y, x)]);
}

TEST_CASE("multi-scale fusion") {
  PixelDistribution a{Tensor({2, 1, 1}, std::vector<double>{0.6, 0.4}), Mask(1, 1, 1)};
  PixelDistribution b{Tensor({2, 1, 1}, std::vector<double>{0.0, 1.0}), Mask(1, 1, 1)};
  std::vector<PixelDistribution> votes{a, a, b};
  // (0.6 + 0.6 + 0) / 3 = 0.4 < (0.4 + 0.4 + 1) / 3 = 0.6
  CHECK(multiscale_fuse(votes).at(0, 0) == 1);

  Rng rng(16);
  auto p = random_tensor({3, 4, 4}, rng, 0, 1);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      double s = p.at(0, y, x) + p.at(1, y, x) + p.at(2, y, x);
      for (int c = 0; c < 3; ++c) p.at(c, y, x) /= s;
    }
  PixelDistribution single{p, Mask(4, 4, 1)};
  std::vector<PixelDistribution> same{single, single, single};
  CHECK(multiscale_fuse(same) == argmax_map(p));

  auto q = random_tensor({3, 4, 4}, rng, 0, 1);
  PixelDistribution other{q, Mask(4, 4, 1)};
  PixelDistribution uniform{Tensor({3, 4, 4}, 1.0 / 3), Mask(4, 4, 1)};
  std::vector<PixelDistribution> with_uniform{single, other, uniform}, pair{single, other};
  CHECK(multiscale_fuse(with_uniform) == multiscale_fuse(pair));

  // A pixel undefined at one scale is fused from the others.
  PixelDistribution holes = single;
  holes.defined.at(0, 0) = 0;
  std::vector<PixelDistribution> partial{holes, other};
  std::vector<PixelDistribution> only_other{other};
  CHECK(multiscale_fuse(partial).at(0, 0) == multiscale_fuse(only_other).at(0, 0));
}

TEST_CASE("region distribution gradients match finite differences") {
  Rng rng(17);
  const auto img = random_tensor({3, 8, 8}, rng, 0, 1);
  auto g8 = testutil::random_layout(8, 8, 4, rng);
  Mask valid(8, 8, 1);
  valid.at(2, 5) = 0;
  for (auto rwe : {RweStrategy::max, RweStrategy::mean, RweStrategy::spp, RweStrategy::interp}) {
    Model m(toy_config(rwe));
    m.initialize(18);
    auto w = random_tensor({g8.region_count, 3}, rng);
    auto flat = [&](const Model& mm) {
      std::vector<double> x;
      for (const auto& p : mm.parameters()) x.insert(x.end(), p.value.data().begin(), p.value.data().end());
      return x;
    };
    auto value = [&](const std::vector<double>& x) {
      Model mm = m;
      std::size_t o = 0;
      for (auto& p : mm.parameters())
        for (auto& v : p.value.storage()) v = x[o++];
      auto d = predict_regions(mm, img, valid, g8);
      double s = 0;
      for (int r = 0; r < d.probs.dim(0); ++r)
        for (int k = 0; k < 3; ++k) s += w.at(r, k) * d.probs.at(r, k);
      return s;
    };
    ad::Graph g;
    auto bm = bind(g, m, true);
    auto emb = backbone_forward(g, bm, ad::mask_pixels(g, g.constant(img), valid));
    auto head = region_head(g, bm, emb, g8, valid);
    auto probs = ad::softmax_rows(g, head.logits);
    Tensor wr({static_cast<int>(head.region_ids.size()), 3});
    for (std::size_t i = 0; i < head.region_ids.size(); ++i)
      for (int k = 0; k < 3; ++k) wr.at(static_cast<int>(i), k) = w.at(static_cast<int>(i), k);
    g.backward(ad::dot_constant(g, probs, wr));
    std::vector<double> grad;
    for (auto v : bm.params) {
      const Tensor t = g.grad(v);
      grad.insert(grad.end(), t.data().begin(), t.data().end());
    }
    auto rep = testutil::fd_check(value, flat(m), grad, testutil::pick_coords(grad.size(), 20, rng));
    CHECK_MESSAGE(rep.worst < 1e-4, to_string(rwe));
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto path = std::filesystem::temp_directory_path() / "inmars_test_model.ckpt";
  Model m(toy_config(RweStrategy::spp, 4));
  m.initialize(19);
  json state{{"epochs_done", 3}};
  save_checkpoint(path, m, state, {{"extra.a", Tensor({2}, std::vector<double>{1.5, -2})}});
  auto back = load_checkpoint(path);
  CHECK(back.model.config().to_json() == m.config().to_json());
  CHECK(back.train_state == state);
  REQUIRE(back.extra.size() == 1);
  CHECK(back.extra[0].value[1] == -2);
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    CHECK(back.model.parameters()[i].value.storage() == m.parameters()[i].value.storage());
  Rng rng(20);
  auto img = random_tensor({4, 8, 8}, rng, 0, 1);
  auto g = quadrants(8, 8);
  CHECK(predict_regions(back.model, img, Mask(8, 8, 1), g).probs.storage() ==
        predict_regions(m, img, Mask(8, 8, 1), g).probs.storage());

  std::ofstream(path, std::ios::binary | std::ios::trunc) << "not a checkpoint";
  CHECK_THROWS(load_checkpoint(path));
}

TEST_CASE("config validation and serialisation") {
  auto c = toy_config(RweStrategy::interp);
  CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(parse_rwe("avg"), ConfigError);
  c.clusters = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
