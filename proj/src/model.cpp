#include "inmars/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "inmars/errors.hpp"
#include "inmars/io.hpp"
#include "inmars/rng.hpp"

namespace inmars::model {

namespace fs = std::filesystem;

std::string to_string(RweStrategy s) {
  switch (s) {
    case RweStrategy::max: return "max";
    case RweStrategy::mean: return "mean";
    case RweStrategy::spp: return "spp";
    case RweStrategy::interp: return "interp";
  }
  return "?";
}

RweStrategy parse_rwe(const std::string& s) {
  if (s == "max") return RweStrategy::max;
  if (s == "mean") return RweStrategy::mean;
  if (s == "spp") return RweStrategy::spp;
  if (s == "interp") return RweStrategy::interp;
  throw ConfigError("unknown RWE strategy '" + s + "' (expected max|mean|spp|interp)");
}

// ---- config ----------------------------------------------------------------------

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("model.in_channels must be positive");
  if (clusters < 2) throw ConfigError("model.clusters must be at least 2");
  if (width < 1) throw ConfigError("model.width must be positive");
  if (depth < 0 || depth > 6) throw ConfigError("model.depth must be in [0, 6]");
  if (fc_hidden < 1) throw ConfigError("model.fc_hidden must be positive");
  if (rwe == RweStrategy::spp) {
    if (spp_levels.empty()) throw ConfigError("model.spp_levels must not be empty");
    for (int l : spp_levels)
      if (l < 1) throw ConfigError("model.spp_levels entries must be positive");
  }
  if (interp_size[0] < 1 || interp_size[1] < 1) throw ConfigError("model.interp_size must be positive");
}

int ModelConfig::feature_length() const {
  switch (rwe) {
    case RweStrategy::max:
    case RweStrategy::mean: return clusters;
    case RweStrategy::spp: {
      int bins = 0;
      for (int l : spp_levels) bins += l * l;
      return clusters * bins;
    }
    case RweStrategy::interp: return clusters * interp_size[0] * interp_size[1];
  }
  return 0;
}

json ModelConfig::to_json() const {
  return json{{"in_channels", in_channels},
              {"clusters", clusters},
              {"width", width},
              {"depth", depth},
              {"activation", activation == ad::Activation::relu ? "relu" : "tanh"},
              {"rwe", to_string(rwe)},
              {"spp_levels", spp_levels},
              {"interp_size", interp_size},
              {"fc_hidden", fc_hidden}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.clusters = j.value("clusters", c.clusters);
    c.width = j.value("width", c.width);
    c.depth = j.value("depth", c.depth);
    const std::string act = j.value("activation", std::string("relu"));
    if (act == "relu") c.activation = ad::Activation::relu;
    else if (act == "tanh") c.activation = ad::Activation::tanh;
    else throw ConfigError("unknown activation '" + act + "'");
    c.rwe = parse_rwe(j.value("rwe", std::string("spp")));
    c.spp_levels = j.value("spp_levels", c.spp_levels);
    c.interp_size = j.value("interp_size", c.interp_size);
    c.fc_hidden = j.value("fc_hidden", c.fc_hidden);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- parameters ----------------------------------------------------------------------

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  auto add = [&](std::string name, std::vector<int> shape) { params_.push_back({std::move(name), Tensor(std::move(shape))}); };
  add("enc0.w", {c.width, c.in_channels, 3, 3});
  add("enc0.b", {c.width});
  for (int l = 1; l <= c.depth; ++l) {
    add("enc" + std::to_string(l) + ".w", {c.channels_at(l), c.channels_at(l - 1), 3, 3});
    add("enc" + std::to_string(l) + ".b", {c.channels_at(l)});
  }
  for (int l = c.depth - 1; l >= 0; --l) {
    add("dec" + std::to_string(l) + ".w", {c.channels_at(l), c.channels_at(l + 1) + c.channels_at(l), 3, 3});
    add("dec" + std::to_string(l) + ".b", {c.channels_at(l)});
  }
  add("out.w", {c.clusters, c.width, 1, 1});
  add("out.b", {c.clusters});
  if (c.has_fc_head()) {
    add("fc1.w", {c.feature_length(), c.fc_hidden});
    add("fc1.b", {c.fc_hidden});
    add("fc2.w", {c.fc_hidden, c.clusters});
    add("fc2.b", {c.clusters});
  }
}

void Model::initialize(std::uint64_t seed) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.value.rank() == 1) {
      p.value.fill(0.0);
      continue;
    }
    // Conv weights are (o,c,k,k), linear weights are (in,out).
    const int fan_in = p.value.rank() == 4 ? p.value.dim(1) * p.value.dim(2) * p.value.dim(3) : p.value.dim(0);
    Rng rng = make_rng({seed, 0x1A17u, static_cast<std::uint64_t>(i)});
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
    for (double& v : p.value.storage()) v = nd(rng);
  }
}

void Model::zero_output_layer() {
  parameter("out.w").fill(0.0);
  parameter("out.b").fill(0.0);
}

const Tensor& Model::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.value;
  throw ConfigError("model has no parameter '" + name + "'");
}

Tensor& Model::parameter(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const Model&>(*this).parameter(name));
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

bool Model::all_finite() const {
  return std::all_of(params_.begin(), params_.end(), [](const NamedTensor& p) { return p.value.all_finite(); });
}

ad::Var BoundModel::get(const std::string& name) const {
  const auto& ps = model->parameters();
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps[i].name == name) return params[i];
  throw ConfigError("model has no parameter '" + name + "'");
}

BoundModel bind(ad::Graph& g, const Model& model, bool requires_grad) {
  BoundModel b{&model, {}};
  for (const auto& p : model.parameters()) b.params.push_back(g.leaf(p.value, requires_grad));
  return b;
}

// ---- backbone ----------------------------------------------------------------------------

ad::Var backbone_forward(ad::Graph& g, const BoundModel& m, ad::Var image) {
  const ModelConfig& c = m.model->config();
  const Tensor& x = g.value(image);
  if (x.rank() != 3 || x.dim(0) != c.in_channels)
    throw ShapeError("backbone expects (" + std::to_string(c.in_channels) + ",h,w) input, got " +
                     Tensor::shape_string(x.shape()));
  const int unit = 1 << c.depth;
  if (x.dim(1) % unit != 0 || x.dim(2) % unit != 0)
    throw ShapeError("input " + std::to_string(x.dim(1)) + "x" + std::to_string(x.dim(2)) + " is not divisible by 2^depth = " +
                     std::to_string(unit));

  auto conv = [&](ad::Var in, const std::string& name) {
    return ad::activate(g, ad::conv2d(g, in, m.get(name + ".w"), m.get(name + ".b")), c.activation);
  };
  std::vector<ad::Var> skips;
  skips.push_back(conv(image, "enc0"));
  for (int l = 1; l <= c.depth; ++l) skips.push_back(conv(ad::avg_pool2(g, skips.back()), "enc" + std::to_string(l)));
  ad::Var h = skips.back();
  for (int l = c.depth - 1; l >= 0; --l)
    h = conv(ad::concat_channels(g, ad::upsample2(g, h), skips[static_cast<std::size_t>(l)]), "dec" + std::to_string(l));
  return ad::conv2d(g, h, m.get("out.w"), m.get("out.b"));
}

Tensor backbone_forward(const Model& model, const Tensor& image) {
  ad::Graph g;
  const BoundModel b = bind(g, model, false);
  return g.value(backbone_forward(g, b, g.constant(image)));
}

// ---- region plans -----------------------------------------------------------------------------

namespace {

struct RegionIndex {
  int count = 0;
  std::vector<std::vector<int>> members;  // valid member pixels per region
  std::vector<std::array<int, 4>> bbox;   // y0, x0, y1, x1 (inclusive) over all member pixels
};

RegionIndex index_regions(const Tensor& emb, const LabelGrid& regions, const Mask& valid) {
  if (emb.rank() != 3 || emb.dim(1) != regions.height() || emb.dim(2) != regions.width())
    throw ShapeError("embedding " + Tensor::shape_string(emb.shape()) + " does not match the label grid " +
                     std::to_string(regions.height()) + "x" + std::to_string(regions.width()));
  if (valid.height() != regions.height() || valid.width() != regions.width())
    throw ShapeError("valid mask does not match the label grid");
  RegionIndex idx;
  idx.count = regions.region_count;
  idx.members.resize(static_cast<std::size_t>(idx.count));
  idx.bbox.assign(static_cast<std::size_t>(idx.count),
                  {std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), -1, -1});
  const int w = regions.width();
  for (int y = 0; y < regions.height(); ++y)
    for (int x = 0; x < w; ++x) {
      const int r = regions.labels.at(y, x);
      if (r < 0 || r >= idx.count) throw DataError("region id out of range in label grid");
      auto& b = idx.bbox[static_cast<std::size_t>(r)];
      b = {std::min(b[0], y), std::min(b[1], x), std::max(b[2], y), std::max(b[3], x)};
      if (valid.at(y, x)) idx.members[static_cast<std::size_t>(r)].push_back(y * w + x);
    }
  return idx;
}

RegionPlan start_plan(const RegionIndex& idx, int features) {
  RegionPlan rp;
  for (int r = 0; r < idx.count; ++r) {
    if (idx.members[static_cast<std::size_t>(r)].empty()) rp.dropped.push_back(r);
    else rp.region_ids.push_back(r);
  }
  if (rp.region_ids.empty()) throw DegenerateInputError("every region is empty after validity filtering");
  rp.plan.rows = static_cast<int>(rp.region_ids.size());
  rp.plan.features = features;
  return rp;
}

// Member-and-valid test for pixel (y, x) of region r.
inline bool is_member(const LabelGrid& regions, const Mask& valid, int r, int y, int x) {
  return regions.labels.at(y, x) == r && valid.at(y, x);
}

}  // namespace

RegionPlan pool_plan(const Tensor& emb, const LabelGrid& regions, const Mask& valid, PoolStrategy strategy) {
  const RegionIndex idx = index_regions(emb, regions, valid);
  const int k = emb.dim(0);
  const std::size_t hw = static_cast<std::size_t>(emb.dim(1)) * emb.dim(2);
  RegionPlan rp = start_plan(idx, k);
  for (int r : rp.region_ids) {
    const auto& mem = idx.members[static_cast<std::size_t>(r)];
    for (int c = 0; c < k; ++c) {
      rp.plan.start_element();
      const std::size_t base = static_cast<std::size_t>(c) * hw;
      if (strategy == PoolStrategy::mean) {
        const double wgt = 1.0 / static_cast<double>(mem.size());
        for (int p : mem) rp.plan.add(static_cast<int>(base) + p, wgt);
      } else {
        int best = mem.front();
        for (int p : mem)
          if (emb[base + static_cast<std::size_t>(p)] > emb[base + static_cast<std::size_t>(best)]) best = p;
        rp.plan.add(static_cast<int>(base) + best, 1.0);
      }
    }
  }
  rp.plan.finish();
  return rp;
}

RegionPlan spp_plan(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::span<const int> levels) {
  const RegionIndex idx = index_regions(emb, regions, valid);
  const int k = emb.dim(0), w = emb.dim(2);
  const std::size_t hw = static_cast<std::size_t>(emb.dim(1)) * w;
  int bins = 0;
  for (int l : levels) {
    if (l < 1) throw ConfigError("pyramid levels must be positive");
    bins += l * l;
  }
  RegionPlan rp = start_plan(idx, k * bins);
  for (int r : rp.region_ids) {
    const auto [y0, x0, y1, x1] = idx.bbox[static_cast<std::size_t>(r)];
    const int bh = y1 - y0 + 1, bw = x1 - x0 + 1;
    for (int level : levels) {
      for (int c = 0; c < k; ++c) {
        const std::size_t base = static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < level; ++i) {
          const int ry0 = y0 + (i * bh) / level;
          const int ry1 = y0 + ((i + 1) * bh + level - 1) / level;  // exclusive
          for (int j = 0; j < level; ++j) {
            const int rx0 = x0 + (j * bw) / level;
            const int rx1 = x0 + ((j + 1) * bw + level - 1) / level;
            bool masked = false;
            int best = -1;
            for (int y = ry0; y < ry1; ++y)
              for (int x = rx0; x < rx1; ++x) {
                if (!is_member(regions, valid, r, y, x)) {
                  masked = true;
                  continue;
                }
                const int p = y * w + x;
                if (best < 0 || emb[base + static_cast<std::size_t>(p)] > emb[base + static_cast<std::size_t>(best)]) best = p;
              }
            rp.plan.start_element();
            // Masked pixels read as zero; they win the max when every member is negative.
            if (best >= 0 && !(masked && emb[base + static_cast<std::size_t>(best)] < 0.0))
              rp.plan.add(static_cast<int>(base) + best, 1.0);
          }
        }
      }
    }
  }
  rp.plan.finish();
  return rp;
}

RegionPlan interp_plan(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::array<int, 2> size) {
  const RegionIndex idx = index_regions(emb, regions, valid);
  const int k = emb.dim(0), w = emb.dim(2);
  const int th = size[0], tw = size[1];
  if (th < 1 || tw < 1) throw ConfigError("interpolation size must be positive");
  const std::size_t hw = static_cast<std::size_t>(emb.dim(1)) * w;
  RegionPlan rp = start_plan(idx, k * th * tw);

  // Per-axis taps (source offset, weight); clamped taps collapse to one.
  using Taps = std::vector<std::vector<std::pair<int, double>>>;
  auto taps = [](int src, int dst) {
    Taps out(static_cast<std::size_t>(dst));
    const double s = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
      const double f = std::clamp((d + 0.5) * s - 0.5, 0.0, src - 1.0);
      const int i0 = static_cast<int>(std::floor(f));
      const int i1 = std::min(i0 + 1, src - 1);
      const double a = f - i0;
      auto& t = out[static_cast<std::size_t>(d)];
      if (i1 == i0 || a == 0.0) {
        t.emplace_back(i0, 1.0);
      } else {
        t.emplace_back(i0, 1.0 - a);
        t.emplace_back(i1, a);
      }
    }
    return out;
  };

  for (int r : rp.region_ids) {
    const auto [y0, x0, y1, x1] = idx.bbox[static_cast<std::size_t>(r)];
    const Taps ty = taps(y1 - y0 + 1, th);
    const Taps tx = taps(x1 - x0 + 1, tw);
    for (int c = 0; c < k; ++c) {
      const int base = static_cast<int>(static_cast<std::size_t>(c) * hw);
      for (int oy = 0; oy < th; ++oy)
        for (int ox = 0; ox < tw; ++ox) {
          rp.plan.start_element();
          for (const auto& [dy, wy] : ty[static_cast<std::size_t>(oy)])
            for (const auto& [dx, wx] : tx[static_cast<std::size_t>(ox)]) {
              const int y = y0 + dy, x = x0 + dx;
              if (is_member(regions, valid, r, y, x)) rp.plan.add(base + y * w + x, wy * wx);
            }
        }
    }
  }
  rp.plan.finish();
  return rp;
}

namespace {

RegionEmbeddings realise(const Tensor& emb, RegionPlan rp) {
  return RegionEmbeddings{rp.plan.apply(emb.data()), std::move(rp.region_ids), std::move(rp.dropped)};
}

}  // namespace

RegionEmbeddings pool_regions(const Tensor& emb, const LabelGrid& regions, const Mask& valid, PoolStrategy strategy) {
  return realise(emb, pool_plan(emb, regions, valid, strategy));
}

RegionEmbeddings spp_features(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::span<const int> levels) {
  return realise(emb, spp_plan(emb, regions, valid, levels));
}

RegionEmbeddings interp_features(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::array<int, 2> size) {
  return realise(emb, interp_plan(emb, regions, valid, size));
}

Tensor FcHead::apply(const Tensor& features) const {
  ad::Graph g;
  ad::Var x = g.constant(features);
  ad::Var h = ad::activate(g, ad::linear(g, x, g.constant(w1), g.constant(b1)), activation);
  return g.value(ad::linear(g, h, g.constant(w2), g.constant(b2)));
}

FcHead FcHead::from_model(const Model& model) {
  if (!model.config().has_fc_head()) throw ConfigError("model has no FC head for strategy " + to_string(model.config().rwe));
  return FcHead{model.parameter("fc1.w"), model.parameter("fc1.b"), model.parameter("fc2.w"), model.parameter("fc2.b"),
                model.config().activation};
}

RegionEmbeddings spp_embed(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::span<const int> levels,
                           const FcHead& head) {
  RegionEmbeddings f = spp_features(emb, regions, valid, levels);
  f.rows = head.apply(f.rows);
  return f;
}

RegionEmbeddings interp_embed(const Tensor& emb, const LabelGrid& regions, const Mask& valid, std::array<int, 2> size,
                              const FcHead& head) {
  RegionEmbeddings f = interp_features(emb, regions, valid, size);
  f.rows = head.apply(f.rows);
  return f;
}

RegionPlan region_plan(const ModelConfig& cfg, const Tensor& emb, const LabelGrid& regions, const Mask& valid) {
  switch (cfg.rwe) {
    case RweStrategy::max: return pool_plan(emb, regions, valid, PoolStrategy::max);
    case RweStrategy::mean: return pool_plan(emb, regions, valid, PoolStrategy::mean);
    case RweStrategy::spp: return spp_plan(emb, regions, valid, cfg.spp_levels);
    case RweStrategy::interp: return interp_plan(emb, regions, valid, cfg.interp_size);
  }
  throw ConfigError("unknown RWE strategy");
}

RegionLogits region_head(ad::Graph& g, const BoundModel& m, ad::Var emb, const LabelGrid& regions, const Mask& valid) {
  const ModelConfig& cfg = m.model->config();
  RegionPlan rp = region_plan(cfg, g.value(emb), regions, valid);
  RegionLogits out{{}, std::move(rp.region_ids), std::move(rp.dropped)};
  ad::Var f = ad::gather_sparse(g, emb, std::move(rp.plan));
  if (cfg.has_fc_head()) {
    f = ad::activate(g, ad::linear(g, f, m.get("fc1.w"), m.get("fc1.b")), cfg.activation);
    f = ad::linear(g, f, m.get("fc2.w"), m.get("fc2.b"));
  }
  out.logits = f;
  return out;
}

// ---- distributions ------------------------------------------------------------------------------

RegionDistribution region_softmax(const Tensor& logits, std::vector<int> region_ids) {
  if (logits.rank() != 2) throw ShapeError("region_softmax expects a (rows, K) matrix");
  ad::Graph g;
  RegionDistribution d{g.value(ad::softmax_rows(g, g.constant(logits))), std::move(region_ids)};
  if (d.region_ids.empty()) {
    d.region_ids.resize(static_cast<std::size_t>(logits.dim(0)));
    std::iota(d.region_ids.begin(), d.region_ids.end(), 0);
  }
  if (static_cast<int>(d.region_ids.size()) != logits.dim(0)) throw ShapeError("region id count does not match rows");
  return d;
}

namespace {

std::vector<int> row_of_region(const RegionDistribution& dist, int region_count) {
  std::vector<int> row(static_cast<std::size_t>(region_count), -1);
  for (std::size_t i = 0; i < dist.region_ids.size(); ++i) {
    const int r = dist.region_ids[i];
    if (r < 0 || r >= region_count) throw AlignmentError("distribution refers to region " + std::to_string(r) + " outside the grid");
    row[static_cast<std::size_t>(r)] = static_cast<int>(i);
  }
  return row;
}

}  // namespace

SegmentationMask broadcast_labels(const RegionDistribution& dist, const LabelGrid& regions) {
  const int k = dist.probs.dim(1);
  const auto row = row_of_region(dist, regions.region_count);
  std::vector<std::int32_t> label_of_row(static_cast<std::size_t>(dist.probs.dim(0)));
  for (int i = 0; i < dist.probs.dim(0); ++i) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (dist.probs.at(i, j) > dist.probs.at(i, best)) best = j;
    label_of_row[static_cast<std::size_t>(i)] = best;
  }
  SegmentationMask out(regions.height(), regions.width(), kUndefined);
  for (std::size_t p = 0; p < out.size(); ++p) {
    const int r = row[static_cast<std::size_t>(regions.labels[p])];
    if (r >= 0) out[p] = label_of_row[static_cast<std::size_t>(r)];
  }
  return out;
}

PixelDistribution broadcast_probs(const RegionDistribution& dist, const LabelGrid& regions) {
  const int k = dist.probs.dim(1), h = regions.height(), w = regions.width();
  const auto row = row_of_region(dist, regions.region_count);
  PixelDistribution out{Tensor({k, h, w}), Mask(h, w, 0)};
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < hw; ++p) {
    const int r = row[static_cast<std::size_t>(regions.labels[p])];
    if (r < 0) continue;
    out.defined[p] = 1;
    for (int j = 0; j < k; ++j) out.probs[static_cast<std::size_t>(j) * hw + p] = dist.probs.at(r, j);
  }
  return out;
}

PixelDistribution pixel_softmax(const Tensor& logits) {
  const int k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  PixelDistribution out{Tensor({k, h, w}), Mask(h, w, 1)};
  for (std::size_t p = 0; p < hw; ++p) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(j) * hw + p]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += (out.probs[static_cast<std::size_t>(j) * hw + p] = std::exp(logits[static_cast<std::size_t>(j) * hw + p] - mx));
    for (int j = 0; j < k; ++j) out.probs[static_cast<std::size_t>(j) * hw + p] /= z;
  }
  return out;
}

SegmentationMask argmax_map(const Tensor& map, const Mask* defined) {
  const int k = map.dim(0), h = map.dim(1), w = map.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  SegmentationMask out(h, w, kUndefined);
  for (std::size_t p = 0; p < hw; ++p) {
    if (defined && !(*defined)[p]) continue;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (map[static_cast<std::size_t>(j) * hw + p] > map[static_cast<std::size_t>(best) * hw + p]) best = j;
    out[p] = best;
  }
  return out;
}

SegmentationMask multiscale_fuse(std::span<const PixelDistribution> scales) {
  if (scales.empty()) throw DegenerateInputError("multiscale_fuse needs at least one scale");
  const auto& shape = scales.front().probs.shape();
  for (const auto& s : scales)
    if (s.probs.shape() != shape) throw ShapeError("multiscale_fuse: scales disagree in shape or K");
  const int k = shape[0], h = shape[1], w = shape[2];
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor sum({k, h, w});
  Mask defined(h, w, 0);
  std::vector<int> count(hw, 0);
  for (const auto& s : scales)
    for (std::size_t p = 0; p < hw; ++p) {
      if (!s.defined[p]) continue;
      defined[p] = 1;
      ++count[p];
      for (int j = 0; j < k; ++j) sum[static_cast<std::size_t>(j) * hw + p] += s.probs[static_cast<std::size_t>(j) * hw + p];
    }
  for (std::size_t p = 0; p < hw; ++p)
    if (count[p] > 0)
      for (int j = 0; j < k; ++j) sum[static_cast<std::size_t>(j) * hw + p] /= count[p];
  return argmax_map(sum, &defined);
}

RegionDistribution predict_regions(const Model& model, const Tensor& image, const Mask& valid, const LabelGrid& regions) {
  ad::Graph g;
  const BoundModel b = bind(g, model, false);
  ad::Var x = ad::mask_pixels(g, g.constant(image), valid);
  ad::Var emb = backbone_forward(g, b, x);
  RegionLogits rl = region_head(g, b, emb, regions, valid);
  return RegionDistribution{g.value(ad::softmax_rows(g, rl.logits)), std::move(rl.region_ids)};
}

// ---- checkpoints ----------------------------------------------------------------------------------

namespace {

constexpr const char* kMagic = "INMARS-CHECKPOINT";

}  // namespace

void save_checkpoint(const fs::path& path, const Model& model, const json& train_state) {
  save_checkpoint(path, model, train_state, {});
}

void save_checkpoint(const fs::path& path, const Model& model, const json& train_state,
                     const std::vector<NamedTensor>& extra) {
  json header;
  header["architecture"] = model.config().to_json();
  header["train_state"] = train_state;
  json entries = json::array();
  std::size_t offset = 0;
  std::vector<const NamedTensor*> all;
  for (const auto& p : model.parameters()) all.push_back(&p);
  for (const auto& p : extra) all.push_back(&p);
  for (std::size_t i = 0; i < all.size(); ++i) {
    entries.push_back({{"name", all[i]->name},
                       {"shape", all[i]->value.shape()},
                       {"offset", offset},
                       {"count", all[i]->value.size()},
                       {"role", i < model.parameters().size() ? "param" : "extra"}});
    offset += all[i]->value.size();
  }
  header["entries"] = entries;
  const std::string head = header.dump();

  std::string blob = std::string(kMagic) + " v" + std::to_string(kCheckpointVersion) + "\n" +
                     std::to_string(head.size()) + "\n" + head + "\n";
  static_assert(sizeof(double) == 8);
  for (const auto* p : all) {
    for (double v : p->value.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  io::write_text_atomic(path, blob);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw MissingPrerequisite("checkpoint not found: " + path.string());
  const auto bytes = io::read_bytes(path);
  const std::string data(bytes.begin(), bytes.end());
  std::size_t pos = data.find('\n');
  if (pos == std::string::npos) throw DataError("truncated checkpoint: " + path.string());
  const std::string magic = data.substr(0, pos);
  const std::string expected = std::string(kMagic) + " v" + std::to_string(kCheckpointVersion);
  if (magic.rfind(kMagic, 0) != 0) throw DataError("not a checkpoint file: " + path.string());
  if (magic != expected) throw DataError("unsupported checkpoint version '" + magic + "' in " + path.string());
  const std::size_t pos2 = data.find('\n', pos + 1);
  if (pos2 == std::string::npos) throw DataError("truncated checkpoint: " + path.string());
  const std::size_t head_len = std::stoull(data.substr(pos + 1, pos2 - pos - 1));
  if (pos2 + 1 + head_len + 1 > data.size()) throw DataError("truncated checkpoint header: " + path.string());
  json header;
  try {
    header = json::parse(data.substr(pos2 + 1, head_len));
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const std::size_t blob_start = pos2 + 1 + head_len + 1;

  LoadedCheckpoint out{Model(ModelConfig::from_json(header.at("architecture"))), header.value("train_state", json::object()), {}};
  auto read_tensor = [&](const json& e) {
    const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t count = e.at("count").get<std::size_t>();
    if (Tensor::count(shape) != count) throw DataError("checkpoint entry shape/count mismatch: " + e.at("name").get<std::string>());
    if (blob_start + (offset + count) * 8 > data.size()) throw DataError("checkpoint blob truncated: " + path.string());
    std::vector<double> vals(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[blob_start + (offset + i) * 8 + static_cast<std::size_t>(b)])) << (8 * b);
      std::memcpy(&vals[i], &bits, 8);
    }
    return Tensor(shape, std::move(vals));
  };
  for (const auto& e : header.at("entries")) {
    const std::string name = e.at("name").get<std::string>();
    Tensor t = read_tensor(e);
    if (e.value("role", "param") == "param") {
      Tensor& dst = out.model.parameter(name);
      if (!dst.same_shape(t)) throw DataError("checkpoint parameter " + name + " has the wrong shape");
      dst = std::move(t);
    } else {
      out.extra.push_back({name, std::move(t)});
    }
  }
  return out;
}

}  // namespace inmars::model
