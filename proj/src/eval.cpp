#include "inmars/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "inmars/errors.hpp"

namespace inmars::eval {

namespace fs = std::filesystem;

// ---- confusion matrix -------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int clusters, int classes) : k_(clusters), n_(classes) {
  if (clusters < 1 || classes < 1) throw ShapeError("confusion matrix needs K >= 1 and N_gt >= 1");
  counts_.assign(static_cast<std::size_t>(k_) * n_, 0);
}

ConfusionMatrix ConfusionMatrix::from_rows(const std::vector<std::vector<std::int64_t>>& rows) {
  if (rows.empty() || rows.front().empty()) throw ShapeError("empty confusion matrix");
  ConfusionMatrix cm(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
  for (int k = 0; k < cm.k_; ++k) {
    if (static_cast<int>(rows[static_cast<std::size_t>(k)].size()) != cm.n_) throw ShapeError("ragged confusion matrix");
    for (int c = 0; c < cm.n_; ++c) {
      const std::int64_t v = rows[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
      if (v < 0) throw DataError("confusion counts must be non-negative");
      cm.at(k, c) = v;
    }
  }
  return cm;
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t s = 0;
  for (auto v : counts_) s += v;
  return s;
}

std::int64_t ConfusionMatrix::add(const model::SegmentationMask& pred, const Grid<std::int32_t>& gt, const Mask& valid) {
  if (pred.height() != gt.height() || pred.width() != gt.width() || valid.height() != gt.height() ||
      valid.width() != gt.width())
    throw ShapeError("prediction, ground truth and valid mask differ in size");
  std::int64_t added = 0;
  for (std::size_t p = 0; p < pred.size(); ++p) {
    if (!valid[p] || pred[p] < 0) continue;
    const int k = pred[p], c = gt[p];
    if (k >= k_) throw DataError("predicted cluster id " + std::to_string(k) + " outside [0, K)");
    if (c < 0 || c >= n_) throw DataError("ground-truth class " + std::to_string(c) + " on a valid pixel is outside [0, N_gt)");
    ++at(k, c);
    ++added;
  }
  return added;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_ || other.n_ != n_) throw ShapeError("cannot merge confusion matrices of different shapes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

// ---- assignment ------------------------------------------------------------------------------

std::vector<int> hungarian_max(const std::vector<std::vector<std::int64_t>>& weights) {
  const int n = static_cast<int>(weights.size());
  if (n == 0) return {};
  for (const auto& r : weights)
    if (static_cast<int>(r.size()) != n) throw ShapeError("hungarian_max needs a square matrix");
  // Shortest augmenting paths with potentials on cost = -weight (1-indexed, row 0 / col 0 are sentinels).
  constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> u(n + 1, 0), v(n + 1, 0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      std::int64_t delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const std::int64_t cur = -weights[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) minv[j] = cur, way[j] = j0;
        if (minv[j] < delta) delta = minv[j], j1 = j;
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) u[p[j]] += delta, v[j] -= delta;
        else minv[j] -= delta;
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> col_of(n);
  for (int j = 1; j <= n; ++j) col_of[p[j] - 1] = j - 1;
  return col_of;
}

namespace {

using Matrix = std::vector<std::vector<std::int64_t>>;

// Best total on the square matrix after removing fixed rows and columns.
std::int64_t optimum_with(const Matrix& w, const std::vector<char>& row_fixed, const std::vector<char>& col_fixed) {
  std::vector<int> rows, cols;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!row_fixed[i]) rows.push_back(static_cast<int>(i));
    if (!col_fixed[i]) cols.push_back(static_cast<int>(i));
  }
  Matrix sub(rows.size(), std::vector<std::int64_t>(cols.size()));
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = 0; b < cols.size(); ++b) sub[a][b] = w[static_cast<std::size_t>(rows[a])][static_cast<std::size_t>(cols[b])];
  const auto assign = hungarian_max(sub);
  std::int64_t s = 0;
  for (std::size_t a = 0; a < rows.size(); ++a) s += sub[a][static_cast<std::size_t>(assign[a])];
  return s;
}

}  // namespace

MappingResult best_mapping(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total <= 0) throw DegenerateInputError("confusion matrix has no counts");
  const int k = cm.clusters(), nc = cm.classes(), n = std::max(k, nc);
  Matrix w(static_cast<std::size_t>(n), std::vector<std::int64_t>(static_cast<std::size_t>(n), 0));
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < nc; ++c) w[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = cm.at(r, c);

  std::vector<char> row_fixed(static_cast<std::size_t>(n), 0), col_fixed(static_cast<std::size_t>(n), 0);
  const std::int64_t best = optimum_with(w, row_fixed, col_fixed);

  // Fix clusters one at a time to the smallest column that keeps the optimum reachable.
  // Padding columns (index >= N_gt) stand for "unmatched" and are interchangeable.
  MappingResult out;
  out.cluster_to_class.assign(static_cast<std::size_t>(k), kUnmatched);
  std::int64_t fixed_sum = 0;
  for (int r = 0; r < k; ++r) {
    row_fixed[static_cast<std::size_t>(r)] = 1;
    bool placed = false;
    for (int c = 0; c < n && !placed; ++c) {
      if (col_fixed[static_cast<std::size_t>(c)]) continue;
      col_fixed[static_cast<std::size_t>(c)] = 1;
      const std::int64_t gain = w[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      if (fixed_sum + gain + optimum_with(w, row_fixed, col_fixed) == best) {
        fixed_sum += gain;
        out.cluster_to_class[static_cast<std::size_t>(r)] = c < nc ? c : kUnmatched;
        placed = true;
      } else {
        col_fixed[static_cast<std::size_t>(c)] = 0;
      }
    }
    if (!placed) throw Error("best_mapping: no column preserves the optimum");
  }
  out.matched = best;
  out.acc = static_cast<double>(best) / static_cast<double>(total);
  return out;
}

std::vector<double> per_class_recall(const ConfusionMatrix& cm, const MappingResult& m) {
  std::vector<double> out(static_cast<std::size_t>(cm.classes()), std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < cm.classes(); ++c) {
    std::int64_t col = 0;
    for (int k = 0; k < cm.clusters(); ++k) col += cm.at(k, c);
    if (col == 0) continue;
    std::int64_t hit = 0;
    for (int k = 0; k < cm.clusters(); ++k)
      if (m.cluster_to_class[static_cast<std::size_t>(k)] == c) hit += cm.at(k, c);
    out[static_cast<std::size_t>(c)] = static_cast<double>(hit) / static_cast<double>(col);
  }
  return out;
}

// ---- variants ------------------------------------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::b: return "b";
    case Variant::standard: return "standard";
    case Variant::plus: return "plus";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "b") return Variant::b;
  if (s == "standard") return Variant::standard;
  if (s == "plus") return Variant::plus;
  throw ConfigError("unknown eval variant '" + s + "' (expected b, standard or plus)");
}

std::vector<superpixel::LabelGrid> grids_for(Variant v, const datasets::Sample& sample, const RegionSource& regions) {
  if (v == Variant::b) return {};
  if (!regions.manifest) throw ConfigError("variant " + to_string(v) + " needs a superpixel cache");
  if (regions.class_count < 1) throw ConfigError("region source lacks the class count");
  std::vector<int> ns;
  if (v == Variant::standard) ns = {2 * regions.class_count};
  else ns = superpixel::resolution_set(regions.class_count);
  std::vector<superpixel::LabelGrid> out;
  for (int n : ns) {
    superpixel::SlicParams p = regions.base;
    p.n_segments = n;
    try {
      out.push_back(superpixel::load_cached(*regions.manifest, sample, p));
    } catch (const MissingPrerequisite& e) {
      throw ConfigError("superpixel cache lacks resolution " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

model::SegmentationMask predict_with_grids(Variant v, const model::Model& model, const datasets::Sample& sample,
                                           const std::vector<superpixel::LabelGrid>& grids) {
  model::SegmentationMask mask;
  if (v == Variant::b) {
    Tensor x = sample.image;
    const std::size_t hw = sample.valid_mask.size();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!sample.valid_mask[i % hw]) x[i] = 0.0;
    mask = model::argmax_map(model::backbone_forward(model, x), &sample.valid_mask);
  } else if (v == Variant::standard) {
    if (grids.size() != 1) throw ConfigError("standard variant needs exactly one superpixel resolution");
    mask = model::broadcast_labels(model::predict_regions(model, sample.image, sample.valid_mask, grids[0]), grids[0]);
  } else {
    if (grids.empty()) throw ConfigError("plus variant needs at least one superpixel resolution");
    std::vector<model::PixelDistribution> scales;
    for (const auto& g : grids)
      scales.push_back(model::broadcast_probs(model::predict_regions(model, sample.image, sample.valid_mask, g), g));
    mask = model::multiscale_fuse(scales);
  }
  for (std::size_t p = 0; p < mask.size(); ++p)
    if (!sample.valid_mask[p]) mask[p] = model::kUndefined;
  return mask;
}

model::SegmentationMask predict(Variant v, const model::Model& model, const datasets::Sample& sample,
                                const RegionSource& regions) {
  return predict_with_grids(v, model, sample, grids_for(v, sample, regions));
}

EvalReport evaluate(Variant v, const model::Model& model, const std::vector<datasets::Sample>& samples,
                    const RegionSource& regions, int class_count, bool keep_masks) {
  if (samples.empty()) throw DegenerateInputError("evaluation set is empty");
  EvalReport rep;
  rep.variant = v;
  rep.confusion = ConfusionMatrix(model.config().clusters, class_count);
  for (const auto& s : samples) {
    if (!s.gt_labels) throw DataError("sample " + s.id + " has no ground truth");
    model::SegmentationMask m = predict(v, model, s, regions);
    rep.confusion.add(m, *s.gt_labels, s.valid_mask);
    rep.sample_ids.push_back(s.id);
    if (keep_masks) rep.masks.push_back(std::move(m));
  }
  rep.mapping = best_mapping(rep.confusion);
  rep.recall = per_class_recall(rep.confusion, rep.mapping);
  return rep;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  char buf[64];
  os << "variant: " << to_string(variant) << "\n";
  std::snprintf(buf, sizeof buf, "%.6f", mapping.acc);
  os << "acc: " << buf << "\n";
  os << "mapping_scope: global\n";
  os << "valid_pixels: " << confusion.total() << "\n";
  os << "matched_pixels: " << mapping.matched << "\n";
  os << "mapping:";
  for (std::size_t k = 0; k < mapping.cluster_to_class.size(); ++k) {
    os << " " << k << "->";
    if (mapping.cluster_to_class[k] == kUnmatched) os << "none";
    else os << mapping.cluster_to_class[k];
  }
  os << "\nrecall:";
  for (std::size_t c = 0; c < recall.size(); ++c) {
    if (std::isnan(recall[c])) {
      os << " " << c << "=n/a";
    } else {
      std::snprintf(buf, sizeof buf, "%.6f", recall[c]);
      os << " " << c << "=" << buf;
    }
  }
  os << "\nconfusion:\n";
  for (int k = 0; k < confusion.clusters(); ++k) {
    os << " ";
    for (int c = 0; c < confusion.classes(); ++c) os << " " << confusion.at(k, c);
    os << "\n";
  }
  return os.str();
}

// ---- rendering -----------------------------------------------------------------------------------

namespace {

std::array<std::uint8_t, 3> hsv(double h, double s, double v) {
  const double c = v * s, hp = h / 60.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  auto q = [m](double t) { return static_cast<std::uint8_t>(std::lround(255.0 * (t + m))); };
  return {q(r), q(g), q(b)};
}

constexpr std::array<std::array<std::uint8_t, 3>, 12> kBase{{{230, 25, 75},
                                                               {60, 180, 75},
                                                               {255, 225, 25},
                                                               {0, 130, 200},
                                                               {245, 130, 48},
                                                               {145, 30, 180},
                                                               {70, 240, 240},
                                                               {240, 50, 230},
                                                               {210, 245, 60},
                                                               {250, 190, 212},
                                                               {0, 128, 128},
                                                               {220, 190, 255}}};

}  // namespace

std::array<std::uint8_t, 3> palette_color(int index) {
  if (index < 0) return {0, 0, 0};
  if (index < static_cast<int>(kBase.size())) return kBase[static_cast<std::size_t>(index)];
  const int i = index - static_cast<int>(kBase.size());
  const double sat[3] = {0.9, 0.6, 0.4};
  const double val[2] = {1.0, 0.75};
  return hsv(std::fmod(i * 137.50776405, 360.0), sat[i % 3], val[(i / 3) % 2]);
}

std::vector<std::array<std::uint8_t, 3>> default_palette(int n) {
  std::vector<std::array<std::uint8_t, 3>> out;
  for (int i = 0; static_cast<int>(out.size()) < n; ++i) {
    const auto c = palette_color(i);
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  return out;
}

io::Rgb8Image render_mask(const model::SegmentationMask& mask, const std::vector<std::array<std::uint8_t, 3>>& palette) {
  io::Rgb8Image img{mask.height(), mask.width(), std::vector<std::uint8_t>(mask.size() * 3, 0)};
  for (std::size_t p = 0; p < mask.size(); ++p) {
    const int v = mask[p];
    if (v < 0) continue;
    if (v >= static_cast<int>(palette.size())) throw DataError("mask id " + std::to_string(v) + " has no palette colour");
    for (int ch = 0; ch < 3; ++ch) img.pixels[p * 3 + static_cast<std::size_t>(ch)] = palette[static_cast<std::size_t>(v)][static_cast<std::size_t>(ch)];
  }
  return img;
}

model::SegmentationMask decode_mask(const io::Rgb8Image& image, const std::vector<std::array<std::uint8_t, 3>>& palette) {
  std::map<std::array<std::uint8_t, 3>, int> lut;
  for (std::size_t i = 0; i < palette.size(); ++i) lut.emplace(palette[i], static_cast<int>(i));
  model::SegmentationMask out(image.height, image.width, model::kUndefined);
  for (std::size_t p = 0; p < out.size(); ++p) {
    const std::array<std::uint8_t, 3> c{image.pixels[p * 3], image.pixels[p * 3 + 1], image.pixels[p * 3 + 2]};
    if (c == std::array<std::uint8_t, 3>{0, 0, 0}) continue;
    const auto it = lut.find(c);
    if (it == lut.end()) throw DataError("rendered mask contains a colour outside the palette");
    out[p] = it->second;
  }
  return out;
}

void write_label_mask(const fs::path& path, const model::SegmentationMask& mask) {
  Grid<std::int32_t> g(mask.height(), mask.width());
  for (std::size_t p = 0; p < mask.size(); ++p) g[p] = mask[p] < 0 ? 255 : mask[p];
  io::write_label_png8(path, g);
}

void write_masks(const fs::path& dir, const std::vector<std::string>& ids, const std::vector<model::SegmentationMask>& masks,
                 int palette_size) {
  if (ids.size() != masks.size()) throw ShapeError("write_masks: ids and masks differ in length");
  fs::create_directories(dir);
  const auto palette = default_palette(palette_size);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    write_label_mask(dir / (ids[i] + ".png"), masks[i]);
    io::write_rgb8(dir / (ids[i] + "_color.png"), render_mask(masks[i], palette));
  }
}

}  // namespace inmars::eval
