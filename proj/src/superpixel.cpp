#include "inmars/superpixel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <regex>
#include <set>
#include <sstream>

#include "inmars/errors.hpp"
#include "inmars/io.hpp"

namespace inmars::superpixel {

namespace fs = std::filesystem;

void SlicParams::validate() const {
  if (n_segments < 1) throw ConfigError("n_segments must be at least 1");
  if (!(compactness > 0)) throw ConfigError("compactness must be positive");
  if (max_iters < 1) throw ConfigError("max_iters must be at least 1");
  if (!(min_region_fraction > 0 && min_region_fraction < 1)) throw ConfigError("min_region_fraction must be in (0,1)");
}

std::string to_string(MergeRule rule) { return rule == MergeRule::largest ? "largest" : "nearest_mean"; }

MergeRule parse_merge_rule(const std::string& s) {
  if (s == "nearest_mean") return MergeRule::nearest_mean;
  if (s == "largest") return MergeRule::largest;
  throw ConfigError("unknown merge rule '" + s + "' (expected nearest_mean or largest)");
}

LabelGrid LabelGrid::from_labels(Grid<std::int32_t> labels) {
  std::int32_t mx = -1;
  for (auto v : labels.storage()) {
    if (v < 0) throw DataError("negative region id in label grid");
    mx = std::max(mx, v);
  }
  LabelGrid g{std::move(labels), mx + 1};
  std::vector<char> seen(static_cast<std::size_t>(g.region_count), 0);
  for (auto v : g.labels.storage()) seen[static_cast<std::size_t>(v)] = 1;
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw DataError("region ids are not contiguous");
  return g;
}

bool is_four_connected(const LabelGrid& grid) {
  const int h = grid.height(), w = grid.width();
  std::vector<char> visited(grid.labels.size(), 0);
  std::vector<char> region_seen(static_cast<std::size_t>(grid.region_count), 0);
  std::vector<int> stack;
  for (int start = 0; start < h * w; ++start) {
    if (visited[static_cast<std::size_t>(start)]) continue;
    const auto r = grid.labels[static_cast<std::size_t>(start)];
    if (region_seen[static_cast<std::size_t>(r)]) return false;  // second component of the same region
    region_seen[static_cast<std::size_t>(r)] = 1;
    stack.push_back(start);
    visited[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int y = p / w, x = p % w;
      const int nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : nbrs) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const int q = n[0] * w + n[1];
        if (visited[static_cast<std::size_t>(q)] || grid.labels[static_cast<std::size_t>(q)] != r) continue;
        visited[static_cast<std::size_t>(q)] = 1;
        stack.push_back(q);
      }
    }
  }
  return true;
}

void check_partition(const LabelGrid& grid) {
  LabelGrid copy = LabelGrid::from_labels(grid.labels);
  if (copy.region_count != grid.region_count) throw DataError("region_count does not match the label ids");
  if (!is_four_connected(grid)) throw DataError("a region is not 4-connected");
}

// ---- features ------------------------------------------------------------------

namespace {

double srgb_to_linear(double v) { return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4); }
double lab_f(double t) { return t > 0.008856 ? std::cbrt(t) : 7.787 * t + 16.0 / 116.0; }

}  // namespace

Tensor slic_features(const Tensor& image) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (c != 1 && c != 3 && c != 4) throw ShapeError("slic: images must have 1, 3 or 4 channels");
  const int nf = c == 1 ? 1 : (c == 3 ? 3 : 4);
  Tensor f({nf, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (c == 1) {
        f.at(0, y, x) = 100.0 * image.at(0, y, x);
        continue;
      }
      const double r = srgb_to_linear(image.at(0, y, x));
      const double g = srgb_to_linear(image.at(1, y, x));
      const double b = srgb_to_linear(image.at(2, y, x));
      const double X = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
      const double Y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
      const double Z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
      const double fx = lab_f(X), fy = lab_f(Y), fz = lab_f(Z);
      f.at(0, y, x) = 116.0 * fy - 16.0;
      f.at(1, y, x) = 500.0 * (fx - fy);
      f.at(2, y, x) = 200.0 * (fy - fz);
      if (c == 4) f.at(3, y, x) = 100.0 * image.at(3, y, x);
    }
  return f;
}

std::pair<int, int> seed_grid(int height, int width, int n_segments) {
  const double aspect = static_cast<double>(height) / width;
  int best_rows = 1;
  double best = std::numeric_limits<double>::infinity();
  for (int rows = 1; rows <= n_segments; ++rows) {
    if (n_segments % rows != 0) continue;
    const int cols = n_segments / rows;
    if (rows > height || cols > width) continue;
    const double err = std::abs(std::log(static_cast<double>(rows) / cols / aspect));
    if (err < best - 1e-12) {
      best = err;
      best_rows = rows;
    }
  }
  if (std::isfinite(best)) return {best_rows, n_segments / best_rows};
  // No exact factorisation fits (e.g. a prime count above both sides): closest count, then aspect.
  int best_cols = 1, best_gap = std::numeric_limits<int>::max();
  for (int rows = 1; rows <= std::min(height, n_segments); ++rows) {
    const int cols = std::clamp(static_cast<int>(std::lround(static_cast<double>(n_segments) / rows)), 1, width);
    const int gap = std::abs(rows * cols - n_segments);
    const double err = std::abs(std::log(static_cast<double>(rows) / cols / aspect));
    if (gap < best_gap || (gap == best_gap && err < best - 1e-12)) {
      best_gap = gap;
      best = err;
      best_rows = rows;
      best_cols = cols;
    }
  }
  return {best_rows, best_cols};
}

// ---- connectivity ----------------------------------------------------------------

LabelGrid enforce_connectivity(const Grid<std::int32_t>& assignment, int n_segments, double min_region_fraction,
                               const Tensor* features) {
  const int h = assignment.height(), w = assignment.width();
  const std::size_t n = assignment.size();
  Grid<std::int32_t> comp(h, w, -1);
  std::vector<int> comp_size;
  std::vector<int> stack;
  for (std::size_t start = 0; start < n; ++start) {
    if (comp[start] >= 0) continue;
    const int id = static_cast<int>(comp_size.size());
    comp_size.push_back(0);
    comp[start] = id;
    stack.push_back(static_cast<int>(start));
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      ++comp_size.back();
      const int y = p / w, x = p % w;
      const int nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[0] >= h || nb[1] < 0 || nb[1] >= w) continue;
        const std::size_t q = static_cast<std::size_t>(nb[0]) * w + nb[1];
        if (comp[q] >= 0 || assignment[q] != assignment[static_cast<std::size_t>(p)]) continue;
        comp[q] = id;
        stack.push_back(static_cast<int>(q));
      }
    }
  }

  const int nc = static_cast<int>(comp_size.size());
  std::vector<int> parent(static_cast<std::size_t>(nc));
  std::iota(parent.begin(), parent.end(), 0);
  std::vector<int> size = comp_size;
  const int nf = features ? features->dim(0) : 0;
  if (features && (features->dim(1) != h || features->dim(2) != w)) throw ShapeError("feature map does not match assignment");
  std::vector<double> fsum(static_cast<std::size_t>(nc) * nf, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (int f = 0; f < nf; ++f) fsum[static_cast<std::size_t>(comp[p]) * nf + f] += features->data()[f * n + p];
  std::vector<std::set<int>> adj(static_cast<std::size_t>(nc));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int a = comp.at(y, x);
      if (x + 1 < w && comp.at(y, x + 1) != a) {
        adj[static_cast<std::size_t>(a)].insert(comp.at(y, x + 1));
        adj[static_cast<std::size_t>(comp.at(y, x + 1))].insert(a);
      }
      if (y + 1 < h && comp.at(y + 1, x) != a) {
        adj[static_cast<std::size_t>(a)].insert(comp.at(y + 1, x));
        adj[static_cast<std::size_t>(comp.at(y + 1, x))].insert(a);
      }
    }

  auto find = [&](int a) {
    while (parent[static_cast<std::size_t>(a)] != a) {
      parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
      a = parent[static_cast<std::size_t>(a)];
    }
    return a;
  };
  auto mean_gap = [&](int a, int b) {
    double d2 = 0;
    const double sa = size[static_cast<std::size_t>(a)], sb = size[static_cast<std::size_t>(b)];
    for (int f = 0; f < nf; ++f) {
      const double d = fsum[static_cast<std::size_t>(a) * nf + f] / sa - fsum[static_cast<std::size_t>(b) * nf + f] / sb;
      d2 += d * d;
    }
    return d2;
  };
  auto pick_neighbour = [&](int r) {
    int best = -1;
    double best_gap = 0;
    std::set<int> live;
    for (int nb : adj[static_cast<std::size_t>(r)]) {
      const int q = find(nb);
      if (q == r) continue;
      live.insert(q);
      const double gap = nf > 0 ? mean_gap(r, q) : 0.0;
      const auto sq = size[static_cast<std::size_t>(q)];
      if (best < 0 || gap < best_gap ||
          (gap == best_gap && (sq > size[static_cast<std::size_t>(best)] ||
                               (sq == size[static_cast<std::size_t>(best)] && q < best)))) {
        best = q;
        best_gap = gap;
      }
    }
    adj[static_cast<std::size_t>(r)] = std::move(live);
    return best;
  };
  auto merge_into = [&](int r, int target) {
    parent[static_cast<std::size_t>(r)] = target;
    size[static_cast<std::size_t>(target)] += size[static_cast<std::size_t>(r)];
    for (int f = 0; f < nf; ++f) fsum[static_cast<std::size_t>(target) * nf + f] += fsum[static_cast<std::size_t>(r) * nf + f];
    auto& dst = adj[static_cast<std::size_t>(target)];
    dst.insert(adj[static_cast<std::size_t>(r)].begin(), adj[static_cast<std::size_t>(r)].end());
    adj[static_cast<std::size_t>(r)].clear();
  };

  const double min_size = min_region_fraction * static_cast<double>(n) / n_segments;
  std::vector<int> order(static_cast<std::size_t>(nc));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return comp_size[static_cast<std::size_t>(a)] < comp_size[static_cast<std::size_t>(b)]; });
  int roots = nc;
  for (int c : order) {
    const int r = find(c);
    if (size[static_cast<std::size_t>(r)] >= min_size) continue;
    const int target = pick_neighbour(r);
    if (target < 0) continue;
    merge_into(r, target);
    --roots;
  }
  const int cap = 2 * n_segments;
  while (roots > cap) {
    int smallest = -1;
    for (int c = 0; c < nc; ++c) {
      if (find(c) != c) continue;
      if (smallest < 0 || size[static_cast<std::size_t>(c)] < size[static_cast<std::size_t>(smallest)]) smallest = c;
    }
    const int target = pick_neighbour(smallest);
    if (target < 0) break;
    merge_into(smallest, target);
    --roots;
  }

  std::vector<int> relabel(static_cast<std::size_t>(nc), -1);
  Grid<std::int32_t> out(h, w);
  int next = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const int r = find(comp[p]);
    if (relabel[static_cast<std::size_t>(r)] < 0) relabel[static_cast<std::size_t>(r)] = next++;
    out[p] = relabel[static_cast<std::size_t>(r)];
  }
  return LabelGrid{std::move(out), next};
}

// ---- SLIC --------------------------------------------------------------------------

LabelGrid slic_segment(const Tensor& image, const SlicParams& params) {
  params.validate();
  if (image.rank() != 3) throw ShapeError("slic: image must be (c,h,w)");
  if (!image.all_finite()) throw DataError("slic: image has non-finite values");
  const int h = image.dim(1), w = image.dim(2);
  const int n_pixels = h * w;
  if (params.n_segments > n_pixels) throw ConfigError("n_segments exceeds the pixel count");

  const Tensor feat = slic_features(image);
  const int nf = feat.dim(0);
  const auto [rows, cols] = seed_grid(h, w, params.n_segments);
  const int k = rows * cols;
  const double step = std::sqrt(static_cast<double>(n_pixels) / params.n_segments);
  const double spatial_weight = (params.compactness / step) * (params.compactness / step);

  auto grad_mag = [&](int y, int x) {
    double g = 0.0;
    for (int f = 0; f < nf; ++f) {
      const double dx = feat.at(f, y, std::min(x + 1, w - 1)) - feat.at(f, y, std::max(x - 1, 0));
      const double dy = feat.at(f, std::min(y + 1, h - 1), x) - feat.at(f, std::max(y - 1, 0), x);
      g += dx * dx + dy * dy;
    }
    return g;
  };

  // Centre layout: [features..., y, x], positions in pixel-centre coordinates.
  const int dim = nf + 2;
  std::vector<double> centers(static_cast<std::size_t>(k) * dim);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      double cy = (i + 0.5) * h / rows, cx = (j + 0.5) * w / cols;
      int py = std::min(h - 1, static_cast<int>(cy)), px = std::min(w - 1, static_cast<int>(cx));
      // Move the seed to the lowest-gradient pixel of its 3x3 neighbourhood.
      double best = grad_mag(py, px);
      int by = py, bx = px;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = py + dy, xx = px + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const double g = grad_mag(yy, xx);
          if (g < best) {
            best = g;
            by = yy;
            bx = xx;
          }
        }
      if (by != py || bx != px) {
        cy = by + 0.5;
        cx = bx + 0.5;
      }
      double* c = &centers[static_cast<std::size_t>(i * cols + j) * dim];
      for (int f = 0; f < nf; ++f) c[f] = feat.at(f, by, bx);
      c[nf] = cy;
      c[nf + 1] = cx;
    }

  const double win_y = std::max(step, static_cast<double>(h) / rows);
  const double win_x = std::max(step, static_cast<double>(w) / cols);
  Grid<std::int32_t> label(h, w, -1);
  std::vector<double> dist(static_cast<std::size_t>(n_pixels));

  auto distance = [&](const double* c, int y, int x) {
    double dc = 0.0;
    for (int f = 0; f < nf; ++f) {
      const double d = feat.at(f, y, x) - c[f];
      dc += d * d;
    }
    const double dy = y + 0.5 - c[nf], dx = x + 0.5 - c[nf + 1];
    return dc + spatial_weight * (dy * dy + dx * dx);
  };

  for (int iter = 0; iter < params.max_iters; ++iter) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    Grid<std::int32_t> next(h, w, -1);
    for (int ci = 0; ci < k; ++ci) {
      const double* c = &centers[static_cast<std::size_t>(ci) * dim];
      const int y0 = std::max(0, static_cast<int>(std::floor(c[nf] - win_y)));
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(c[nf] + win_y)));
      const int x0 = std::max(0, static_cast<int>(std::floor(c[nf + 1] - win_x)));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(c[nf + 1] + win_x)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double d = distance(c, y, x);
          const std::size_t p = static_cast<std::size_t>(y) * w + x;
          if (d < dist[p]) {
            dist[p] = d;
            next[p] = ci;
          }
        }
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        if (next[p] >= 0) continue;
        for (int ci = 0; ci < k; ++ci) {
          const double d = distance(&centers[static_cast<std::size_t>(ci) * dim], y, x);
          if (d < dist[p]) {
            dist[p] = d;
            next[p] = ci;
          }
        }
      }
    const bool converged = next == label;
    label = std::move(next);
    if (converged) break;

    std::vector<double> sums(centers.size(), 0.0);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int ci = label.at(y, x);
        double* s = &sums[static_cast<std::size_t>(ci) * dim];
        for (int f = 0; f < nf; ++f) s[f] += feat.at(f, y, x);
        s[nf] += y + 0.5;
        s[nf + 1] += x + 0.5;
        ++counts[static_cast<std::size_t>(ci)];
      }
    for (int ci = 0; ci < k; ++ci) {
      const int cnt = counts[static_cast<std::size_t>(ci)];
      if (cnt == 0) continue;
      for (int d = 0; d < dim; ++d)
        centers[static_cast<std::size_t>(ci) * dim + d] = sums[static_cast<std::size_t>(ci) * dim + d] / cnt;
    }
  }
  return enforce_connectivity(label, params.n_segments, params.min_region_fraction,
                              params.merge_rule == MergeRule::nearest_mean ? &feat : nullptr);
}

std::vector<int> resolution_set(int class_count) {
  if (class_count < 1) throw ConfigError("class count must be at least 1");
  std::vector<int> out{class_count, 2 * class_count, class_count * class_count};
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---- cache ----------------------------------------------------------------------------

const CacheEntry* CacheManifest::find(const std::string& sample_id, int n_segments) const {
  for (const auto& e : entries)
    if (e.sample_id == sample_id && e.n_segments == n_segments) return &e;
  return nullptr;
}

namespace {

std::string manifest_text(const std::vector<CacheEntry>& entries) {
  std::ostringstream os;
  for (const auto& e : entries) os << e.path.generic_string() << '\t' << e.sha256 << '\n';
  return os.str();
}

std::string params_key(const SlicParams& p) {
  std::ostringstream os;
  os.precision(17);
  os << "n=" << p.n_segments << ";m=" << p.compactness << ";it=" << p.max_iters << ";f=" << p.min_region_fraction
     << ";seed=" << p.seed << ";merge=" << to_string(p.merge_rule);
  return os.str();
}

bool parse_entry_name(const std::string& name, std::string& id, int& n) {
  static const std::regex re(R"(^(.*)_n(\d+)_([0-9a-f]{16})\.png$)");
  std::smatch m;
  if (!std::regex_match(name, m, re)) return false;
  id = m[1].str();
  n = std::stoi(m[2].str());
  return true;
}

}  // namespace

std::string CacheManifest::hash() const { return io::sha256_hex(manifest_text(entries)); }

std::string cache_file_name(const datasets::Sample& sample, const SlicParams& params) {
  std::string key = params_key(params);
  key.append(reinterpret_cast<const char*>(sample.image.data().data()), sample.image.size() * sizeof(double));
  return sample.id + "_n" + std::to_string(params.n_segments) + "_" + io::sha256_hex(key).substr(0, 16) + ".png";
}

LabelGrid read_label_grid(const fs::path& path) { return LabelGrid::from_labels(io::read_label_png(path)); }

CacheManifest load_manifest(const fs::path& cache_dir) {
  const fs::path mpath = cache_dir / kManifestName;
  if (!fs::exists(mpath)) throw MissingPrerequisite("superpixel cache manifest not found: " + mpath.string());
  std::ifstream in(mpath);
  if (!in) throw CacheError("cannot read " + mpath.string());
  CacheManifest m;
  m.root = cache_dir;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw CacheError("malformed manifest line in " + mpath.string() + ": " + line);
    CacheEntry e;
    e.path = line.substr(0, tab);
    e.sha256 = line.substr(tab + 1);
    if (!parse_entry_name(e.path.filename().string(), e.sample_id, e.n_segments))
      throw CacheError("unrecognised cache entry name: " + e.path.string());
    m.entries.push_back(std::move(e));
  }
  return m;
}

CacheManifest cache_superpixels(const std::vector<datasets::Sample>& samples, const std::vector<SlicParams>& params,
                                const fs::path& cache_dir) {
  std::error_code ec;
  fs::create_directories(cache_dir, ec);
  if (ec) throw CacheError("cannot create cache directory " + cache_dir.string() + ": " + ec.message());

  std::map<std::string, std::string> previous;
  std::string previous_text;
  if (fs::exists(cache_dir / kManifestName)) {
    try {
      for (const auto& e : load_manifest(cache_dir).entries) previous[e.path.generic_string()] = e.sha256;
      previous_text = std::string(
          [&] { auto b = io::read_bytes(cache_dir / kManifestName); return std::string(b.begin(), b.end()); }());
    } catch (const CacheError&) {
      previous.clear();
    }
  }

  CacheManifest m;
  m.root = cache_dir;
  for (const auto& s : samples) {
    for (const auto& p : params) {
      const std::string name = cache_file_name(s, p);
      const fs::path full = cache_dir / name;
      CacheEntry e{s.id, p.n_segments, fs::path(name), {}};
      auto it = previous.find(name);
      if (it != previous.end() && fs::exists(full)) {
        std::string actual;
        try {
          actual = io::sha256_file(full);
        } catch (const Error&) {
        }
        if (actual == it->second) {
          e.sha256 = actual;
          ++m.reused;
          m.entries.push_back(std::move(e));
          continue;
        }
      }
      const LabelGrid grid = slic_segment(s.image, p);
      try {
        io::write_label_png16(full, grid.labels);
        e.sha256 = io::sha256_file(full);
      } catch (const Error& err) {
        throw CacheError(std::string("cannot write cache entry: ") + err.what());
      }
      ++m.written;
      m.entries.push_back(std::move(e));
    }
  }
  const std::string text = manifest_text(m.entries);
  if (text != previous_text) {
    try {
      io::write_text_atomic(cache_dir / kManifestName, text);
    } catch (const Error& err) {
      throw CacheError(std::string("cannot write manifest: ") + err.what());
    }
  }
  return m;
}

LabelGrid load_cached(const CacheManifest& manifest, const datasets::Sample& sample, const SlicParams& params) {
  const std::string name = cache_file_name(sample, params);
  for (const auto& e : manifest.entries) {
    if (e.path.generic_string() != name) continue;
    const fs::path full = manifest.root / e.path;
    if (!fs::exists(full)) throw CacheError("cache entry missing on disk: " + full.string());
    if (io::sha256_file(full) != e.sha256) throw CacheError("cache entry hash mismatch: " + full.string());
    LabelGrid g = read_label_grid(full);
    if (g.height() != sample.height() || g.width() != sample.width())
      throw CacheError("cache entry size mismatch: " + full.string());
    return g;
  }
  throw MissingPrerequisite("no superpixel cache entry for sample " + sample.id + " with " +
                            std::to_string(params.n_segments) + " segments");
}

}  // namespace inmars::superpixel
