#include "inmars/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <regex>
#include <sstream>

#include "inmars/errors.hpp"
#include "inmars/io.hpp"
#include "inmars/rng.hpp"

namespace inmars::datasets {

namespace fs = std::filesystem;

std::size_t Sample::valid_count() const {
  return static_cast<std::size_t>(std::count_if(valid_mask.storage().begin(), valid_mask.storage().end(),
                                                [](std::uint8_t v) { return v != 0; }));
}

void validate(const Sample& s, int class_count) {
  if (s.image.rank() != 3) throw DataError(s.id + ": image must be (c,h,w)");
  if (s.height() < 16 || s.width() < 16) throw DataError(s.id + ": image smaller than 16x16");
  if (!s.image.all_finite()) throw DataError(s.id + ": non-finite pixel values");
  if (s.valid_mask.height() != s.height() || s.valid_mask.width() != s.width())
    throw DataError(s.id + ": valid mask size mismatch");
  if (!s.gt_labels) return;
  const auto& gt = *s.gt_labels;
  if (gt.height() != s.height() || gt.width() != s.width()) throw DataError(s.id + ": label size mismatch");
  for (std::size_t p = 0; p < gt.size(); ++p) {
    const bool valid = s.valid_mask[p] != 0;
    if (valid && (gt[p] < 0 || (class_count > 0 && gt[p] >= class_count)))
      throw DataError(s.id + ": valid pixel without a class label");
    if (!valid && gt[p] != kInvalidLabel) throw DataError(s.id + ": label defined on an invalid pixel");
  }
}

// ---- merge map -------------------------------------------------------------

ClassMergeMap ClassMergeMap::identity(int n) {
  std::map<std::int32_t, std::int32_t> t;
  for (int i = 0; i < n; ++i) t[i] = i;
  return ClassMergeMap(std::move(t));
}

ClassMergeMap ClassMergeMap::parse(const std::string& text) {
  static const std::regex line_re(R"(^\s*(-?\d+)\s*->\s*(-?\d+|invalid)\s*$)");
  std::map<std::int32_t, std::int32_t> t;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::smatch m;
    if (!std::regex_match(line, m, line_re))
      throw DataError("mapping line " + std::to_string(lineno) + " is not `src -> coarse|invalid`: " + line);
    const auto src = static_cast<std::int32_t>(std::stol(m[1].str()));
    const std::int32_t dst = m[2].str() == "invalid" ? kInvalidLabel : static_cast<std::int32_t>(std::stol(m[2].str()));
    if (t.count(src)) throw DataError("mapping lists source id " + std::to_string(src) + " twice");
    t[src] = dst;
  }
  return ClassMergeMap(std::move(t));
}

ClassMergeMap ClassMergeMap::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("mapping file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ClassMergeMap::serialize() const {
  std::ostringstream os;
  for (const auto& [src, dst] : table_) {
    os << src << " -> ";
    if (dst == kInvalidLabel) os << "invalid"; else os << dst;
    os << '\n';
  }
  return os.str();
}

std::int32_t ClassMergeMap::apply(std::int32_t source) const {
  auto it = table_.find(source);
  if (it == table_.end()) throw DataError("label " + std::to_string(source) + " is outside the merge map domain");
  return it->second;
}

std::vector<std::int32_t> ClassMergeMap::image() const {
  std::vector<std::int32_t> out;
  for (const auto& [src, dst] : table_)
    if (dst != kInvalidLabel) out.push_back(dst);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---- dataset spec ------------------------------------------------------------

void DatasetSpec::validate() const {
  if (channels != 3 && channels != 4) throw ConfigError(name + ": channel count must be 3 or 4");
  if (height < 16 || width < 16) throw ConfigError(name + ": image size must be at least 16x16");
  if (class_count < 1) throw ConfigError(name + ": class_count must be positive");
  const double total = split.train + split.tuning + split.eval;
  if (split.train < 0 || split.tuning < 0 || split.eval < 0 || std::abs(total - 1.0) > 1e-9)
    throw ConfigError(name + ": split fractions must be non-negative and sum to 1");
  const auto img = merge_map.image();
  for (std::int32_t v : img)
    if (v < 0 || v >= class_count)
      throw ConfigError(name + ": merge map targets class " + std::to_string(v) + " outside [0, class_count)");
  // A map sending everything to invalid is accepted; the loader warns about it instead.
  if (!img.empty() && static_cast<int>(img.size()) != class_count)
    throw ConfigError(name + ": merge map is not surjective onto [0, class_count)");
  if (resize_to && ((*resize_to)[0] < 16 || (*resize_to)[1] < 16))
    throw ConfigError(name + ": resize target must be at least 16x16");
}

DatasetSpec DatasetSpec::potsdam(int class_count, ClassMergeMap merge_map) {
  DatasetSpec s;
  s.name = class_count == 3 ? "potsdam-3" : "potsdam";
  s.height = s.width = 200;
  s.channels = 4;
  s.class_count = class_count;
  s.merge_map = std::move(merge_map);
  return s;
}

DatasetSpec DatasetSpec::coco_stuff(int class_count, ClassMergeMap merge_map) {
  DatasetSpec s;
  s.name = class_count == 3 ? "coco-stuff-3" : "coco-stuff";
  s.height = s.width = 128;
  s.channels = 3;
  s.class_count = class_count;
  s.merge_map = std::move(merge_map);
  return s;
}

// ---- loading -------------------------------------------------------------------

Tensor resize_bilinear(const Tensor& image, int height, int width) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out({c, height, width});
  const double sy = static_cast<double>(h) / height, sx = static_cast<double>(w) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        out.at(ch, y, x) = (1 - wy) * ((1 - wx) * image.at(ch, y0, x0) + wx * image.at(ch, y0, x1)) +
                           wy * ((1 - wx) * image.at(ch, y1, x0) + wx * image.at(ch, y1, x1));
      }
    }
  }
  return out;
}

std::vector<Sample> load_dataset(const DatasetSpec& spec, const fs::path& root, std::vector<std::string>* warnings) {
  spec.validate();
  const fs::path image_dir = root / "images";
  const fs::path label_dir = root / "labels";
  if (!fs::is_directory(image_dir)) throw LoadError("missing image directory: " + image_dir.string());

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    const auto ext = entry.path().extension().string();
    if (ext == ".png" || ext == ".tif" || ext == ".tiff") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw LoadError("no images under " + image_dir.string());

  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
    else std::cerr << "warning: " << msg << '\n';
  };

  std::vector<Sample> out;
  out.reserve(files.size());
  std::size_t empty_samples = 0;
  for (const auto& file : files) {
    Sample s;
    s.id = file.stem().string();
    s.image = io::read_image(file);
    if (s.channels() != spec.channels)
      throw DataError(file.string() + ": expected " + std::to_string(spec.channels) + " channels, found " +
                      std::to_string(s.channels()));
    const int h = s.height(), w = s.width();
    s.valid_mask = Mask(h, w, 1);

    const fs::path label_path = label_dir / (s.id + ".png");
    if (fs::exists(label_path)) {
      Grid<std::int32_t> raw = io::read_label_png(label_path);
      if (raw.height() != h || raw.width() != w) throw DataError(label_path.string() + ": size differs from its image");
      Grid<std::int32_t> gt(h, w, kInvalidLabel);
      for (std::size_t p = 0; p < raw.size(); ++p) {
        std::int32_t v = raw[p];
        if (!spec.merge_map.table().empty()) {
          if (!spec.merge_map.contains(v))
            throw DataError(label_path.string() + ": label " + std::to_string(v) + " is outside the merge map domain");
          v = spec.merge_map.apply(v);
        } else if (v >= spec.class_count) {
          v = kInvalidLabel;
        }
        gt[p] = v;
        s.valid_mask[p] = v != kInvalidLabel;
      }
      s.gt_labels = std::move(gt);
    } else if (fs::is_directory(label_dir)) {
      throw LoadError("missing label file: " + label_path.string());
    }

    if (spec.resize_to) {
      const int nh = (*spec.resize_to)[0], nw = (*spec.resize_to)[1];
      s.image = resize_bilinear(s.image, nh, nw);
      s.valid_mask = resize_nearest(s.valid_mask, nh, nw);
      if (s.gt_labels) s.gt_labels = resize_nearest(*s.gt_labels, nh, nw);
    } else if (h != spec.height || w != spec.width) {
      throw DataError(file.string() + ": expected " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                      ", found " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (s.valid_count() == 0) ++empty_samples;
    validate(s, spec.class_count);
    out.push_back(std::move(s));
  }
  if (empty_samples == out.size()) {
    warn(spec.name + ": no sample has a valid pixel after class merging");
  } else if (empty_samples > 0) {
    warn(spec.name + ": " + std::to_string(empty_samples) + " samples have no valid pixel");
  }
  return out;
}

// ---- synthetic ------------------------------------------------------------------

std::vector<std::array<double, 3>> SyntheticSpec::resolved_colors() const {
  if (!class_colors.empty()) return class_colors;
  static const std::array<std::array<double, 3>, 6> base = {{
      {0.85, 0.20, 0.20}, {0.20, 0.75, 0.25}, {0.20, 0.30, 0.90},
      {0.90, 0.85, 0.20}, {0.75, 0.25, 0.85}, {0.15, 0.80, 0.85},
  }};
  std::vector<std::array<double, 3>> out;
  for (int k = 0; k < class_count; ++k) {
    if (k < static_cast<int>(base.size())) {
      out.push_back(base[static_cast<std::size_t>(k)]);
      continue;
    }
    // Golden-angle hues at alternating brightness.
    const double hue = std::fmod(k * 0.618033988749895, 1.0) * 6.0;
    const double v = (k % 2) ? 0.55 : 0.95, s = 0.8;
    const int sector = static_cast<int>(hue);
    const double f = hue - sector, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    std::array<double, 3> rgb{};
    switch (sector % 6) {
      case 0: rgb = {v, t, p}; break;
      case 1: rgb = {q, v, p}; break;
      case 2: rgb = {p, v, t}; break;
      case 3: rgb = {p, q, v}; break;
      case 4: rgb = {t, p, v}; break;
      default: rgb = {v, p, q}; break;
    }
    out.push_back(rgb);
  }
  return out;
}

void SyntheticSpec::validate() const {
  if (class_count < 2) throw ConfigError("synthetic class_count must be at least 2");
  if (height < 16 || width < 16) throw ConfigError("synthetic images must be at least 16x16");
  if (image_count < 1) throw ConfigError("synthetic image_count must be positive");
  if (blob_min < 0 || blob_max < blob_min) throw ConfigError("synthetic blob range is empty");
  if (!(radius_min > 0 && radius_max >= radius_min && radius_max <= 1))
    throw ConfigError("synthetic radius range must satisfy 0 < radius_min <= radius_max <= 1");
  if (noise_std < 0) throw ConfigError("synthetic noise_std must be non-negative");
  const auto colors = resolved_colors();
  if (static_cast<int>(colors.size()) != class_count)
    throw ConfigError("synthetic class_colors must list one color per class");
  double min_dist = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < colors.size(); ++a)
    for (std::size_t b = a + 1; b < colors.size(); ++b) {
      double d2 = 0;
      for (int ch = 0; ch < 3; ++ch) d2 += (colors[a][ch] - colors[b][ch]) * (colors[a][ch] - colors[b][ch]);
      min_dist = std::min(min_dist, std::sqrt(d2));
    }
  if (min_dist <= 0) throw ConfigError("synthetic class colors must be pairwise distinct");
  if (noise_std >= 0.5 * min_dist)
    throw ConfigError("synthetic noise_std must be below half the minimum inter-class color distance");
}

std::vector<Sample> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto colors = spec.resolved_colors();
  const int h = spec.height, w = spec.width, k = spec.class_count;
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.image_count));
  for (int i = 0; i < spec.image_count; ++i) {
    Rng rng = make_rng({spec.seed, static_cast<std::uint64_t>(i)});
    std::uniform_int_distribution<int> cls_dist(0, k - 1);
    std::uniform_int_distribution<int> blob_dist(spec.blob_min, spec.blob_max);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    Grid<std::int32_t> labels(h, w, cls_dist(rng));
    const std::int32_t background = labels[0];
    const int blobs = blob_dist(rng);
    const double rmin = std::min(h, w) * spec.radius_min, rmax = std::min(h, w) * spec.radius_max;
    for (int b = 0; b < blobs; ++b) {
      std::int32_t cls = static_cast<std::int32_t>(std::uniform_int_distribution<int>(0, k - 2)(rng));
      if (cls >= background) ++cls;
      const double cy = unit(rng) * h, cx = unit(rng) * w;
      const double ry = rmin + unit(rng) * (rmax - rmin), rx = rmin + unit(rng) * (rmax - rmin);
      const double theta = unit(rng) * M_PI;
      const double ct = std::cos(theta), st = std::sin(theta);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
          if ((u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0) labels.at(y, x) = cls;
        }
    }

    Sample s;
    char id[32];
    std::snprintf(id, sizeof(id), "syn_%06d", i);
    s.id = id;
    s.image = Tensor({3, h, w});
    std::normal_distribution<double> noise(0.0, spec.noise_std > 0 ? spec.noise_std : 1.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const auto& c = colors[static_cast<std::size_t>(labels.at(y, x))];
        for (int ch = 0; ch < 3; ++ch) {
          double v = c[static_cast<std::size_t>(ch)];
          if (spec.noise_std > 0) v += noise(rng);
          s.image.at(ch, y, x) = std::clamp(v, 0.0, 1.0);
        }
      }
    s.valid_mask = Mask(h, w, 1);
    s.gt_labels = std::move(labels);
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const fs::path& root, const std::vector<Sample>& samples, int class_count) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  constexpr std::int32_t kInvalidOnDisk = 255;
  for (const auto& s : samples) {
    io::write_image8(root / "images" / (s.id + ".png"), s.image);
    if (s.gt_labels) {
      Grid<std::int32_t> raw = *s.gt_labels;
      for (std::size_t p = 0; p < raw.size(); ++p)
        if (!s.valid_mask[p]) raw[p] = kInvalidOnDisk;
      io::write_label_png8(root / "labels" / (s.id + ".png"), raw);
    }
  }
  auto table = ClassMergeMap::identity(class_count).table();
  table[kInvalidOnDisk] = kInvalidLabel;
  io::write_text_atomic(root / "mapping.txt", ClassMergeMap(table).serialize());
}

// ---- split ---------------------------------------------------------------------------

std::array<std::vector<std::size_t>, 3> split_indices(std::size_t n, const SplitFractions& f, std::uint64_t seed) {
  const double total = f.train + f.tuning + f.eval;
  if (f.train < 0 || f.tuning < 0 || f.eval < 0 || std::abs(total - 1.0) > 1e-9)
    throw ConfigError("split fractions must be non-negative and sum to 1");
  const auto n_tune = static_cast<std::size_t>(std::llround(f.tuning * static_cast<double>(n)));
  const auto n_eval = static_cast<std::size_t>(std::llround(f.eval * static_cast<double>(n)));
  if (n_tune == 0 || n_eval == 0 || n_tune + n_eval >= n)
    throw ConfigError("split of " + std::to_string(n) + " samples leaves an empty partition");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng({seed, 0x5EEDu});
  std::shuffle(order.begin(), order.end(), rng);
  std::array<std::vector<std::size_t>, 3> parts;
  const std::size_t n_train = n - n_tune - n_eval;
  parts[0].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  parts[1].assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                  order.begin() + static_cast<std::ptrdiff_t>(n_train + n_tune));
  parts[2].assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_tune), order.end());
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

Partitions split(std::vector<Sample> samples, const DatasetSpec& spec) {
  const auto idx = split_indices(samples.size(), spec.split, spec.seed);
  Partitions out;
  for (std::size_t i : idx[0]) out.train.push_back(std::move(samples[i]));
  for (std::size_t i : idx[1]) out.tuning.push_back(std::move(samples[i]));
  for (std::size_t i : idx[2]) out.eval.push_back(std::move(samples[i]));
  return out;
}

std::string dataset_hash(const std::vector<Sample>& samples) {
  std::string buf;
  for (const auto& s : samples) {
    buf += s.id;
    buf.push_back('\0');
    for (int d : s.image.shape()) buf += std::to_string(d) + ",";
    buf.append(reinterpret_cast<const char*>(s.image.data().data()), s.image.size() * sizeof(double));
    buf.append(reinterpret_cast<const char*>(s.valid_mask.storage().data()), s.valid_mask.size());
    if (s.gt_labels)
      buf.append(reinterpret_cast<const char*>(s.gt_labels->storage().data()), s.gt_labels->size() * sizeof(std::int32_t));
  }
  return io::sha256_hex(buf);
}

}  // namespace inmars::datasets
