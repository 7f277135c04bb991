#include "inmars/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "inmars/datasets.hpp"
#include "inmars/errors.hpp"
#include "inmars/eval.hpp"
#include "inmars/io.hpp"
#include "inmars/superpixel.hpp"
#include "inmars/trainer.hpp"

namespace inmars::cli {

namespace fs = std::filesystem;

json default_config() {
  json train = trainer::TrainConfig{}.to_json();
  // Filled from the dataset unless set explicitly.
  train["model"]["in_channels"] = nullptr;
  train["model"]["clusters"] = nullptr;
  return json{
      {"work_dir", "inmars_run"},
      {"cache_dir", nullptr},
      {"resume", false},
      {"dataset",
       {{"kind", "synthetic"},
        {"root", "data"},
        {"name", "dataset"},
        {"height", 64},
        {"width", 64},
        {"channels", 3},
        {"class_count", 3},
        {"mapping", nullptr},
        {"resize_to", nullptr},
        {"split", {{"train", 0.8}, {"tuning", 0.1}, {"eval", 0.1}}},
        {"seed", 0}}},
      {"synthetic",
       {{"class_count", 3},
        {"height", 64},
        {"width", 64},
        {"image_count", 250},
        {"blob_min", 1},
        {"blob_max", 3},
        {"radius_min", 0.125},
        {"radius_max", 1.0 / 3.0},
        {"noise_std", 0.05},
        {"class_colors", nullptr},
        {"seed", 0}}},
      {"superpixels", {{"compactness", 5.0}, {"max_iters", 10}, {"min_region_fraction", 0.25}, {"seed", 0}, {"merge_rule", "nearest_mean"}}},
      {"train", train},
      {"eval",
       {{"variants", {"b", "standard", "plus"}},
        {"split", "eval"},
        {"checkpoint", nullptr},
        {"write_masks", true},
        {"mask_variant", "standard"}}},
      {"segment", {{"image", nullptr}, {"variant", "standard"}, {"output", nullptr}, {"checkpoint", nullptr}}}};
}

namespace {

// Recursive merge that only accepts keys present in `base`. A null or array default
// accepts any value; objects under "train.prior" style arrays are replaced whole.
void merge_into(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : patch.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!base.contains(k)) throw ConfigError("unknown config key '" + path + "'");
    json& dst = base[k];
    if (dst.is_object() && v.is_object()) merge_into(dst, v, path);
    else if (dst.is_object() && !v.is_null()) throw ConfigError("config key '" + path + "' must be an object");
    else dst = v;
  }
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

}  // namespace

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  json patch = parse_value(assignment.substr(eq + 1));
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw ConfigError("malformed override key '" + key + "'");
    parts.push_back(p);
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_into(config, patch, "");
}

json load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  json cfg = default_config();
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  json user;
  try {
    std::ifstream in(path);
    user = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
  // A run manifest carries the full effective config.
  if (user.is_object() && user.contains("command") && user.contains("config")) user = user["config"];
  merge_into(cfg, user, "");
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

namespace {

template <typename T>
T get(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

struct Context {
  std::string command;
  json config;
  std::vector<std::string> overrides;
  fs::path work_dir;
  fs::path cache_dir;
  json artifacts = json::object();
  std::string dataset_hash;
  std::string cache_hash;
};

datasets::SyntheticSpec synthetic_spec(const json& s) {
  datasets::SyntheticSpec spec;
  spec.class_count = get<int>(s, "class_count");
  spec.height = get<int>(s, "height");
  spec.width = get<int>(s, "width");
  spec.image_count = get<int>(s, "image_count");
  spec.blob_min = get<int>(s, "blob_min");
  spec.blob_max = get<int>(s, "blob_max");
  spec.radius_min = get<double>(s, "radius_min");
  spec.radius_max = get<double>(s, "radius_max");
  spec.noise_std = get<double>(s, "noise_std");
  spec.seed = get<std::uint64_t>(s, "seed");
  if (!s.at("class_colors").is_null()) spec.class_colors = get<std::vector<std::array<double, 3>>>(s, "class_colors");
  spec.validate();
  return spec;
}

datasets::DatasetSpec dataset_spec(const json& cfg) {
  const json& d = cfg.at("dataset");
  const std::string kind = get<std::string>(d, "kind");
  datasets::DatasetSpec spec;
  spec.name = get<std::string>(d, "name");
  if (kind == "synthetic") {
    const auto syn = synthetic_spec(cfg.at("synthetic"));
    spec.name = "synthetic";
    spec.height = syn.height;
    spec.width = syn.width;
    spec.channels = 3;
    spec.class_count = syn.class_count;
  } else if (kind == "directory") {
    spec.height = get<int>(d, "height");
    spec.width = get<int>(d, "width");
    spec.channels = get<int>(d, "channels");
    spec.class_count = get<int>(d, "class_count");
  } else {
    throw ConfigError("dataset.kind must be 'synthetic' or 'directory'");
  }
  const fs::path root = get<std::string>(d, "root");
  if (!d.at("mapping").is_null()) spec.merge_map = datasets::ClassMergeMap::load(get<std::string>(d, "mapping"));
  else if (fs::exists(root / "mapping.txt")) spec.merge_map = datasets::ClassMergeMap::load(root / "mapping.txt");
  else spec.merge_map = datasets::ClassMergeMap::identity(spec.class_count);
  if (!d.at("resize_to").is_null()) spec.resize_to = get<std::array<int, 2>>(d, "resize_to");
  const json& sp = d.at("split");
  spec.split = {get<double>(sp, "train"), get<double>(sp, "tuning"), get<double>(sp, "eval")};
  spec.seed = get<std::uint64_t>(d, "seed");
  spec.validate();
  return spec;
}

std::vector<datasets::Sample> load_samples(const Context& ctx, const datasets::DatasetSpec& spec) {
  const fs::path root = get<std::string>(ctx.config.at("dataset"), "root");
  if (!fs::is_directory(root / "images"))
    throw MissingPrerequisite("dataset not found at " + root.string() + " (run `inmars synth` or point dataset.root at a dataset)");
  std::vector<std::string> warnings;
  auto samples = datasets::load_dataset(spec, root, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  return samples;
}

std::vector<datasets::Sample> partition(std::vector<datasets::Sample> samples, const datasets::DatasetSpec& spec,
                                        const std::string& which) {
  auto parts = datasets::split(std::move(samples), spec);
  if (which == "train") return std::move(parts.train);
  if (which == "tuning") return std::move(parts.tuning);
  if (which == "eval") return std::move(parts.eval);
  if (which == "all") {
    auto all = std::move(parts.train);
    for (auto* p : {&parts.tuning, &parts.eval})
      for (auto& s : *p) all.push_back(std::move(s));
    return all;
  }
  throw ConfigError("split must be train, tuning, eval or all");
}

superpixel::SlicParams slic_params(const json& cfg) {
  const json& s = cfg.at("superpixels");
  superpixel::SlicParams p;
  p.compactness = get<double>(s, "compactness");
  p.max_iters = get<int>(s, "max_iters");
  p.min_region_fraction = get<double>(s, "min_region_fraction");
  p.seed = get<std::uint64_t>(s, "seed");
  p.merge_rule = superpixel::parse_merge_rule(get<std::string>(s, "merge_rule"));
  p.validate();
  return p;
}

trainer::TrainConfig train_config(const json& cfg, const datasets::DatasetSpec& spec) {
  json t = cfg.at("train");
  json& m = t["model"];
  if (!m.at("in_channels").is_null() && m["in_channels"].get<int>() != spec.channels)
    throw ConfigError("train.model.in_channels disagrees with the dataset's channel count");
  m["in_channels"] = spec.channels;
  if (m.at("clusters").is_null()) m["clusters"] = spec.class_count;
  return trainer::TrainConfig::from_json(t);
}

fs::path checkpoint_path(const Context& ctx, const json& explicit_path) {
  if (!explicit_path.is_null()) return explicit_path.get<std::string>();
  return ctx.work_dir / "checkpoints" / "last.ckpt";
}

model::Model load_model(const fs::path& path) {
  if (!fs::exists(path)) throw MissingPrerequisite("checkpoint not found: " + path.string() + " (run `inmars train` first)");
  return model::load_checkpoint(path).model;
}

void write_manifest(const Context& ctx) {
  json seeds{{"dataset", ctx.config["dataset"]["seed"]},
             {"synthetic", ctx.config["synthetic"]["seed"]},
             {"superpixels", ctx.config["superpixels"]["seed"]},
             {"train", ctx.config["train"]["seed"]}};
  json m{{"command", ctx.command},
         {"config", ctx.config},
         {"overrides", ctx.overrides},
         {"seeds", seeds},
         {"dataset_hash", ctx.dataset_hash},
         {"cache_manifest_hash", ctx.cache_hash},
         {"cache_dir", ctx.cache_dir.string()},
         {"artifacts", ctx.artifacts}};
  fs::create_directories(ctx.work_dir);
  io::write_text_atomic(ctx.work_dir / (ctx.command + "_manifest.json"), m.dump(2) + "\n");
}

// ---- commands ---------------------------------------------------------------------------------

void cmd_synth(Context& ctx) {
  const auto spec = synthetic_spec(ctx.config.at("synthetic"));
  const fs::path root = get<std::string>(ctx.config.at("dataset"), "root");
  const auto samples = datasets::generate_synthetic(spec);
  datasets::write_dataset(root, samples, spec.class_count);
  // Hash what later commands will read back.
  ctx.dataset_hash = datasets::dataset_hash(load_samples(ctx, dataset_spec(ctx.config)));
  ctx.artifacts["dataset"] = root.string();
  std::cout << "synth: wrote " << samples.size() << " samples to " << root.string() << "\n";
}

void cmd_superpixels(Context& ctx) {
  const auto spec = dataset_spec(ctx.config);
  const auto samples = load_samples(ctx, spec);
  ctx.dataset_hash = datasets::dataset_hash(samples);
  std::vector<superpixel::SlicParams> params;
  for (int n : superpixel::resolution_set(spec.class_count)) {
    auto p = slic_params(ctx.config);
    p.n_segments = n;
    params.push_back(p);
  }
  const auto manifest = superpixel::cache_superpixels(samples, params, ctx.cache_dir);
  ctx.cache_hash = manifest.hash();
  ctx.artifacts["cache_manifest"] = (ctx.cache_dir / superpixel::kManifestName).string();
  std::cout << "superpixels: " << manifest.entries.size() << " entries (" << manifest.written << " written, "
            << manifest.reused << " reused) in " << ctx.cache_dir.string() << "\n";
}

void cmd_train(Context& ctx) {
  const auto spec = dataset_spec(ctx.config);
  const auto tc = train_config(ctx.config, spec);
  auto samples = partition(load_samples(ctx, spec), spec, "train");
  ctx.dataset_hash = datasets::dataset_hash(samples);
  const auto manifest = superpixel::load_manifest(ctx.cache_dir);
  ctx.cache_hash = manifest.hash();
  auto p = slic_params(ctx.config);
  p.n_segments = 2 * spec.class_count;
  std::vector<superpixel::LabelGrid> grids;
  for (const auto& s : samples) {
    try {
      grids.push_back(superpixel::load_cached(manifest, s, p));
    } catch (const MissingPrerequisite& e) {
      throw MissingPrerequisite(std::string(e.what()) + " (run `inmars superpixels` first)");
    }
  }

  const fs::path ckdir = ctx.work_dir / "checkpoints";
  std::optional<trainer::TrainState> resume;
  if (ctx.config.at("resume").get<bool>() && fs::exists(ckdir / "last.ckpt")) {
    resume = trainer::load_state(ckdir / "last.ckpt");
    std::cerr << "train: resuming after epoch " << resume->epochs_done << "\n";
  }
  trainer::TrainOptions opt;
  opt.checkpoint_dir = ckdir;
  opt.step_log = ctx.work_dir / "train_steps.csv";
  opt.on_epoch = [&](const trainer::EpochRecord& r, const trainer::TrainState&) {
    std::fprintf(stderr, "epoch %d/%d lr=%.3g gamma=%.3f H(Y)=%.4f H(Y|X)=%.4f R_adv=%.4g R_geo=%.4g total=%.4f (%.1fs)\n",
                 r.epoch + 1, tc.epochs, r.lr, r.gamma, r.mean.marginal, r.mean.conditional, r.mean.r_adv, r.mean.r_geo,
                 r.mean.total, r.seconds);
  };
  fs::create_directories(ctx.work_dir);
  const auto res = trainer::train(tc, samples, grids, opt, std::move(resume));
  // Epoch log accumulates across resumed runs.
  const fs::path epochs_csv = ctx.work_dir / "train_epochs.csv";
  std::string text = res.log.epochs_csv();
  if (res.state.epochs_done > static_cast<int>(res.log.epochs.size()) && fs::exists(epochs_csv)) {
    const auto old = io::read_bytes(epochs_csv);
    text = std::string(old.begin(), old.end()) + text.substr(text.find('\n') + 1);
  }
  io::write_text_atomic(epochs_csv, text);
  ctx.artifacts["checkpoint"] = (ckdir / "last.ckpt").string();
  ctx.artifacts["step_log"] = opt.step_log->string();
  ctx.artifacts["epoch_log"] = epochs_csv.string();
  std::cout << "train: " << res.state.epochs_done << " epochs, checkpoint " << (ckdir / "last.ckpt").string() << "\n";
}

void cmd_eval(Context& ctx) {
  const json& e = ctx.config.at("eval");
  const auto spec = dataset_spec(ctx.config);
  std::vector<eval::Variant> variants;
  for (const auto& v : get<std::vector<std::string>>(e, "variants")) variants.push_back(eval::parse_variant(v));
  if (variants.empty()) throw ConfigError("eval.variants is empty");
  const auto mask_variant = eval::parse_variant(get<std::string>(e, "mask_variant"));
  const fs::path ck = checkpoint_path(ctx, e.at("checkpoint"));
  const model::Model model = load_model(ck);
  const auto samples = partition(load_samples(ctx, spec), spec, get<std::string>(e, "split"));
  ctx.dataset_hash = datasets::dataset_hash(samples);

  std::optional<superpixel::CacheManifest> manifest;
  eval::RegionSource src;
  src.base = slic_params(ctx.config);
  src.class_count = spec.class_count;
  for (auto v : variants)
    if (v != eval::Variant::b && !manifest) {
      manifest = superpixel::load_manifest(ctx.cache_dir);
      ctx.cache_hash = manifest->hash();
      src.manifest = &*manifest;
    }

  const fs::path out = ctx.work_dir / "eval";
  fs::create_directories(out);
  ctx.artifacts["checkpoint"] = ck.string();
  for (auto v : variants) {
    const bool keep = e.at("write_masks").get<bool>() && v == mask_variant;
    const auto rep = eval::evaluate(v, model, samples, src, spec.class_count, keep);
    const fs::path report = out / ("report_" + eval::to_string(v) + ".txt");
    io::write_text_atomic(report, rep.to_text());
    ctx.artifacts["report_" + eval::to_string(v)] = report.string();
    if (keep) {
      const fs::path mdir = out / ("masks_" + eval::to_string(v));
      eval::write_masks(mdir, rep.sample_ids, rep.masks, model.config().clusters);
      ctx.artifacts["masks"] = mdir.string();
    }
    std::printf("eval %-8s acc=%.4f\n", eval::to_string(v).c_str(), rep.mapping.acc);
  }
}

void cmd_segment(Context& ctx) {
  const json& s = ctx.config.at("segment");
  if (s.at("image").is_null()) throw ConfigError("segment.image is required");
  const fs::path image_path = get<std::string>(s, "image");
  const auto variant = eval::parse_variant(get<std::string>(s, "variant"));
  const fs::path ck = checkpoint_path(ctx, s.at("checkpoint"));
  const model::Model model = load_model(ck);
  if (!fs::exists(image_path)) throw MissingPrerequisite("image not found: " + image_path.string());

  datasets::Sample sample;
  sample.id = image_path.stem().string();
  sample.image = io::read_image(image_path);
  if (sample.channels() != model.config().in_channels)
    throw ConfigError("image has " + std::to_string(sample.channels()) + " channels, model expects " +
                      std::to_string(model.config().in_channels));
  sample.valid_mask = Mask(sample.height(), sample.width(), 1);

  const int n_gt = dataset_spec(ctx.config).class_count;
  std::vector<int> ns;
  if (variant == eval::Variant::standard) ns = {2 * n_gt};
  else if (variant == eval::Variant::plus) ns = superpixel::resolution_set(n_gt);
  std::vector<superpixel::LabelGrid> grids;
  for (int n : ns) {
    auto p = slic_params(ctx.config);
    p.n_segments = n;
    grids.push_back(superpixel::slic_segment(sample.image, p));
  }
  const auto mask = eval::predict_with_grids(variant, model, sample, grids);
  const fs::path out = s.at("output").is_null() ? ctx.work_dir / "segment" / (sample.id + ".png")
                                                : fs::path(get<std::string>(s, "output"));
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  eval::write_label_mask(out, mask);
  fs::path color = out;
  color.replace_filename(out.stem().string() + "_color.png");
  io::write_rgb8(color, eval::render_mask(mask, eval::default_palette(model.config().clusters)));
  ctx.artifacts["checkpoint"] = ck.string();
  ctx.artifacts["mask"] = out.string();
  ctx.artifacts["mask_color"] = color.string();
  std::cout << "segment: wrote " << out.string() << "\n";
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"InMARS unsupervised segmentation"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::vector<std::string> overrides;
  for (const char* name : {"synth", "superpixels", "train", "eval", "segment"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file or run manifest")->required();
    sub->add_option("--set", overrides, "override a config key: key=value")->take_all();
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  Context ctx;
  ctx.command = app.get_subcommands().front()->get_name();
  ctx.overrides = overrides;
  try {
    ctx.config = load_config(config_path, overrides);
    ctx.work_dir = get<std::string>(ctx.config, "work_dir");
    if (const char* env = std::getenv("INMARS_CACHE_DIR"); env && *env) ctx.cache_dir = env;
    else if (!ctx.config.at("cache_dir").is_null()) ctx.cache_dir = get<std::string>(ctx.config, "cache_dir");
    else ctx.cache_dir = ctx.work_dir / "cache";

    if (ctx.command == "synth") cmd_synth(ctx);
    else if (ctx.command == "superpixels") cmd_superpixels(ctx);
    else if (ctx.command == "train") cmd_train(ctx);
    else if (ctx.command == "eval") cmd_eval(ctx);
    else cmd_segment(ctx);
    write_manifest(ctx);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return kMissingPrerequisite;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace inmars::cli
