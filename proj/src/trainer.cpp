#include "inmars/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "inmars/errors.hpp"
#include "inmars/rng.hpp"

namespace inmars::trainer {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(alpha > 0 && alpha <= 1)) throw ConfigError("alpha must be in (0, 1]");
  if (!(lr_init > 0)) throw ConfigError("lr_init must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0))
    throw ConfigError("invalid Adam parameters");
  if (gamma_start < 0 || gamma_end < 0) throw ConfigError("gamma schedule must be non-negative");
  if (weights.adversarial < 0 || weights.geometric < 0) throw ConfigError("regulariser weights must be non-negative");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  model.validate();
  hyper.validate(model.clusters);
  affine.validate();
}

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

}  // namespace

json TrainConfig::to_json() const {
  return json{{"epochs", epochs},
              {"lr_init", lr_init},
              {"alpha", alpha},
              {"gamma_start", gamma_start},
              {"gamma_end", gamma_end},
              {"batch_size", batch_size},
              {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
              {"lambda", hyper.lambda},
              {"epsilon", hyper.epsilon},
              {"xi", hyper.xi},
              {"prior", hyper.prior},
              {"affine",
               {{"scale", affine.scale}, {"translate", affine.translate}, {"rotate_deg", affine.rotate_deg}, {"shear", affine.shear}}},
              {"weights", {{"adversarial", weights.adversarial}, {"geometric", weights.geometric}}},
              {"model", model.to_json()},
              {"seed", seed},
              {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    check_keys(j,
               {"epochs", "lr_init", "alpha", "gamma_start", "gamma_end", "batch_size", "adam", "lambda", "epsilon", "xi",
                "prior", "affine", "weights", "model", "seed", "checkpoint_every"},
               "train config");
    c.epochs = j.value("epochs", c.epochs);
    c.lr_init = j.value("lr_init", c.lr_init);
    c.alpha = j.value("alpha", c.alpha);
    c.gamma_start = j.value("gamma_start", c.gamma_start);
    c.gamma_end = j.value("gamma_end", c.gamma_end);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("adam")) {
      const json& a = j["adam"];
      check_keys(a, {"beta1", "beta2", "eps"}, "adam");
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    c.hyper.lambda = j.value("lambda", c.hyper.lambda);
    c.hyper.epsilon = j.value("epsilon", c.hyper.epsilon);
    c.hyper.xi = j.value("xi", c.hyper.xi);
    c.hyper.prior = j.value("prior", c.hyper.prior);
    if (j.contains("affine")) {
      const json& a = j["affine"];
      check_keys(a, {"scale", "translate", "rotate_deg", "shear"}, "affine");
      c.affine.scale = a.value("scale", c.affine.scale);
      c.affine.translate = a.value("translate", c.affine.translate);
      c.affine.rotate_deg = a.value("rotate_deg", c.affine.rotate_deg);
      c.affine.shear = a.value("shear", c.affine.shear);
    }
    if (j.contains("weights")) {
      const json& w = j["weights"];
      check_keys(w, {"adversarial", "geometric"}, "weights");
      c.weights.adversarial = w.value("adversarial", c.weights.adversarial);
      c.weights.geometric = w.value("geometric", c.weights.geometric);
    }
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j["model"]);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid train config: ") + e.what());
  }
  c.validate();
  return c;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("epoch index must be non-negative");
  return std::pow(cfg.alpha, epoch) * cfg.lr_init;
}

double gamma_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("epoch index must be non-negative");
  if (cfg.epochs == 1) return cfg.gamma_start;
  const double t = std::min(1.0, static_cast<double>(epoch) / (cfg.epochs - 1));
  // Convex combination so both endpoints come out exact.
  return (1.0 - t) * cfg.gamma_start + t * cfg.gamma_end;
}

// ---- Adam -----------------------------------------------------------------------------

Adam::Adam(const model::Model& model, AdamParams params) : params_(params) {
  for (const auto& p : model.parameters()) {
    names_.push_back(p.name);
    m_.emplace_back(p.value.shape(), 0.0);
    v_.emplace_back(p.value.shape(), 0.0);
  }
}

void Adam::step(model::Model& model, const std::vector<Tensor>& grads, double lr) {
  auto& params = model.parameters();
  if (grads.size() != params.size() || m_.size() != params.size()) throw ShapeError("Adam: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(params_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(params_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i].value;
    const Tensor& g = grads[i];
    if (!g.same_shape(w)) throw ShapeError("Adam: gradient shape mismatch for " + params[i].name);
    for (std::size_t k = 0; k < w.size(); ++k) {
      double& m = m_[i][k];
      double& v = v_[i][k];
      m = params_.beta1 * m + (1 - params_.beta1) * g[k];
      v = params_.beta2 * v + (1 - params_.beta2) * g[k] * g[k];
      w[k] -= lr * (m / c1) / (std::sqrt(v / c2) + params_.eps);
    }
  }
}

std::vector<model::NamedTensor> Adam::state() const {
  std::vector<model::NamedTensor> out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    out.push_back({"adam.m." + names_[i], m_[i]});
    out.push_back({"adam.v." + names_[i], v_[i]});
  }
  return out;
}

void Adam::restore(const std::vector<model::NamedTensor>& state, long steps) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    bool found_m = false, found_v = false;
    for (const auto& t : state) {
      if (t.name == "adam.m." + names_[i] && t.value.same_shape(m_[i])) m_[i] = t.value, found_m = true;
      if (t.name == "adam.v." + names_[i] && t.value.same_shape(v_[i])) v_[i] = t.value, found_v = true;
    }
    if (!found_m || !found_v) throw DataError("checkpoint lacks optimiser state for " + names_[i]);
  }
  t_ = steps;
}

// ---- logs -------------------------------------------------------------------------------

std::string TrainLog::csv_header() { return "step,epoch,H_Y,H_Y_given_X,R_adv,R_geo,total\n"; }

std::string TrainLog::csv_row(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%d,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.step, r.epoch, r.terms.marginal,
                r.terms.conditional, r.terms.r_adv, r.terms.r_geo, r.terms.total);
  return buf;
}

std::string TrainLog::steps_csv() const {
  std::string s = csv_header();
  for (const auto& r : steps) s += csv_row(r);
  return s;
}

std::string TrainLog::epochs_csv() const {
  std::string s = "epoch,lr,gamma,H_Y,H_Y_given_X,L_MI,R_adv,R_geo,total,seconds,seed\n";
  char buf[320];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.3f,%llu\n", e.epoch, e.lr, e.gamma,
                  e.mean.marginal, e.mean.conditional, e.mean.mi, e.mean.r_adv, e.mean.r_geo, e.mean.total, e.seconds,
                  static_cast<unsigned long long>(seed));
    s += buf;
  }
  return s;
}

// ---- training ------------------------------------------------------------------------------

TrainState initial_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.model = model::Model(cfg.model);
  s.model.initialize(derive_seed({cfg.seed, 0x1417}));
  s.adam = Adam(s.model, cfg.adam);
  return s;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng({seed, 0xE90C, static_cast<std::uint64_t>(epoch)});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

objective::LossTerms train_step(TrainState& state, const TrainConfig& cfg, const std::vector<const datasets::Sample*>& batch,
                                const std::vector<const superpixel::LabelGrid*>& regions, int epoch) {
  if (batch.size() != regions.size()) throw ShapeError("train_step: batch and region lists differ in length");
  std::vector<objective::BatchItem> items;
  for (std::size_t i = 0; i < batch.size(); ++i) items.push_back({&batch[i]->image, &batch[i]->valid_mask, regions[i]});

  objective::MIHyper hyper = cfg.hyper;
  hyper.gamma = gamma_schedule(epoch, cfg);
  const model::Model& frozen = state.model;
  const long step = state.step;
  auto perturb = [&](std::size_t i, const Tensor& p_clean) {
    Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step), i});
    objective::Perturbation p;
    if (cfg.weights.adversarial > 0)
      p.r = objective::adversarial_perturbation(objective::frozen_forward(frozen, *items[i].valid, *items[i].regions),
                                                *items[i].image, *items[i].valid, p_clean, hyper.epsilon, hyper.xi, rng);
    if (cfg.weights.geometric > 0)
      p.affine = objective::AffineTransform::sample(cfg.affine, items[i].image->dim(1), items[i].image->dim(2), rng);
    return p;
  };
  objective::LossResult res = objective::total_loss(state.model, items, hyper, cfg.weights, perturb, true);
  bool finite = std::isfinite(res.terms.total);
  for (const auto& g : res.grads) finite = finite && g.all_finite();
  if (!finite) {
    char buf[320];
    std::snprintf(buf, sizeof buf,
                  "non-finite loss at step %ld (epoch %d): H(Y)=%g H(Y|X)=%g L_MI=%g R_adv=%g R_geo=%g total=%g", step, epoch,
                  res.terms.marginal, res.terms.conditional, res.terms.mi, res.terms.r_adv, res.terms.r_geo,
                  res.terms.total);
    throw NumericError(buf);
  }
  state.adam.step(state.model, res.grads, lr_schedule(epoch, cfg));
  if (!state.model.all_finite()) throw NumericError("parameters became non-finite at step " + std::to_string(step));
  ++state.step;
  return res.terms;
}

void save_state(const fs::path& path, const TrainState& state, const TrainConfig& cfg) {
  json ts{{"epochs_done", state.epochs_done}, {"step", state.step}, {"adam_steps", state.adam.steps()}, {"config", cfg.to_json()}};
  model::save_checkpoint(path, state.model, ts, state.adam.state());
}

TrainState load_state(const fs::path& path, TrainConfig* cfg) {
  model::LoadedCheckpoint ck = model::load_checkpoint(path);
  TrainState s;
  try {
    const json& ts = ck.train_state;
    TrainConfig c = ts.contains("config") ? TrainConfig::from_json(ts["config"]) : TrainConfig{};
    s.model = std::move(ck.model);
    s.adam = Adam(s.model, c.adam);
    s.epochs_done = ts.value("epochs_done", 0);
    s.step = ts.value("step", 0L);
    if (!ck.extra.empty()) s.adam.restore(ck.extra, ts.value("adam_steps", 0L));
    if (cfg) *cfg = c;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed training state in checkpoint: ") + e.what());
  }
  return s;
}

TrainResult train(const TrainConfig& cfg, const std::vector<datasets::Sample>& samples,
                  const std::vector<superpixel::LabelGrid>& regions, const TrainOptions& options,
                  std::optional<TrainState> resume) {
  cfg.validate();
  if (samples.empty()) throw DegenerateInputError("no training samples");
  if (samples.size() != regions.size()) throw ShapeError("one label grid per training sample is required");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].channels() != cfg.model.in_channels)
      throw ConfigError("sample " + samples[i].id + " has " + std::to_string(samples[i].channels()) +
                        " channels but the model expects " + std::to_string(cfg.model.in_channels));
    if (regions[i].height() != samples[i].height() || regions[i].width() != samples[i].width())
      throw AlignmentError("label grid size differs from sample " + samples[i].id);
  }

  TrainResult out{resume ? std::move(*resume) : initial_state(cfg), {}};
  out.log.seed = cfg.seed;
  TrainState& st = out.state;
  const int last = std::min(cfg.epochs, options.stop_after.value_or(cfg.epochs));

  std::ofstream step_log;
  if (options.step_log) {
    const bool fresh = st.epochs_done == 0 || !fs::exists(*options.step_log);
    step_log.open(*options.step_log, fresh ? std::ios::trunc : std::ios::app);
    if (!step_log) throw Error("cannot open step log " + options.step_log->string());
    if (fresh) step_log << TrainLog::csv_header();
  }
  if (options.checkpoint_dir) fs::create_directories(*options.checkpoint_dir);

  for (int epoch = st.epochs_done; epoch < last; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(samples.size(), cfg.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_schedule(epoch, cfg);
    rec.gamma = gamma_schedule(epoch, cfg);
    int n_steps = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const datasets::Sample*> batch;
      std::vector<const superpixel::LabelGrid*> grids;
      for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) {
        batch.push_back(&samples[order[k]]);
        grids.push_back(&regions[order[k]]);
      }
      StepRecord sr{st.step, epoch, train_step(st, cfg, batch, grids, epoch)};
      out.log.steps.push_back(sr);
      if (step_log) step_log << TrainLog::csv_row(sr) << std::flush;
      ++n_steps;
      auto acc = [n_steps](double& m, double x) { m += (x - m) / n_steps; };
      acc(rec.mean.marginal, sr.terms.marginal);
      acc(rec.mean.conditional, sr.terms.conditional);
      acc(rec.mean.mi, sr.terms.mi);
      acc(rec.mean.r_adv, sr.terms.r_adv);
      acc(rec.mean.r_geo, sr.terms.r_geo);
      acc(rec.mean.total, sr.terms.total);
    }
    st.epochs_done = epoch + 1;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.log.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec, st);
    if (options.checkpoint_dir) {
      const bool periodic = cfg.checkpoint_every > 0 && st.epochs_done % cfg.checkpoint_every == 0;
      if (periodic) {
        char name[64];
        std::snprintf(name, sizeof name, "epoch_%04d.ckpt", st.epochs_done);
        save_state(*options.checkpoint_dir / name, st, cfg);
      }
      save_state(*options.checkpoint_dir / "last.ckpt", st, cfg);
    }
  }
  return out;
}

}  // namespace inmars::trainer
