#pragma once

// Mini-batch training of the DiT denoiser under VE (or, for ablations, VP)
// corruption with a log-normal noise-level schedule and Adam updates.
//
// All randomness is drawn from counter-based streams keyed by
// (seed, epoch) for shuffling and (seed, step) for noise, so the trainer's
// RNG state is just the step counter and resuming from a checkpoint replays
// the uninterrupted trajectory exactly.

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sfdit/checkpoint.hpp"
#include "sfdit/diffusion.hpp"
#include "sfdit/dit.hpp"
#include "sfdit/transforms.hpp"

namespace sfdit {

enum class Domain { ANGULAR, SPATIAL };

inline std::string to_string(Domain d) { return d == Domain::ANGULAR ? "angular" : "spatial"; }
inline Domain domain_from_string(const std::string& s) {
  if (s == "angular") return Domain::ANGULAR;
  if (s == "spatial") return Domain::SPATIAL;
  throw ConfigError("unknown domain '" + s + "' (angular|spatial)");
}

struct TrainConfig {
  std::size_t batch = 128;
  std::size_t epochs = 500;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  Corruption corruption = Corruption::VE;
  PredictionObjective objective = PredictionObjective::X_PRED;
  LossKind loss = LossKind::V_LOSS;
  Domain domain = Domain::ANGULAR;
  ScheduleParams schedule{};
  std::size_t checkpoint_every = 0;  // epochs; 0 = only the final checkpoint

  void validate() const {
    if (batch < 1) throw ConfigError("train config: batch must be >= 1");
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (!(lr > 0)) throw ConfigError("train config: lr must be positive");
    if (!(adam_beta1 > 0 && adam_beta1 < adam_beta2 && adam_beta2 < 1)) {
      throw ConfigError("train config: need 0 < beta1 < beta2 < 1");
    }
    if (!(adam_eps > 0)) throw ConfigError("train config: adam_eps must be positive");
    schedule.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch", c.batch},
       {"epochs", c.epochs},
       {"lr", c.lr},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps},
       {"seed", c.seed},
       {"corruption", to_string(c.corruption)},
       {"objective", to_string(c.objective)},
       {"loss", to_string(c.loss)},
       {"domain", to_string(c.domain)},
       {"p_mean", c.schedule.p_mean},
       {"p_std", c.schedule.p_std},
       {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.batch = j.value("batch", d.batch);
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.seed = j.value("seed", d.seed);
  c.corruption = corruption_from_string(j.value("corruption", to_string(d.corruption)));
  c.objective = objective_from_string(j.value("objective", to_string(d.objective)));
  c.loss = loss_from_string(j.value("loss", to_string(d.loss)));
  c.domain = domain_from_string(j.value("domain", to_string(d.domain)));
  c.schedule.p_mean = j.value("p_mean", d.schedule.p_mean);
  c.schedule.p_std = j.value("p_std", d.schedule.p_std);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
}

struct LossRecord {
  std::uint64_t step;
  std::uint64_t epoch;
  double loss;
  double sigma_mean;
};

template <class T>
struct TrainState {
  DitParams<T> params;
  DitParams<T> m;  // Adam first moments
  DitParams<T> v;  // Adam second moments
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;  // completed epochs
  std::vector<LossRecord> history;

  static TrainState fresh(const DitConfig& cfg, std::uint64_t init_seed) {
    TrainState s;
    s.params = init_params<T>(cfg, init_seed);
    for (const auto& [name, t] : s.params) {
      s.m.emplace(name, Tensor<T>(t.shape()));
      s.v.emplace(name, Tensor<T>(t.shape()));
    }
    return s;
  }
};

inline std::vector<CsiImage> prepare_training_images(const std::vector<ComplexMatrix>& channels, Domain domain,
                                                     const DftPair& dft) {
  std::vector<CsiImage> out;
  out.reserve(channels.size());
  for (const auto& h : channels) {
    if (h.rows() != channels.front().rows() || h.cols() != channels.front().cols()) {
      throw DimensionError("prepare_training_images: non-uniform channel shapes");
    }
    out.push_back(complex_to_image(domain == Domain::ANGULAR ? to_angular(h, dft) : h));
  }
  return out;
}

// Noise draws for one training step. For VP, `cond_sigma` holds the
// equivalent VE level sqrt((1 - ab) / ab) and `scaled` holds x_t / sqrt(ab),
// so VE losses and objective conversions apply unchanged.
struct BatchCorruption {
  Tensor<double> x0;      // [B, 2, n_r, n_t]
  Tensor<double> eps;     // same
  Tensor<double> x_t;     // network input
  Tensor<double> scaled;  // x0 + sigma * eps
  std::vector<double> cond_sigma;
  std::vector<double> alpha_bar;
};

namespace detail {
inline constexpr std::uint64_t kStepNoiseTag = 0x5354455030ull;
inline constexpr std::uint64_t kShuffleTag = 0x5348554646ull;
inline constexpr std::uint64_t kEpochNoiseTag = 0x4556414c30ull;
}  // namespace detail

inline BatchCorruption draw_batch_corruption(const TrainConfig& cfg, const std::vector<const CsiImage*>& batch,
                                             std::uint64_t step) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  BatchCorruption bc;
  bc.x0 = stack_images<double>(batch);
  bc.eps = Tensor<double>(bc.x0.shape());
  bc.x_t = bc.x0;
  bc.scaled = bc.x0;
  const std::size_t n = batch[0]->data.size();
  RandomStream rng(cfg.seed, stream_id({detail::kStepNoiseTag, step}));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    double sigma, ab = 1.0;
    if (cfg.corruption == Corruption::VE) {
      sigma = sample_sigma(cfg.schedule, rng);
    } else {
      ab = sample_vp_alpha_bar(rng);
      sigma = vp_sigma_equivalent(ab);
    }
    bc.cond_sigma.push_back(sigma);
    bc.alpha_bar.push_back(ab);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = b * n + i;
      const double e = rng.normal();
      bc.eps[k] = e;
      if (cfg.corruption == Corruption::VE) {
        bc.x_t[k] = bc.x0[k] + sigma * e;
        bc.scaled[k] = bc.x_t[k];
      } else {
        bc.x_t[k] = sa * bc.x0[k] + sn * e;
        bc.scaled[k] = bc.x0[k] + sigma * e;
      }
    }
  }
  return bc;
}

namespace detail {
template <class T>
Tensor<T> per_item(const std::vector<double>& v, bool invert) {
  Tensor<T> t({v.size(), 1, 1, 1});
  for (std::size_t b = 0; b < v.size(); ++b) t[b] = static_cast<T>(invert ? 1.0 / v[b] : v[b]);
  return t;
}
}  // namespace detail

// Converts the raw network output to x0_hat according to the objective.
template <class T>
Var<T> x0_from_output(Tape<T>& tape, Var<T> out, const BatchCorruption& bc, PredictionObjective obj) {
  if (obj == PredictionObjective::X_PRED) return out;
  // Under VE (and the VP equivalent form) v = eps, so both give z - sigma * out.
  Var<T> z = tape.constant(bc.scaled.template cast<T>());
  return sub(z, mul(out, tape.constant(detail::per_item<T>(bc.cond_sigma, false))));
}

// Mean-reduced training loss for a corrupted batch.
template <class T>
Var<T> loss_from_x0(Tape<T>& tape, Var<T> x0_hat, const BatchCorruption& bc, LossKind kind) {
  if (kind == LossKind::X_LOSS) return mean(square(sub(x0_hat, tape.constant(bc.x0.template cast<T>()))));
  // V and eps losses coincide: (z - x0_hat)/sigma is both v_hat and eps_hat.
  Var<T> z = tape.constant(bc.scaled.template cast<T>());
  Var<T> pred = mul(sub(z, x0_hat), tape.constant(detail::per_item<T>(bc.cond_sigma, true)));
  return mean(square(sub(pred, tape.constant(bc.eps.template cast<T>()))));
}

template <class T>
Var<T> training_loss(Tape<T>& tape, const ParamVars<T>& p, const DitConfig& dcfg, const TrainConfig& tcfg,
                     const BatchCorruption& bc) {
  Var<T> out = dit_forward(tape, p, dcfg, tape.constant(bc.x_t.template cast<T>()), bc.cond_sigma);
  return loss_from_x0(tape, x0_from_output(tape, out, bc, tcfg.objective), bc, tcfg.loss);
}

template <class T>
void adam_update(TrainState<T>& s, const std::map<std::string, Tensor<T>>& grads, const TrainConfig& cfg) {
  const double t = static_cast<double>(s.step + 1);
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
  const T b1 = static_cast<T>(cfg.adam_beta1), b2 = static_cast<T>(cfg.adam_beta2);
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.adam_eps);
  const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
  for (auto& [name, p] : s.params) {
    const Tensor<T>& g = grads.at(name);
    Tensor<T>& m = s.m.at(name);
    Tensor<T>& v = s.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      p[i] -= lr * (m[i] * ic1) / (std::sqrt(v[i] * ic2) + eps);
    }
  }
}

struct StepResult {
  double loss;
  double sigma_mean;
};

// One optimizer step on `batch`. Updates params, moments and the step counter.
template <class T>
StepResult train_step(TrainState<T>& s, const std::vector<const CsiImage*>& batch, const DitConfig& dcfg,
                      const TrainConfig& tcfg, std::map<std::string, Tensor<T>>* grads_out = nullptr) {
  BatchCorruption bc = draw_batch_corruption(tcfg, batch, s.step);
  Tape<T> tape;
  ParamVars<T> p = bind_params(tape, s.params, true);
  Var<T> loss = training_loss(tape, p, dcfg, tcfg, bc);
  const double lv = static_cast<double>(loss.value()[0]);
  const double sigma_mean =
      std::accumulate(bc.cond_sigma.begin(), bc.cond_sigma.end(), 0.0) / static_cast<double>(bc.cond_sigma.size());
  if (!std::isfinite(lv)) {
    std::ostringstream os;
    os << "non-finite training loss at step " << s.step << "; per-item noise levels:";
    for (std::size_t b = 0; b < bc.cond_sigma.size(); ++b) os << " [" << b << "] " << bc.cond_sigma[b];
    throw TrainingError(os.str());
  }
  tape.backward(loss);
  std::map<std::string, Tensor<T>> grads;
  for (const auto& [name, var] : p) grads.emplace(name, tape.grad(var));
  adam_update(s, grads, tcfg);
  if (grads_out) *grads_out = std::move(grads);
  ++s.step;
  return {lv, sigma_mean};
}

// Fisher-Yates permutation of [0, n) for one epoch.
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  RandomStream rng(seed, stream_id({detail::kShuffleTag, epoch}));
  for (std::size_t i = n; i-- > 1;) std::swap(idx[i], idx[rng.below(i + 1)]);
  return idx;
}

// ---- checkpoints with optimizer state ----

template <class T>
Checkpoint make_training_checkpoint(const TrainState<T>& s, const DitConfig& dcfg, const TrainConfig& tcfg,
                                    const nlohmann::json& extra = nlohmann::json::object()) {
  Checkpoint ck;
  ck.config = dcfg;
  for (const auto& [name, t] : s.params) ck.params.emplace(name, t.template cast<float>());
  for (const auto& [name, t] : s.m) ck.aux.emplace("adam_m." + name, t.template cast<float>());
  for (const auto& [name, t] : s.v) ck.aux.emplace("adam_v." + name, t.template cast<float>());
  ck.provenance = extra;
  ck.provenance["train_config"] = tcfg;
  ck.provenance["step"] = s.step;
  ck.provenance["epoch"] = s.epoch;
  if (!s.history.empty()) ck.provenance["last_loss"] = s.history.back().loss;
  return ck;
}

template <class T>
TrainState<T> state_from_checkpoint(const Checkpoint& ck) {
  TrainState<T> s;
  for (const auto& [name, t] : ck.params) {
    s.params.emplace(name, t.template cast<T>());
    auto m = ck.aux.find("adam_m." + name);
    auto v = ck.aux.find("adam_v." + name);
    s.m.emplace(name, m != ck.aux.end() ? m->second.template cast<T>() : Tensor<T>(t.shape()));
    s.v.emplace(name, v != ck.aux.end() ? v->second.template cast<T>() : Tensor<T>(t.shape()));
  }
  s.step = ck.provenance.value("step", std::uint64_t{0});
  s.epoch = ck.provenance.value("epoch", std::uint64_t{0});
  return s;
}

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::string run_name = "model";
  std::uint64_t init_seed = 0;
  std::optional<Checkpoint> resume;
  std::size_t stop_after_epochs = 0;  // 0 = run to cfg.epochs; otherwise stop early (for resume tests)
  std::function<void(const LossRecord&)> on_step;
  nlohmann::json provenance = nlohmann::json::object();
};

template <class T>
TrainState<T> train(const std::vector<CsiImage>& images, const TrainConfig& tcfg, const DitConfig& dcfg,
                    const TrainOptions& opt = {}) {
  tcfg.validate();
  dcfg.validate();
  if (images.empty()) throw ContractError("train: empty dataset");
  TrainState<T> s = opt.resume ? state_from_checkpoint<T>(*opt.resume) : TrainState<T>::fresh(dcfg, opt.init_seed);

  std::ofstream csv;
  const bool write_files = !opt.out_dir.empty();
  if (write_files) {
    std::filesystem::create_directories(opt.out_dir);
    const auto csv_path = opt.out_dir / (opt.run_name + "_loss.csv");
    csv.open(csv_path, opt.resume ? std::ios::app : std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot open loss telemetry '" + csv_path.string() + "'");
    if (!opt.resume) csv << "step,epoch,loss,sigma_mean\n";
    csv << std::setprecision(9);
  }
  auto save = [&](const std::string& suffix) {
    if (!write_files) return;
    const auto path = opt.out_dir / (opt.run_name + suffix + ".ckpt");
    try {
      save_checkpoint(path, make_training_checkpoint(s, dcfg, tcfg, opt.provenance));
    } catch (const std::exception& e) {
      throw std::runtime_error("writing checkpoint '" + path.string() + "': " + e.what());
    }
  };

  const std::size_t last_epoch =
      opt.stop_after_epochs ? std::min<std::size_t>(tcfg.epochs, opt.stop_after_epochs) : tcfg.epochs;
  std::vector<const CsiImage*> batch;
  for (std::uint64_t e = s.epoch; e < last_epoch; ++e) {
    const auto order = epoch_order(tcfg.seed, e, images.size());
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + tcfg.batch); ++i) batch.push_back(&images[order[i]]);
      const StepResult r = train_step(s, batch, dcfg, tcfg);
      const LossRecord rec{s.step - 1, e, r.loss, r.sigma_mean};
      s.history.push_back(rec);
      if (csv.is_open()) csv << rec.step << ',' << rec.epoch << ',' << rec.loss << ',' << rec.sigma_mean << '\n';
      if (opt.on_step) opt.on_step(rec);
    }
    s.epoch = e + 1;
    if (tcfg.checkpoint_every && s.epoch % tcfg.checkpoint_every == 0 && s.epoch < tcfg.epochs) {
      save("_epoch" + std::to_string(s.epoch));
    }
  }
  save("");
  return s;
}

// V-loss of a model on fixed images at a fixed noise level (fresh noise per item).
template <class T>
double evaluate_v_loss(const DitParams<T>& params, const DitConfig& dcfg, const std::vector<CsiImage>& images,
                       double sigma, std::uint64_t seed) {
  std::vector<const CsiImage*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  BatchCorruption bc;
  bc.x0 = stack_images<double>(ptrs);
  bc.eps = Tensor<double>(bc.x0.shape());
  RandomStream rng(seed, stream_id({detail::kEpochNoiseTag}));
  for (auto& v : bc.eps.values()) v = rng.normal();
  bc.x_t = bc.x0;
  for (std::size_t i = 0; i < bc.x_t.size(); ++i) bc.x_t[i] += sigma * bc.eps[i];
  bc.scaled = bc.x_t;
  bc.cond_sigma.assign(images.size(), sigma);
  bc.alpha_bar.assign(images.size(), 1.0);
  Tape<T> tape;
  ParamVars<T> p = bind_params(tape, params, false);
  Var<T> out = dit_forward(tape, p, dcfg, tape.constant(bc.x_t.template cast<T>()), bc.cond_sigma);
  return static_cast<double>(loss_from_x0(tape, out, bc, LossKind::V_LOSS).value()[0]);
}

}  // namespace sfdit
