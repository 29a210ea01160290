#pragma once

// Monte Carlo SNR sweeps over several estimators with paired trials, plus
// latency measurement helpers shared with the bench command.
//
// Trial t at every SNR and for every method uses test channel t mod |test set|
// and the noise stream keyed by (master seed, t), so method differences are
// measured on identical draws.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "sfdit/checkpoint.hpp"
#include "sfdit/dataset.hpp"
#include "sfdit/estimators.hpp"
#include "sfdit/trainer.hpp"

namespace sfdit {

inline constexpr const char* kSweepCsvHeader = "method,snr_db,trial,nmse_db,latency_s,nfe,seed";
inline constexpr int kSweepSchemaVersion = 1;

enum class MethodKind { LS, LMMSE, SF_DIT, VP_VARIANT };

inline MethodKind method_kind_from_string(const std::string& s) {
  if (s == "ls") return MethodKind::LS;
  if (s == "lmmse") return MethodKind::LMMSE;
  if (s == "sf_dit") return MethodKind::SF_DIT;
  if (s == "vp_variant") return MethodKind::VP_VARIANT;
  throw ConfigError("unknown method kind '" + s + "' (ls|lmmse|sf_dit|vp_variant)");
}

struct MethodSpec {
  std::string name;   // row label in the outputs
  std::string kind;   // ls | lmmse | sf_dit | vp_variant
  std::string checkpoint;
};

struct SweepSpec {
  std::vector<double> snr_grid_db = {-10, -5, 0, 5, 10, 15, 20, 25, 30};
  std::size_t trials_per_snr = 100;
  std::vector<MethodSpec> methods;
  std::string train_data;  // LMMSE prior; empty: generate from `profile`
  std::string test_data;   // empty: generate from `profile`
  std::string profile = "synthC";
  std::string geometry = "16x8";
  std::size_t n_train = 2000;
  std::size_t n_test = 100;
  std::uint64_t data_seed = 1;
  std::vector<std::uint64_t> seeds = {0};  // first entry is the master trial seed
  bool noiseless = false;

  void validate() const {
    if (snr_grid_db.empty()) throw ConfigError("sweep: snr_grid_db is empty");
    if (methods.empty()) throw ConfigError("sweep: methods is empty");
    if (trials_per_snr < 1) throw ConfigError("sweep: trials_per_snr must be >= 1");
    if (seeds.empty()) throw ConfigError("sweep: seeds is empty");
    for (const auto& m : methods) {
      const MethodKind k = method_kind_from_string(m.kind);
      if ((k == MethodKind::SF_DIT || k == MethodKind::VP_VARIANT) && m.checkpoint.empty()) {
        throw ConfigError("sweep: method '" + m.name + "' needs a checkpoint");
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const MethodSpec& m) {
  j = {{"name", m.name}, {"kind", m.kind}};
  if (!m.checkpoint.empty()) j["checkpoint"] = m.checkpoint;
}

// Accepts a bare kind string ("ls") or an object.
inline void from_json(const nlohmann::json& j, MethodSpec& m) {
  if (j.is_string()) {
    m.kind = m.name = j.get<std::string>();
    return;
  }
  m.kind = j.at("kind").get<std::string>();
  m.name = j.value("name", m.kind);
  m.checkpoint = j.value("checkpoint", std::string());
}

inline void to_json(nlohmann::json& j, const SweepSpec& s) {
  j = {{"snr_grid_db", s.snr_grid_db}, {"trials_per_snr", s.trials_per_snr}, {"methods", s.methods},
       {"train_data", s.train_data},   {"test_data", s.test_data},           {"profile", s.profile},
       {"geometry", s.geometry},       {"n_train", s.n_train},               {"n_test", s.n_test},
       {"data_seed", s.data_seed},     {"seeds", s.seeds},                   {"noiseless", s.noiseless}};
}

inline void from_json(const nlohmann::json& j, SweepSpec& s) {
  SweepSpec d;
  s.snr_grid_db = j.value("snr_grid_db", d.snr_grid_db);
  s.trials_per_snr = j.value("trials_per_snr", d.trials_per_snr);
  s.methods = j.at("methods").get<std::vector<MethodSpec>>();
  s.train_data = j.value("train_data", d.train_data);
  s.test_data = j.value("test_data", d.test_data);
  s.profile = j.value("profile", d.profile);
  s.geometry = j.value("geometry", d.geometry);
  s.n_train = j.value("n_train", d.n_train);
  s.n_test = j.value("n_test", d.n_test);
  s.data_seed = j.value("data_seed", d.data_seed);
  s.seeds = j.value("seeds", d.seeds);
  s.noiseless = j.value("noiseless", d.noiseless);
}

struct TrialRow {
  std::string method;
  double snr_db;
  std::size_t trial;
  double nmse_db;
  double latency_s;
  std::size_t nfe;
  std::uint64_t seed;
};

struct SummaryRow {
  std::string method;
  double snr_db;
  double mean_nmse_db;    // 10 log10 of the mean linear NMSE
  double mean_of_db;      // average of per-trial dB values
  double median_nmse_db;
  double std_nmse_db;
  double mean_latency_s;
  double mean_nfe;
};

struct SweepResult {
  std::vector<TrialRow> rows;
  std::vector<SummaryRow> summary;  // |methods| x |grid|, method-major
  nlohmann::json provenance = nlohmann::json::object();

  const SummaryRow& at(const std::string& method, double snr_db) const {
    for (const auto& s : summary)
      if (s.method == method && s.snr_db == snr_db) return s;
    throw ContractError("sweep result has no row for " + method + " at " + std::to_string(snr_db) + " dB");
  }
};

// Worker count: SFDIT_THREADS if set, otherwise the hardware concurrency.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("SFDIT_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) over `threads` workers (interleaved indices).
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::uint64_t trial_seed(std::uint64_t master, std::size_t trial) {
  return stream_id({0x545249414cull, master, trial});  // "TRIAL"
}

// A checkpoint loaded for inference with the options recorded at training time.
struct LoadedModel {
  DitModel<float> model;
  InferenceOptions options;
  Corruption corruption = Corruption::VE;
  std::string hash;
};

inline LoadedModel load_inference_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("checkpoint '" + path.string() + "' does not exist");
  Checkpoint ck = load_checkpoint(path);
  LoadedModel lm;
  DitParams<float> p = ck.params;
  lm.model = DitModel<float>(ck.config, std::move(p));
  if (ck.provenance.contains("train_config")) {
    const TrainConfig tc = ck.provenance.at("train_config").get<TrainConfig>();
    lm.options.objective = tc.objective;
    lm.options.angular = tc.domain == Domain::ANGULAR;
    lm.corruption = tc.corruption;
  }
  lm.hash = file_hash(path);
  return lm;
}

// One method ready to run: baselines need only the LMMSE state.
struct Estimator {
  std::string name;
  MethodKind kind;
  std::shared_ptr<const LoadedModel> model;
  std::shared_ptr<const LmmseState> lmmse;

  EstimationReport operator()(const PilotObservation& obs, const DftPair& dft) const {
    EstimationReport r;
    switch (kind) {
      case MethodKind::LS: r = estimate_ls(obs); break;
      case MethodKind::LMMSE: r = estimate_lmmse(obs, *lmmse); break;
      case MethodKind::SF_DIT: r = estimate_sf_dit(obs, model->model, dft, model->options); break;
      case MethodKind::VP_VARIANT: r = estimate_vp_variant(obs, model->model, dft, model->options); break;
    }
    r.method = name;
    return r;
  }
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<SummaryRow> summarize(const std::vector<TrialRow>& rows, const std::vector<std::string>& methods,
                                         const std::vector<double>& grid) {
  std::vector<SummaryRow> out;
  for (const auto& m : methods)
    for (double snr : grid) {
      std::vector<double> db;
      double lin = 0, lat = 0, nfe = 0;
      for (const auto& r : rows) {
        if (r.method != m || r.snr_db != snr) continue;
        db.push_back(r.nmse_db);
        lin += std::pow(10.0, r.nmse_db / 10.0);
        lat += r.latency_s;
        nfe += static_cast<double>(r.nfe);
      }
      const double n = static_cast<double>(std::max<std::size_t>(1, db.size()));
      const double mean_db = std::accumulate(db.begin(), db.end(), 0.0) / n;
      double var = 0;
      for (double d : db) var += (d - mean_db) * (d - mean_db);
      const double std_db = db.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0;
      const double mean_lin = lin / n;
      out.push_back({m, snr, mean_lin > 0 ? std::max(kNmseFloorDb, 10.0 * std::log10(mean_lin)) : kNmseFloorDb,
                     mean_db, median_of(db), std_db, lat / n, nfe / n});
    }
  return out;
}

// Everything a sweep needs besides the SweepSpec itself: test channels, LMMSE prior and methods.
struct SweepInputs {
  std::vector<ComplexMatrix> test;
  std::vector<Estimator> estimators;
  nlohmann::json provenance = nlohmann::json::object();
};

inline SweepInputs prepare_sweep(const SweepSpec& spec) {
  spec.validate();
  SweepInputs in;
  nlohmann::json prov = {{"schema_version", kSweepSchemaVersion}, {"seeds", spec.seeds}};
  const auto load_or_generate = [&](const std::string& path, std::size_t count, std::uint64_t index0,
                                    const char* role) {
    if (!path.empty()) {
      if (!std::filesystem::exists(path)) throw ConfigError(std::string("sweep: ") + role + " dataset '" + path + "' does not exist");
      prov[std::string(role) + "_dataset_hash"] = file_hash(path);
      return read_dataset(path).channels;
    }
    const ArrayGeometry g = parse_geometry(spec.geometry);
    const ChannelProfile p = profile_by_name(spec.profile);
    prov[std::string(role) + "_dataset"] = {{"profile", p.name}, {"geometry", g.str()}, {"seed", spec.data_seed},
                                            {"first_index", index0}, {"count", count}};
    return generate_channels(g, p, spec.data_seed, count, index0);
  };
  // Generated test items are indexed after the training items, so the two never overlap.
  in.test = load_or_generate(spec.test_data, spec.n_test, spec.n_train, "test");
  if (in.test.empty()) throw ConfigError("sweep: empty test set");

  std::shared_ptr<const LmmseState> lmmse;
  nlohmann::json ckpts = nlohmann::json::object();
  for (const auto& m : spec.methods) {
    Estimator e{m.name, method_kind_from_string(m.kind), nullptr, nullptr};
    if (e.kind == MethodKind::LMMSE) {
      if (!lmmse) lmmse = std::make_shared<const LmmseState>(fit_lmmse(load_or_generate(spec.train_data, spec.n_train, 0, "train")));
      e.lmmse = lmmse;
    }
    if (e.kind == MethodKind::SF_DIT || e.kind == MethodKind::VP_VARIANT) {
      auto lm = std::make_shared<LoadedModel>(load_inference_model(m.checkpoint));
      ckpts[m.name] = {{"path", m.checkpoint}, {"hash", lm->hash}};
      e.model = std::move(lm);
    }
    in.estimators.push_back(std::move(e));
  }
  prov["checkpoints"] = ckpts;
  in.provenance = std::move(prov);
  return in;
}

inline SweepResult run_sweep(const SweepSpec& spec, const SweepInputs& in) {
  const std::size_t n_r = in.test[0].rows(), n_t = in.test[0].cols();
  const DftPair dft = DftPair::for_shape(n_r, n_t);
  for (const auto& e : in.estimators) {
    if (e.lmmse)
      for (double snr : spec.snr_grid_db) e.lmmse->prepare(noise_var_from_snr_db(snr));
  }
  const std::size_t per_trial = spec.snr_grid_db.size() * in.estimators.size();
  std::vector<TrialRow> rows(spec.trials_per_snr * per_trial);
  parallel_for(spec.trials_per_snr, worker_threads(), [&](std::size_t t) {
    const std::uint64_t seed = trial_seed(spec.seeds[0], t);
    const ComplexMatrix& h = in.test[t % in.test.size()];
    for (std::size_t g = 0; g < spec.snr_grid_db.size(); ++g) {
      const double snr = spec.snr_grid_db[g];
      const PilotObservation obs = observe_pilots(h, snr, seed, 0, !spec.noiseless);
      for (std::size_t m = 0; m < in.estimators.size(); ++m) {
        EstimationReport r = in.estimators[m](obs, dft);
        r.score(h);
        rows[t * per_trial + g * in.estimators.size() + m] = {r.method, snr, t, *r.nmse_db, r.latency_s, r.nfe, seed};
      }
    }
  });
  std::sort(rows.begin(), rows.end(), [&](const TrialRow& a, const TrialRow& b) {
    auto key = [&](const TrialRow& r) {
      std::size_t mi = 0;
      while (in.estimators[mi].name != r.method) ++mi;
      return std::make_tuple(mi, r.snr_db, r.trial);
    };
    return key(a) < key(b);
  });
  SweepResult res;
  std::vector<std::string> names;
  for (const auto& e : in.estimators) names.push_back(e.name);
  res.summary = summarize(rows, names, spec.snr_grid_db);
  res.rows = std::move(rows);
  res.provenance = in.provenance;
  res.provenance["spec"] = spec;
  return res;
}

inline SweepResult run_sweep(const SweepSpec& spec) { return run_sweep(spec, prepare_sweep(spec)); }

inline void write_sweep_csv(const std::filesystem::path& path, const SweepResult& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << kSweepCsvHeader << '\n' << std::setprecision(10);
  for (const auto& row : r.rows) {
    os << row.method << ',' << row.snr_db << ',' << row.trial << ',' << row.nmse_db << ',' << row.latency_s << ','
       << row.nfe << ',' << row.seed << '\n';
  }
}

inline nlohmann::json sweep_json(const SweepResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : r.summary) {
    rows.push_back({{"method", s.method},
                    {"snr_db", s.snr_db},
                    {"mean_nmse_db", s.mean_nmse_db},
                    {"mean_of_db", s.mean_of_db},
                    {"median_nmse_db", s.median_nmse_db},
                    {"std_nmse_db", s.std_nmse_db},
                    {"mean_latency_s", s.mean_latency_s},
                    {"nfe", s.mean_nfe}});
  }
  return {{"summary", rows}, {"provenance", r.provenance}};
}

struct LatencyStats {
  double median_s = 0.0;
  double mean_s = 0.0;
  std::size_t repeats = 0;
};

// Median wall-clock of fn() over `repeats` calls after `warmup` untimed calls.
template <class Fn>
LatencyStats measure_latency(Fn&& fn, std::size_t repeats = 30, std::size_t warmup = 5) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> t;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = detail::Clock::now();
    fn();
    t.push_back(detail::seconds_since(t0));
  }
  LatencyStats s;
  s.repeats = repeats;
  s.median_s = median_of(t);
  s.mean_s = t.empty() ? 0.0 : std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
  return s;
}

}  // namespace sfdit
