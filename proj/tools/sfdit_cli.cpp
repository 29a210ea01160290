// sfdit: dataset generation, training, estimation, sweeps, benchmarks and
// gradient checks for the single-pass diffusion-transformer channel estimator.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "sfdit/checkpoint.hpp"
#include "sfdit/dataset.hpp"
#include "sfdit/estimators.hpp"
#include "sfdit/grad_suite.hpp"
#include "sfdit/sweep.hpp"
#include "sfdit/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sfdit;

namespace {

json read_json_file(const std::string& path, const char* flag) {
  std::ifstream is(path);
  if (!is) throw ConfigError(std::string(flag) + ": cannot open '" + path + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(std::string(flag) + ": '" + path + "' is not valid JSON: " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

json matrix_json(const ComplexMatrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back({m(i, j).real(), m(i, j).imag()});
    rows.push_back(std::move(r));
  }
  return rows;
}

ComplexMatrix matrix_from_json(const json& j, const char* what) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) throw ConfigError(std::string(what) + " must be a nested [re, im] array");
  ComplexMatrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (j[i].size() != j[0].size()) throw ConfigError(std::string(what) + ": ragged rows");
    for (std::size_t k = 0; k < j[i].size(); ++k) m(i, k) = cdouble(j[i][k].at(0).get<double>(), j[i][k].at(1).get<double>());
  }
  return m;
}

double power_of(const ComplexMatrix& h) { return frob2(h) / static_cast<double>(h.size()); }

// ---- gen-data ----

struct GenDataArgs {
  std::string profile = "synthC";
  std::size_t count = 0;
  std::string geometry = "64x16";
  std::uint64_t seed = 0;
  std::uint64_t first_index = 0;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  const ChannelProfile p = profile_by_name(a.profile);
  const ArrayGeometry g = parse_geometry(a.geometry);
  const auto channels = generate_channels(g, p, a.seed, a.count, a.first_index);
  json meta = {{"profile", p.name},
               {"profile_hash", p.parameter_hash()},
               {"geometry", g.str()},
               {"seed", a.seed},
               {"first_index", a.first_index}};
  write_dataset(a.out, channels, meta);
  double lo = 1e300, hi = 0, mean = 0;
  for (const auto& h : channels) {
    const double pw = power_of(h);
    lo = std::min(lo, pw);
    hi = std::max(hi, pw);
    mean += pw;
  }
  json summary = meta;
  summary["path"] = a.out;
  summary["n_items"] = channels.size();
  summary["mean_power"] = mean / static_cast<double>(channels.size());
  summary["min_power"] = lo;
  summary["max_power"] = hi;
  summary["hash"] = file_hash(a.out);
  std::cout << summary.dump(2) << '\n';
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string run_name = "model";
  std::string resume;
};

int cmd_train(const TrainArgs& a) {
  if (!fs::exists(a.data)) throw ConfigError("--data: dataset '" + a.data + "' does not exist");
  json cfg = a.config.empty() ? json::object() : read_json_file(a.config, "--config");
  const Dataset ds = read_dataset(a.data);
  const json model_js = cfg.value("model", json::object());
  DitConfig dcfg = model_js.get<DitConfig>();
  // Geometry follows the dataset unless the config pins it.
  if (!model_js.contains("n_r")) dcfg.n_r = static_cast<std::size_t>(ds.channels[0].rows());
  if (!model_js.contains("n_t")) dcfg.n_t = static_cast<std::size_t>(ds.channels[0].cols());
  if (dcfg.n_r != static_cast<std::size_t>(ds.channels[0].rows()) ||
      dcfg.n_t != static_cast<std::size_t>(ds.channels[0].cols())) {
    throw ConfigError("--config: model geometry " + std::to_string(dcfg.n_r) + "x" + std::to_string(dcfg.n_t) +
                      " does not match dataset " + dims_str(ds.channels[0]));
  }
  const TrainConfig tcfg = cfg.value("train", json::object()).get<TrainConfig>();
  dcfg.validate();
  tcfg.validate();

  TrainOptions opt;
  opt.out_dir = a.out;
  opt.run_name = a.run_name;
  opt.init_seed = cfg.value("init_seed", tcfg.seed);
  const std::string data_hash = file_hash(a.data);
  opt.provenance = {{"dataset", a.data}, {"dataset_hash", data_hash}, {"init_seed", opt.init_seed}};
  if (!a.resume.empty()) opt.resume = load_checkpoint(a.resume);
  const std::size_t steps_per_epoch = (ds.channels.size() + tcfg.batch - 1) / tcfg.batch;
  opt.on_step = [&](const LossRecord& r) {
    if ((r.step + 1) % steps_per_epoch == 0) {
      std::fprintf(stderr, "epoch %llu step %llu loss %.6g\n", static_cast<unsigned long long>(r.epoch + 1),
                   static_cast<unsigned long long>(r.step + 1), r.loss);
    }
  };

  const auto images = prepare_training_images(ds.channels, tcfg.domain, DftPair::for_shape(dcfg.n_r, dcfg.n_t));
  const auto t0 = std::chrono::steady_clock::now();
  const TrainState<float> s = train<float>(images, tcfg, dcfg, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path ckpt = fs::path(a.out) / (a.run_name + ".ckpt");
  json manifest = {{"model", dcfg},
                   {"train", tcfg},
                   {"init_seed", opt.init_seed},
                   {"dataset", a.data},
                   {"dataset_hash", data_hash},
                   {"n_items", ds.channels.size()},
                   {"parameter_count", count_parameters(s.params)},
                   {"steps", s.step},
                   {"epochs", s.epoch},
                   {"final_loss", s.history.empty() ? 0.0 : s.history.back().loss},
                   {"runtime_s", secs},
                   {"checkpoint", ckpt.string()},
                   {"checkpoint_hash", file_hash(ckpt)},
                   {"loss_csv", (fs::path(a.out) / (a.run_name + "_loss.csv")).string()},
                   {"note", "fixed epoch budget; no convergence test is applied"}};
  write_json_file(fs::path(a.out) / (a.run_name + "_manifest.json"), manifest);
  std::cout << manifest.dump(2) << '\n';
  return 0;
}

// ---- sweep ----

int cmd_sweep(const std::string& spec_path, const std::string& out) {
  const SweepSpec spec = read_json_file(spec_path, "--spec").get<SweepSpec>();
  const SweepResult r = run_sweep(spec);
  fs::create_directories(out);
  write_sweep_csv(fs::path(out) / "sweep.csv", r);
  json j = sweep_json(r);
  j["provenance"]["spec_path"] = spec_path;
  write_json_file(fs::path(out) / "sweep.json", j);
  for (const auto& s : r.summary) {
    std::printf("%-14s snr %6.1f dB  nmse %8.3f dB  nfe %.0f  latency %.3g s\n", s.method.c_str(), s.snr_db,
                s.mean_nmse_db, s.mean_nfe, s.mean_latency_s);
  }
  return 0;
}

// ---- bench ----

struct BenchArgs {
  std::string checkpoint;
  std::size_t repeat = 30;
  std::size_t warmup = 5;
  double snr_db = 10.0;
  std::string data;  // LMMSE prior
  std::size_t n_train = 2000;
};

int cmd_bench(const BenchArgs& a) {
  if (a.repeat < 2) std::fprintf(stderr, "warning: --repeat %zu gives unstable timing; use >= 30\n", a.repeat);
  const LoadedModel lm = load_inference_model(a.checkpoint);
  const DitConfig& cfg = lm.model.config();
  const ArrayGeometry g{cfg.n_r, cfg.n_t};
  std::vector<ComplexMatrix> train_set;
  if (!a.data.empty()) {
    train_set = read_dataset(a.data).channels;
  } else {
    train_set = generate_channels(g, profile_synth_c(), 1, a.n_train);
  }
  const LmmseState lmmse = fit_lmmse(train_set);
  const ComplexMatrix h = generate_channel(g, profile_synth_c(), 2, 0);
  const PilotObservation obs = observe_pilots(h, a.snr_db, 3);
  const DftPair dft = DftPair::for_geometry(g);
  lmmse.prepare(obs.noise_var);

  json methods = json::object();
  auto run = [&](const std::string& name, auto fn) {
    std::size_t nfe = 0;
    const LatencyStats st = measure_latency([&] { nfe = fn().nfe; }, a.repeat, a.warmup);
    methods[name] = {{"median_latency_s", st.median_s}, {"mean_latency_s", st.mean_s}, {"nfe", nfe}};
  };
  run("ls", [&] { return estimate_ls(obs); });
  run("lmmse", [&] { return estimate_lmmse(obs, lmmse); });
  run("sf_dit", [&] { return estimate_sf_dit(obs, lm.model, dft, lm.options); });
  json out = {{"checkpoint", a.checkpoint},
              {"checkpoint_hash", lm.hash},
              {"model", cfg},
              {"parameter_count", count_parameters(lm.model.params())},
              {"snr_db", a.snr_db},
              {"repeats", a.repeat},
              {"warmup", a.warmup},
              {"threads", 1},
              {"methods", methods}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

// ---- gradcheck ----

int cmd_gradcheck(const std::string& size, double corrupt) {
  GradCheckOptions opt;
  opt.corrupt_gradient = corrupt;
  bool ok = true;
  for (const auto& r : run_grad_cases(grad_cases(size), opt)) {
    std::printf("%-4s %-24s max_rel_err %.3e (tol %.0e) checked %zu noise_floor %zu kinks %zu\n", r.passed ? "ok" : "FAIL",
                r.name.c_str(), r.report.max_rel_error, r.tolerance, r.report.checked, r.report.at_noise_floor,
                r.report.excluded);
    ok = ok && r.passed;
  }
  std::printf("gradcheck %s: %s\n", size.c_str(), ok ? "passed" : "FAILED");
  return ok ? 0 : 1;
}

// ---- estimate ----

struct EstimateArgs {
  std::string checkpoint;
  std::string obs_file;
  std::optional<double> demo_snr;
  std::string profile = "synthC";
  std::uint64_t seed = 0;
};

int cmd_estimate(const EstimateArgs& a) {
  const LoadedModel lm = load_inference_model(a.checkpoint);
  const DitConfig& cfg = lm.model.config();
  PilotObservation obs;
  std::optional<ComplexMatrix> truth;
  if (a.demo_snr) {
    const ComplexMatrix h = generate_channel({cfg.n_r, cfg.n_t}, profile_by_name(a.profile), a.seed, 0);
    obs = observe_pilots(h, *a.demo_snr, a.seed);
    truth = h;
  } else {
    const json j = read_json_file(a.obs_file, "--obs-file");
    obs.y = matrix_from_json(j.at("y"), "y");
    obs.noise_var = j.at("noise_var").get<double>();
    obs.pilot = j.contains("pilot") ? matrix_from_json(j.at("pilot"), "pilot") : unitary_dft(static_cast<std::size_t>(obs.y.cols()));
    if (j.contains("h_true")) truth = matrix_from_json(j.at("h_true"), "h_true");
  }
  detail::check_geometry(cfg, obs);
  const DftPair dft = DftPair::for_shape(cfg.n_r, cfg.n_t);
  EstimationReport r = lm.corruption == Corruption::VP ? estimate_vp_variant(obs, lm.model, dft, lm.options)
                                                       : estimate_sf_dit(obs, lm.model, dft, lm.options);
  if (truth) r.score(*truth);
  json out = {{"method", r.method},
              {"nfe", r.nfe},
              {"latency_s", r.latency_s},
              {"noise_var", obs.noise_var},
              {"checkpoint_hash", lm.hash},
              {"h_hat", matrix_json(r.h_hat)}};
  if (r.nmse_db) out["nmse_db"] = *r.nmse_db;
  if (a.demo_snr) out["demo"] = {{"snr_db", *a.demo_snr}, {"profile", a.profile}, {"seed", a.seed}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-pass diffusion-transformer MIMO channel estimation"};
  app.require_subcommand(1);
  const CLI::Validator at_least_one(
      [](std::string& v) { return std::stoll(v) >= 1 ? std::string() : std::string("must be >= 1, got " + v); }, ">=1");

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic channel dataset");
  c_gen->add_option("--profile", gen.profile, "synthC | synthD")->capture_default_str();
  c_gen->add_option("--count", gen.count, "Number of realizations")->required()->check(at_least_one);
  c_gen->add_option("--geometry", gen.geometry, "NRxNT, powers of two")->capture_default_str();
  c_gen->add_option("--seed", gen.seed)->capture_default_str();
  c_gen->add_option("--first-index", gen.first_index, "Index of the first realization")->capture_default_str();
  c_gen->add_option("--out", gen.out, "Output dataset path")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train the denoiser");
  c_train->add_option("--data", tr.data, "Training dataset")->required();
  c_train->add_option("--config", tr.config, "JSON with optional \"model\", \"train\", \"init_seed\"");
  c_train->add_option("--out", tr.out, "Output directory")->required();
  c_train->add_option("--name", tr.run_name, "Run name (file prefix)")->capture_default_str();
  c_train->add_option("--resume", tr.resume, "Resume from a training checkpoint");

  std::string sweep_spec, sweep_out;
  auto* c_sweep = app.add_subcommand("sweep", "NMSE versus SNR sweep");
  c_sweep->add_option("--spec", sweep_spec, "Sweep spec JSON")->required();
  c_sweep->add_option("--out", sweep_out, "Output directory")->required();

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "Latency, NFE and parameter count");
  c_bench->add_option("--checkpoint", bench.checkpoint)->required();
  c_bench->add_option("--repeat", bench.repeat)->capture_default_str()->check(at_least_one);
  c_bench->add_option("--warmup", bench.warmup)->capture_default_str();
  c_bench->add_option("--snr", bench.snr_db)->capture_default_str();
  c_bench->add_option("--data", bench.data, "Dataset for the LMMSE prior (default: generated synthC)");

  std::string gc_size = "small";
  double gc_corrupt = 0.0;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c_gc->add_option("--size", gc_size)->capture_default_str()->check(CLI::IsMember({"small", "block", "full"}));
  c_gc->add_option("--corrupt", gc_corrupt, "Offset added to every analytic gradient (negative control)");

  EstimateArgs est;
  double demo_snr = 0;
  auto* c_est = app.add_subcommand("estimate", "One channel estimate");
  c_est->add_option("--checkpoint", est.checkpoint)->required();
  auto* o_obs = c_est->add_option("--obs-file", est.obs_file, "JSON with y, noise_var and optional pilot, h_true");
  auto* o_demo = c_est->add_option("--demo-snr", demo_snr, "Synthesize a channel and observation at this SNR");
  o_obs->excludes(o_demo);
  c_est->add_option("--profile", est.profile, "Profile for --demo-snr")->capture_default_str();
  c_est->add_option("--seed", est.seed, "Seed for --demo-snr")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_gen) return cmd_gen_data(gen);
    if (*c_train) return cmd_train(tr);
    if (*c_sweep) return cmd_sweep(sweep_spec, sweep_out);
    if (*c_bench) return cmd_bench(bench);
    if (*c_gc) return cmd_gradcheck(gc_size, gc_corrupt);
    if (*c_est) {
      if (!*o_obs && !*o_demo) throw ConfigError("estimate: one of --obs-file or --demo-snr is required");
      if (*o_demo) est.demo_snr = demo_snr;
      return cmd_estimate(est);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
