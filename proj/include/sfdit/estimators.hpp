#pragma once

// Channel estimators: the single-pass DiT denoiser, LS and LMMSE baselines,
// and the VP-trained ablation path. All return an EstimationReport.

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "sfdit/diffusion.hpp"
#include "sfdit/dit.hpp"
#include "sfdit/transforms.hpp"

namespace sfdit {

inline constexpr double kNmseFloorDb = -300.0;

// 10 log10(|H - H_hat|_F^2 / |H|_F^2), floored at -300 dB.
inline double nmse_db(const ComplexMatrix& h_true, const ComplexMatrix& h_hat) {
  if (h_true.rows() != h_hat.rows() || h_true.cols() != h_hat.cols()) {
    throw DimensionError("nmse_db: " + dims_str(h_true) + " vs " + dims_str(h_hat));
  }
  const double p = frob2(h_true);
  if (!(p > 0)) throw DomainError("nmse_db: true channel has zero norm");
  const double r = frob2(h_true - h_hat) / p;
  if (r <= 0) return kNmseFloorDb;
  return std::max(kNmseFloorDb, 10.0 * std::log10(r));
}

struct EstimationReport {
  ComplexMatrix h_hat;
  std::optional<double> nmse_db;
  std::size_t nfe = 0;
  double latency_s = 0.0;
  std::string method;

  EstimationReport& score(const ComplexMatrix& h_true) {
    nmse_db = sfdit::nmse_db(h_true, h_hat);
    return *this;
  }
};

namespace detail {
using Clock = std::chrono::steady_clock;
inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline void check_geometry(const DitConfig& cfg, const PilotObservation& obs) {
  if (static_cast<std::size_t>(obs.y.rows()) != cfg.n_r || static_cast<std::size_t>(obs.pilot.rows()) != cfg.n_t) {
    throw ConfigError("model geometry " + std::to_string(cfg.n_r) + "x" + std::to_string(cfg.n_t) +
                      " does not match observation " + std::to_string(obs.y.rows()) + "x" +
                      std::to_string(obs.pilot.rows()) + " (Y " + dims_str(obs.y) + ", P " + dims_str(obs.pilot) + ")");
  }
}
}  // namespace detail

// Maps (noisy image, sigma_t) to a clean-image estimate.
using Denoiser = std::function<CsiImage(const CsiImage&, double)>;

// LS image -> one denoiser call -> back to the spatial domain. With
// angular = false the denoiser works on the spatial LS image directly.
inline EstimationReport estimate_with_denoiser(const PilotObservation& obs, const Denoiser& f, const DftPair& dft,
                                               const std::string& method = "sf_dit", bool angular = true) {
  const auto t0 = detail::Clock::now();
  const std::size_t calls0 = forward_pass_count();
  EstimationReport r;
  if (angular) {
    const AngularLs ls = angular_ls(obs, dft);
    r.h_hat = from_angular(image_to_complex(f(ls.image, ls.sigma_t)), dft);
  } else {
    // The unitary rotation leaves the noise level unchanged.
    r.h_hat = image_to_complex(f(complex_to_image(ls_estimate(obs)), image_noise_level(obs.noise_var)));
  }
  r.latency_s = detail::seconds_since(t0);
  r.nfe = forward_pass_count() - calls0;
  r.method = method;
  return r;
}

// How a checkpoint's outputs are read: its training objective and domain.
struct InferenceOptions {
  PredictionObjective objective = PredictionObjective::X_PRED;
  bool angular = true;
};

namespace detail {
// x0 = z - sigma * out for EPS/V objectives (identical under VE).
inline void to_x0(CsiImage& out, const CsiImage& z, double z_scale, double sigma, PredictionObjective obj) {
  if (obj == PredictionObjective::X_PRED) return;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = z_scale * z.data[i] - sigma * out.data[i];
}
}  // namespace detail

template <class T>
EstimationReport estimate_sf_dit(const PilotObservation& obs, const DitModel<T>& model, const DftPair& dft,
                                 const InferenceOptions& opt = {}) {
  detail::check_geometry(model.config(), obs);
  auto f = [&](const CsiImage& x, double sigma_t) {
    CsiImage out = model(x, sigma_t);
    detail::to_x0(out, x, 1.0, sigma_t, opt.objective);
    return out;
  };
  return estimate_with_denoiser(obs, f, dft, "sf_dit", opt.angular);
}

// The VP-trained model sees the unscaled LS image and the level implied by
// alpha_bar = 1 / (1 + sigma_t^2), whose VE equivalent is sigma_t itself.
template <class T>
EstimationReport estimate_vp_variant(const PilotObservation& obs, const DitModel<T>& model, const DftPair& dft,
                                     const InferenceOptions& opt = {}) {
  detail::check_geometry(model.config(), obs);
  auto f = [&](const CsiImage& x, double sigma_t) {
    const double ab = vp_alpha_bar_from_sigma(sigma_t);
    const double s_eq = vp_sigma_equivalent(ab);
    CsiImage out = model(x, s_eq);
    detail::to_x0(out, x, 1.0 / std::sqrt(ab), s_eq, opt.objective);
    return out;
  };
  return estimate_with_denoiser(obs, f, dft, "vp_variant", opt.angular);
}

inline EstimationReport estimate_ls(const PilotObservation& obs) {
  const auto t0 = detail::Clock::now();
  EstimationReport r;
  r.h_hat = ls_estimate(obs);
  r.latency_s = detail::seconds_since(t0);
  r.method = "ls";
  return r;
}

// vec() stacks columns.
inline ComplexVector vec(const ComplexMatrix& h) {
  ComplexVector v(h.size());
  for (Eigen::Index j = 0; j < h.cols(); ++j)
    for (Eigen::Index i = 0; i < h.rows(); ++i) v(j * h.rows() + i) = h(i, j);
  return v;
}

inline ComplexMatrix unvec(const ComplexVector& v, Eigen::Index rows, Eigen::Index cols) {
  ComplexMatrix h(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) h(i, j) = v(j * rows + i);
  return h;
}

struct CovarianceDiagnostics {
  double hermitian_error = 0.0;  // max |C - C^H|
  double min_eigenvalue = 0.0;
  double max_eigenvalue = 0.0;
};

class LmmseState {
 public:
  LmmseState() = default;

  // Prior with known covariance and mean (both in vec() order).
  static LmmseState from_covariance(ComplexMatrix cov, ComplexVector mean, Eigen::Index rows, Eigen::Index cols) {
    if (cov.rows() != rows * cols || cov.cols() != rows * cols || mean.size() != rows * cols) {
      throw DimensionError("LmmseState: covariance " + dims_str(cov) + " does not match " + std::to_string(rows) + "x" +
                           std::to_string(cols) + " channels");
    }
    LmmseState s;
    s.rows_ = rows;
    s.cols_ = cols;
    s.diag_.hermitian_error = (cov - cov.adjoint()).cwiseAbs().maxCoeff();
    s.cov_ = (cov + cov.adjoint()) / 2.0;
    s.mean_ = std::move(mean);
    Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(s.cov_, Eigen::EigenvaluesOnly);
    s.diag_.min_eigenvalue = es.eigenvalues().minCoeff();
    s.diag_.max_eigenvalue = es.eigenvalues().maxCoeff();
    if (s.diag_.min_eigenvalue < -1e-8 * std::max(1.0, s.diag_.max_eigenvalue)) {
      throw DomainError("LmmseState: covariance is not positive semidefinite (min eigenvalue " +
                        std::to_string(s.diag_.min_eigenvalue) + ")");
    }
    return s;
  }

  static LmmseState from_covariance(ComplexMatrix cov, Eigen::Index rows, Eigen::Index cols) {
    ComplexVector zero = ComplexVector::Zero(rows * cols);
    return from_covariance(std::move(cov), std::move(zero), rows, cols);
  }

  const ComplexMatrix& covariance() const noexcept { return cov_; }
  const ComplexVector& mean() const noexcept { return mean_; }
  const CovarianceDiagnostics& diagnostics() const noexcept { return diag_; }
  Eigen::Index rows() const noexcept { return rows_; }
  Eigen::Index cols() const noexcept { return cols_; }

  // (lambda_max + s2) / (lambda_min + s2) for the regularized system.
  double condition_number(double noise_var) const {
    return (diag_.max_eigenvalue + noise_var) / std::max(diag_.min_eigenvalue + noise_var, 1e-300);
  }

  // W = C (C + s2 I)^-1, cached per noise variance.
  const ComplexMatrix& filter(double noise_var) const {
    if (!(noise_var > 0)) throw DomainError("LMMSE: noise variance must be positive");
    std::lock_guard<std::mutex> lock(*mu_);
    auto it = cache_.find(noise_var);
    if (it != cache_.end()) return it->second;
    ComplexMatrix a = cov_;
    a.diagonal().array() += noise_var;
    Eigen::LLT<ComplexMatrix> llt(a);
    if (llt.info() != Eigen::Success) {
      throw DomainError("LMMSE: C + s2 I is not positive definite, condition ~" +
                        std::to_string(condition_number(noise_var)));
    }
    // C and (C + s2 I)^-1 commute, so W = (C + s2 I)^-1 C.
    ComplexMatrix w = llt.solve(cov_);
    return cache_.emplace(noise_var, std::move(w)).first->second;
  }

  // Precomputes the filter outside of any timed region.
  void prepare(double noise_var) const { filter(noise_var); }

 private:
  Eigen::Index rows_ = 0, cols_ = 0;
  ComplexMatrix cov_;
  ComplexVector mean_;
  CovarianceDiagnostics diag_;
  mutable std::map<double, ComplexMatrix> cache_;
  std::shared_ptr<std::mutex> mu_ = std::make_shared<std::mutex>();
};

// Mean-centred sample covariance (1/(n-1)) of vec(H) over the training set.
inline LmmseState fit_lmmse(const std::vector<ComplexMatrix>& channels) {
  if (channels.size() < 2) throw ContractError("fit_lmmse: need at least 2 training channels");
  const Eigen::Index rows = channels[0].rows(), cols = channels[0].cols(), n = rows * cols;
  ComplexMatrix x(n, static_cast<Eigen::Index>(channels.size()));
  for (std::size_t k = 0; k < channels.size(); ++k) {
    if (channels[k].rows() != rows || channels[k].cols() != cols) {
      throw DimensionError("fit_lmmse: channel " + std::to_string(k) + " is " + dims_str(channels[k]));
    }
    x.col(static_cast<Eigen::Index>(k)) = vec(channels[k]);
  }
  ComplexVector mu = x.rowwise().mean();
  x.colwise() -= mu;
  ComplexMatrix cov(n, n);
  cov.setZero();
  cov.selfadjointView<Eigen::Lower>().rankUpdate(x, 1.0 / static_cast<double>(channels.size() - 1));
  cov = cov.selfadjointView<Eigen::Lower>();
  return LmmseState::from_covariance(std::move(cov), std::move(mu), rows, cols);
}

// H_hat = mu + W (vec(Y P^H) - mu)
inline EstimationReport estimate_lmmse(const PilotObservation& obs, const LmmseState& state) {
  if (obs.y.rows() != state.rows() || obs.pilot.rows() != state.cols()) {
    throw ConfigError("LMMSE prior is " + std::to_string(state.rows()) + "x" + std::to_string(state.cols()) +
                      " but observation implies " + std::to_string(obs.y.rows()) + "x" + std::to_string(obs.pilot.rows()));
  }
  const auto t0 = detail::Clock::now();
  const ComplexMatrix& w = state.filter(obs.noise_var);
  const ComplexVector h = state.mean() + w * (vec(ls_estimate(obs)) - state.mean());
  EstimationReport r;
  r.h_hat = unvec(h, state.rows(), state.cols());
  r.latency_s = detail::seconds_since(t0);
  r.method = "lmmse";
  return r;
}

}  // namespace sfdit
