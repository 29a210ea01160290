#pragma once

// Forward corruption processes, noise-level sampling, prediction-target
// conversions and the three training losses.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "sfdit/errors.hpp"
#include "sfdit/rng.hpp"
#include "sfdit/transforms.hpp"

namespace sfdit {

struct ScheduleParams {
  double p_mean = -1.2;
  double p_std = 1.2;

  void validate() const {
    if (!(p_std > 0)) throw ConfigError("noise schedule: p_std must be positive");
  }
};

inline constexpr double kSigmaMin = 1e-4;
inline constexpr double kSigmaMax = 200.0;

inline double clamp_sigma(double s) { return std::clamp(s, kSigmaMin, kSigmaMax); }

// ln(sigma) ~ N(p_mean, p_std^2), clamped to [kSigmaMin, kSigmaMax].
inline double sample_sigma(const ScheduleParams& p, RandomStream& rng) {
  return clamp_sigma(std::exp(rng.normal(p.p_mean, p.p_std)));
}

// VP ablation schedule: alpha_bar = cos^2(pi s / 2), s ~ U(0, 1), limited to
// the same equivalent noise range as the VE sampler.
inline double vp_sigma_equivalent(double alpha_bar) { return std::sqrt((1.0 - alpha_bar) / alpha_bar); }
inline double vp_alpha_bar_from_sigma(double sigma) { return 1.0 / (1.0 + sigma * sigma); }

inline double sample_vp_alpha_bar(RandomStream& rng) {
  const double c = std::cos(std::numbers::pi * rng.uniform() / 2);
  const double ab = c * c;
  return std::clamp(ab, vp_alpha_bar_from_sigma(kSigmaMax), vp_alpha_bar_from_sigma(kSigmaMin));
}

enum class Corruption { VE, VP };
enum class PredictionObjective { X_PRED, EPS_PRED, V_PRED };
enum class LossKind { X_LOSS, EPS_LOSS, V_LOSS };

inline std::string to_string(Corruption c) { return c == Corruption::VE ? "ve" : "vp"; }
inline std::string to_string(PredictionObjective o) {
  switch (o) {
    case PredictionObjective::X_PRED: return "x";
    case PredictionObjective::EPS_PRED: return "eps";
    case PredictionObjective::V_PRED: return "v";
  }
  return "?";
}
inline std::string to_string(LossKind l) {
  switch (l) {
    case LossKind::X_LOSS: return "x";
    case LossKind::EPS_LOSS: return "eps";
    case LossKind::V_LOSS: return "v";
  }
  return "?";
}
inline Corruption corruption_from_string(const std::string& s) {
  if (s == "ve") return Corruption::VE;
  if (s == "vp") return Corruption::VP;
  throw ConfigError("unknown corruption '" + s + "' (ve|vp)");
}
inline PredictionObjective objective_from_string(const std::string& s) {
  if (s == "x") return PredictionObjective::X_PRED;
  if (s == "eps") return PredictionObjective::EPS_PRED;
  if (s == "v") return PredictionObjective::V_PRED;
  throw ConfigError("unknown prediction objective '" + s + "' (x|eps|v)");
}
inline LossKind loss_from_string(const std::string& s) {
  if (s == "x") return LossKind::X_LOSS;
  if (s == "eps") return LossKind::EPS_LOSS;
  if (s == "v") return LossKind::V_LOSS;
  throw ConfigError("unknown loss '" + s + "' (x|eps|v)");
}

struct CorruptionSample {
  CsiImage x0;
  CsiImage x_t;
  Tensor<double> eps;
  double sigma_t = 0.0;    // VE noise level (VP: equivalent level sqrt((1-ab)/ab))
  double alpha_bar = 1.0;  // VP only
  Corruption kind = Corruption::VE;
};

namespace detail {
inline void check_same_shape(const Tensor<double>& a, const Tensor<double>& b, const char* op) {
  if (a.shape() != b.shape()) throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

// x_t = x0 + sigma_t * eps
inline CorruptionSample ve_corrupt(const CsiImage& x0, double sigma_t, const Tensor<double>& eps) {
  if (!(sigma_t >= 0)) throw DomainError("ve_corrupt: sigma_t must be >= 0");
  detail::check_same_shape(x0.data, eps, "ve_corrupt");
  CorruptionSample s{x0, x0, eps, sigma_t, 1.0, Corruption::VE};
  for (std::size_t i = 0; i < eps.size(); ++i) s.x_t.data[i] = x0.data[i] + sigma_t * eps[i];
  return s;
}

// x_t = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps
inline CorruptionSample vp_corrupt(const CsiImage& x0, double alpha_bar, const Tensor<double>& eps) {
  if (!(alpha_bar > 0 && alpha_bar <= 1)) throw DomainError("vp_corrupt: alpha_bar must lie in (0, 1]");
  detail::check_same_shape(x0.data, eps, "vp_corrupt");
  CorruptionSample s{x0, x0, eps, vp_sigma_equivalent(alpha_bar), alpha_bar, Corruption::VP};
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  for (std::size_t i = 0; i < eps.size(); ++i) s.x_t.data[i] = a * x0.data[i] + b * eps[i];
  return s;
}

inline Tensor<double> standard_normal(const Shape& shape, RandomStream& rng) {
  Tensor<double> e(shape);
  for (auto& v : e.values()) v = rng.normal();
  return e;
}

struct PredictionTargets {
  Tensor<double> v_hat;
  Tensor<double> eps_hat;
  Tensor<double> score_hat;
};

// Under VE: v = (x_t - x0)/sigma = eps, score = -eps/sigma.
inline PredictionTargets targets_from_xpred(const CsiImage& x_t, const CsiImage& x0_hat, double sigma_t) {
  if (sigma_t == 0) throw DomainError("targets_from_xpred: sigma_t == 0 is singular");
  detail::check_same_shape(x_t.data, x0_hat.data, "targets_from_xpred");
  PredictionTargets t{x_t.data, x_t.data, x_t.data};
  for (std::size_t i = 0; i < x_t.data.size(); ++i) {
    const double v = (x_t.data[i] - x0_hat.data[i]) / sigma_t;
    t.v_hat[i] = v;
    t.eps_hat[i] = v;
    t.score_hat[i] = -v / sigma_t;
  }
  return t;
}

// x0 = x_t - sigma_t * eps_hat
inline CsiImage xpred_from_eps(const CsiImage& x_t, const Tensor<double>& eps_hat, double sigma_t) {
  CsiImage x0 = x_t;
  for (std::size_t i = 0; i < eps_hat.size(); ++i) x0.data[i] = x_t.data[i] - sigma_t * eps_hat[i];
  return x0;
}

// Sum of squared residuals for one sample (not yet mean-reduced).
inline double loss_sum(LossKind kind, const CorruptionSample& s, const CsiImage& x0_hat) {
  if (s.kind != Corruption::VE) throw ContractError("compute_loss: expects a VE sample");
  detail::check_same_shape(s.x0.data, x0_hat.data, "compute_loss");
  if (kind != LossKind::X_LOSS && s.sigma_t == 0) throw DomainError("compute_loss: sigma_t == 0 is singular");
  double acc = 0.0;
  for (std::size_t i = 0; i < s.eps.size(); ++i) {
    double r = 0.0;
    switch (kind) {
      case LossKind::V_LOSS: r = (s.x_t.data[i] - x0_hat.data[i]) / s.sigma_t - s.eps[i]; break;
      case LossKind::EPS_LOSS: {
        const double eps_hat = (s.x_t.data[i] - x0_hat.data[i]) / s.sigma_t;
        r = eps_hat - s.eps[i];
        break;
      }
      case LossKind::X_LOSS: r = x0_hat.data[i] - s.x0.data[i]; break;
    }
    acc += r * r;
  }
  return acc;
}

// Mean over elements.
inline double compute_loss(LossKind kind, const CorruptionSample& s, const CsiImage& x0_hat) {
  return loss_sum(kind, s, x0_hat) / static_cast<double>(s.eps.size());
}

// Mean over batch and elements.
inline double compute_loss(LossKind kind, const std::vector<CorruptionSample>& batch,
                           const std::vector<CsiImage>& x0_hat) {
  if (batch.empty() || batch.size() != x0_hat.size()) throw ContractError("compute_loss: batch size mismatch");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    acc += loss_sum(kind, batch[b], x0_hat[b]);
    n += batch[b].eps.size();
  }
  return acc / static_cast<double>(n);
}

}  // namespace sfdit
