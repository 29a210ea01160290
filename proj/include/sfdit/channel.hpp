#pragma once

// Synthetic clustered-multipath MIMO channels on half-wavelength ULAs and the
// pilot observation model Y = H P + N.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "sfdit/complex_matrix.hpp"
#include "sfdit/errors.hpp"
#include "sfdit/rng.hpp"

namespace sfdit {

struct ArrayGeometry {
  std::size_t n_r = 64;
  std::size_t n_t = 16;

  std::size_t n_p() const noexcept { return n_t; }

  void validate() const {
    auto pow2 = [](std::size_t n) { return n >= 2 && (n & (n - 1)) == 0; };
    if (!pow2(n_r) || !pow2(n_t)) {
      throw ConfigError("array geometry " + std::to_string(n_r) + "x" + std::to_string(n_t) +
                        ": antenna counts must be powers of two >= 2");
    }
  }

  std::string str() const { return std::to_string(n_r) + "x" + std::to_string(n_t); }

  friend bool operator==(const ArrayGeometry&, const ArrayGeometry&) = default;
};

// "64x16" -> {64, 16}
inline ArrayGeometry parse_geometry(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw ConfigError("geometry must look like NRxNT, got '" + s + "'");
  ArrayGeometry g;
  try {
    g.n_r = std::stoul(s.substr(0, x));
    g.n_t = std::stoul(s.substr(x + 1));
  } catch (const std::exception&) {
    throw ConfigError("geometry must look like NRxNT, got '" + s + "'");
  }
  g.validate();
  return g;
}

struct ChannelProfile {
  std::string name;
  int n_clusters = 1;
  int rays_per_cluster = 1;
  double angle_spread_deg = 1.0;  // RMS per-ray offset around the cluster center
  double los_power_fraction = 0.0;

  double diffuse_power_fraction() const noexcept { return 1.0 - los_power_fraction; }

  void validate() const {
    if (n_clusters < 1 || rays_per_cluster < 1) throw ConfigError("profile " + name + ": need >= 1 cluster and ray");
    if (!(angle_spread_deg > 0)) throw ConfigError("profile " + name + ": angle spread must be positive");
    if (!(los_power_fraction >= 0 && los_power_fraction <= 1)) {
      throw ConfigError("profile " + name + ": LoS power fraction must lie in [0, 1]");
    }
  }

  // FNV-1a over the canonical parameter string; independent of any seed.
  std::uint64_t parameter_hash() const {
    std::ostringstream os;
    os.precision(17);
    os << name << '|' << n_clusters << '|' << rays_per_cluster << '|' << angle_spread_deg << '|'
       << los_power_fraction;
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : os.str()) h = (h ^ c) * 0x100000001b3ull;
    return h;
  }
};

// Rich-scattering NLoS stand-in.
inline ChannelProfile profile_synth_c() { return {"synthC", 8, 10, 5.0, 0.0}; }
// LoS-dominant stand-in.
inline ChannelProfile profile_synth_d() { return {"synthD", 3, 10, 2.0, 0.7}; }

inline ChannelProfile profile_by_name(const std::string& name) {
  if (name == "synthC") return profile_synth_c();
  if (name == "synthD") return profile_synth_d();
  throw ConfigError("unknown channel profile '" + name + "' (expected synthC or synthD)");
}

// a(theta)[k] = exp(j pi k sin(theta)) / sqrt(n)
inline ComplexMatrix steering_vector(std::size_t n, double angle_rad) {
  if (n == 0) throw DimensionError("steering_vector: n must be >= 1");
  ComplexMatrix a(n, 1);
  const double s = 1.0 / std::sqrt(static_cast<double>(n));
  const double u = std::numbers::pi * std::sin(angle_rad);
  for (std::size_t k = 0; k < n; ++k) a(k, 0) = std::polar(s, u * static_cast<double>(k));
  return a;
}

namespace detail {
inline constexpr std::uint64_t kChannelTag = 0x4348414eull;  // "CHAN"
inline constexpr std::uint64_t kNoiseTag = 0x4e4f4953ull;    // "NOIS"
}  // namespace detail

// One realization; `index` selects the independent substream.
// Normalized so that E|H_ij|^2 = 1.
inline ComplexMatrix generate_channel(const ArrayGeometry& geom, const ChannelProfile& profile, std::uint64_t seed,
                                      std::uint64_t index = 0) {
  geom.validate();
  profile.validate();
  RandomStream rng(seed, stream_id({detail::kChannelTag, index}));
  const double half_pi = std::numbers::pi / 2;
  const double nrnt = static_cast<double>(geom.n_r * geom.n_t);
  ComplexMatrix h = ComplexMatrix::Zero(geom.n_r, geom.n_t);

  // Angles are drawn even for a zero LoS fraction so the diffuse rays of a
  // given (seed, index) do not depend on the LoS weight.
  const double aoa0 = rng.uniform(-half_pi, half_pi);
  const double aod0 = rng.uniform(-half_pi, half_pi);
  if (profile.los_power_fraction > 0) {
    h += std::sqrt(profile.los_power_fraction * nrnt) * steering_vector(geom.n_r, aoa0) *
         steering_vector(geom.n_t, aod0).adjoint();
  }

  const double rays = static_cast<double>(profile.n_clusters * profile.rays_per_cluster);
  const double w = std::sqrt(profile.diffuse_power_fraction() * nrnt / rays);
  const double b = profile.angle_spread_deg * std::numbers::pi / 180.0 / std::numbers::sqrt2;
  for (int c = 0; c < profile.n_clusters; ++c) {
    const double aoa_c = rng.uniform(-half_pi, half_pi);
    const double aod_c = rng.uniform(-half_pi, half_pi);
    for (int r = 0; r < profile.rays_per_cluster; ++r) {
      const double aoa = aoa_c + rng.laplace(b);
      const double aod = aod_c + rng.laplace(b);
      const cdouble g(rng.normal() * std::numbers::sqrt2 / 2, rng.normal() * std::numbers::sqrt2 / 2);
      if (w == 0) continue;
      h += (w * g) * steering_vector(geom.n_r, aoa) * steering_vector(geom.n_t, aod).adjoint();
    }
  }
  return h;
}

inline std::vector<ComplexMatrix> generate_channels(const ArrayGeometry& geom, const ChannelProfile& profile,
                                                    std::uint64_t seed, std::size_t count,
                                                    std::uint64_t first_index = 0) {
  std::vector<ComplexMatrix> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_channel(geom, profile, seed, first_index + i));
  return out;
}

struct PilotObservation {
  ComplexMatrix y;      // n_r x n_p
  ComplexMatrix pilot;  // n_t x n_p, unitary DFT
  double noise_var = 1.0;  // sigma^2 per complex entry
};

// Observation plus the noise draw that produced it (simulation ground truth).
struct SimulatedObservation {
  PilotObservation obs;
  ComplexMatrix noise;
};

inline double noise_var_from_snr_db(double snr_db) { return std::pow(10.0, -snr_db / 10.0); }

// CN(0, sigma^2) entries: real and imaginary parts each N(0, sigma^2 / 2).
inline ComplexMatrix complex_gaussian(std::size_t rows, std::size_t cols, double var, RandomStream& rng) {
  ComplexMatrix n(rows, cols);
  const double s = std::sqrt(var / 2);
  for (Eigen::Index i = 0; i < n.rows(); ++i)
    for (Eigen::Index j = 0; j < n.cols(); ++j) {
      const double re = rng.normal();
      n(i, j) = cdouble(re * s, rng.normal() * s);
    }
  return n;
}

// y = H P + N with P the unitary DFT of size n_t and sigma^2 = 10^(-snr_db/10).
// With add_noise = false the declared sigma^2 is kept but N = 0.
inline SimulatedObservation simulate_observation(const ComplexMatrix& h, double snr_db, std::uint64_t seed,
                                                 std::uint64_t index = 0, bool add_noise = true) {
  if (!std::isfinite(snr_db)) throw DomainError("observe_pilots: snr_db must be finite");
  SimulatedObservation s;
  s.obs.pilot = unitary_dft(static_cast<std::size_t>(h.cols()));
  s.obs.noise_var = noise_var_from_snr_db(snr_db);
  if (add_noise) {
    RandomStream rng(seed, stream_id({detail::kNoiseTag, index}));
    s.noise = complex_gaussian(h.rows(), h.cols(), s.obs.noise_var, rng);
  } else {
    s.noise = ComplexMatrix::Zero(h.rows(), h.cols());
  }
  s.obs.y = h * s.obs.pilot + s.noise;
  return s;
}

inline PilotObservation observe_pilots(const ComplexMatrix& h, double snr_db, std::uint64_t seed,
                                       std::uint64_t index = 0, bool add_noise = true) {
  return simulate_observation(h, snr_db, seed, index, add_noise).obs;
}

}  // namespace sfdit
