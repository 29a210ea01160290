#include <gtest/gtest.h>

#include <Eigen/SVD>

#include <cmath>
#include <limits>

#include "sfdit/channel.hpp"

using namespace sfdit;

TEST(Geometry, ParseAndValidate) {
  EXPECT_EQ(parse_geometry("64x16"), (ArrayGeometry{64, 16}));
  EXPECT_EQ(parse_geometry("16x8").n_p(), 8u);
  EXPECT_THROW(parse_geometry("64x12"), ConfigError);
  EXPECT_THROW(parse_geometry("1x16"), ConfigError);
  EXPECT_THROW(parse_geometry("64-16"), ConfigError);
  EXPECT_THROW(parse_geometry("axb"), ConfigError);
}

TEST(Profile, NamedProfiles) {
  const auto c = profile_by_name("synthC"), d = profile_by_name("synthD");
  EXPECT_EQ(c.n_clusters, 8);
  EXPECT_EQ(c.rays_per_cluster, 10);
  EXPECT_EQ(c.los_power_fraction, 0.0);
  EXPECT_EQ(d.n_clusters, 3);
  EXPECT_DOUBLE_EQ(d.los_power_fraction + d.diffuse_power_fraction(), 1.0);
  EXPECT_NE(c.parameter_hash(), d.parameter_hash());
  EXPECT_EQ(c.parameter_hash(), profile_synth_c().parameter_hash());
  EXPECT_THROW(profile_by_name("CDL-C"), ConfigError);
  EXPECT_THROW((ChannelProfile{"bad", 1, 1, 1.0, 1.5}.validate()), ConfigError);
}

TEST(Steering, BroadsideAndNorm) {
  const auto a = steering_vector(8, 0.0);
  for (Eigen::Index k = 0; k < 8; ++k) EXPECT_NEAR(std::abs(a(k, 0) - cdouble(1 / std::sqrt(8.0), 0)), 0.0, 1e-15);
  for (double th : {-1.2, -0.3, 0.4, 1.5}) EXPECT_NEAR(steering_vector(16, th).norm(), 1.0, 1e-14);
}

TEST(Steering, OnGridAngleHitsOneDftBin) {
  const auto a = steering_vector(4, std::asin(0.5));
  const ComplexMatrix b = unitary_dft(4).adjoint() * a;
  int unit = 0;
  for (Eigen::Index l = 0; l < 4; ++l) {
    const double m = std::abs(b(l, 0));
    if (std::abs(m - 1.0) < 1e-12) {
      ++unit;
    } else {
      EXPECT_LT(m, 1e-12);
    }
  }
  EXPECT_EQ(unit, 1);
}

TEST(Channel, SinglePathIsRankOne) {
  const ChannelProfile p{"single", 1, 1, 1.0, 1.0};
  const ComplexMatrix h = generate_channel({16, 8}, p, 9);
  Eigen::JacobiSVD<ComplexMatrix> svd(h);
  const auto s = svd.singularValues();
  EXPECT_GT(s(0), 1.0);
  EXPECT_LT(s(1), 1e-10 * s(0));
}

TEST(Channel, Deterministic) {
  const auto a = generate_channel({16, 8}, profile_synth_c(), 11, 5);
  const auto b = generate_channel({16, 8}, profile_synth_c(), 11, 5);
  const auto c = generate_channel({16, 8}, profile_synth_c(), 11, 6);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  const auto batch = generate_channels({16, 8}, profile_synth_c(), 11, 3, 4);
  EXPECT_TRUE(batch[1] == a);
}

TEST(Channel, UnitAveragePowerBothProfiles) {
  for (const auto& p : {profile_synth_c(), profile_synth_d()}) {
    double acc = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) acc += frob2(generate_channel({16, 8}, p, 21, i)) / 128.0;
    acc /= n;
    EXPECT_GE(acc, 0.97) << p.name;
    EXPECT_LE(acc, 1.03) << p.name;
  }
}

TEST(Observation, PilotIsUnitary) {
  for (std::size_t n : {2, 4, 8, 16, 64}) EXPECT_LT(unitarity_error(unitary_dft(n)), 1e-12);
  const auto obs = observe_pilots(generate_channel({16, 8}, profile_synth_c(), 1), 10, 1);
  EXPECT_LT(unitarity_error(obs.pilot), 1e-12);
  EXPECT_EQ(obs.y.rows(), 16);
  EXPECT_EQ(obs.y.cols(), 8);
}

TEST(Observation, NoiselessRecoversChannel) {
  const auto h = generate_channel({16, 8}, profile_synth_d(), 2);
  const auto obs = observe_pilots(h, 10, 3, 0, false);
  EXPECT_LT((obs.y * obs.pilot.adjoint() - h).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_DOUBLE_EQ(obs.noise_var, 0.1);
}

TEST(Observation, SnrConvention) {
  EXPECT_DOUBLE_EQ(noise_var_from_snr_db(0), 1.0);
  EXPECT_NEAR(noise_var_from_snr_db(30), 1e-3, 1e-18);
  EXPECT_THROW(observe_pilots(ComplexMatrix::Ones(4, 4), std::numeric_limits<double>::infinity(), 0), DomainError);
}

TEST(Observation, NoiseVarianceMonteCarlo) {
  // 10^5 complex noise entries at sigma^2 = 0.5.
  const ComplexMatrix h = ComplexMatrix::Zero(16, 8);
  double acc = 0, re = 0;
  std::size_t n = 0;
  for (int i = 0; i < 800; ++i) {
    const auto s = simulate_observation(h, 3.0103, 4, i);
    acc += frob2(s.noise);
    re += s.noise.real().squaredNorm();
    n += s.noise.size();
  }
  const double var = noise_var_from_snr_db(3.0103);
  EXPECT_GE(n, 100000u);
  EXPECT_NEAR(acc / n, var, 0.02 * var);
  EXPECT_NEAR(re / n, var / 2, 0.02 * var / 2);
}
