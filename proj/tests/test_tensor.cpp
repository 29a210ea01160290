#include <gtest/gtest.h>

#include <cmath>

#include "sfdit/autograd.hpp"
#include "sfdit/grad_check.hpp"
#include "sfdit/grad_suite.hpp"

using namespace sfdit;
using T2 = Tensor<double>;

namespace {

T2 randn(const Shape& s, std::uint64_t seed) {
  RandomStream rng(seed, 1);
  return detail::randn(s, rng);
}

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
  T2 t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_THROW(T2({2, 0}), DimensionError);
  EXPECT_THROW(T2({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Autograd, MatmulIdentity) {
  Tape<double> tape;
  T2 m({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  auto y = matmul(tape.constant(T2({2, 2}, std::vector<double>{1, 0, 0, 1})), tape.constant(m));
  EXPECT_EQ(y.value(), m);
}

TEST(Autograd, MatmulHandAlgebra) {
  Tape<double> tape;
  auto y = matmul(tape.constant(T2({2, 2}, std::vector<double>{1, 2, 3, 4})), tape.constant(T2({2, 1}, std::vector<double>{0, 1})));
  EXPECT_EQ(y.value(), T2({2, 1}, std::vector<double>{2, 4}));
}

TEST(Autograd, MatmulShapeMismatch) {
  Tape<double> tape;
  EXPECT_THROW(matmul(tape.constant(T2({2, 3})), tape.constant(T2({2, 3}))), DimensionError);
}

TEST(Autograd, MatmulGradient) {
  auto f = [](Tape<double>&, const std::vector<Var<double>>& v) { return sum(square(matmul(v[0], v[1]))); };
  const auto r = grad_check(f, {randn({5, 7}, 1), randn({7, 3}, 2)});
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_EQ(r.checked, 35u + 21u);
}

TEST(Autograd, LayerNormCases) {
  Tape<double> tape;
  auto c = layer_norm(tape.constant(T2({3}, 2.5)));
  for (double v : c.value().values()) EXPECT_EQ(v, 0.0);

  auto pm = layer_norm(tape.constant(T2({2}, std::vector<double>{1, -1})));
  EXPECT_NEAR(pm.value()[0], 1.0, 1e-5);
  EXPECT_NEAR(pm.value()[1], -1.0, 1e-5);

  auto r = layer_norm(tape.constant(randn({4, 16}, 3)));
  for (std::size_t i = 0; i < 4; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += r.value()[i * 16 + j] / 16;
    for (std::size_t j = 0; j < 16; ++j) v += std::pow(r.value()[i * 16 + j] - m, 2) / 16;
    EXPECT_LT(std::abs(m), 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-3);
  }
}

TEST(Autograd, SoftmaxCases) {
  Tape<double> tape;
  auto a = softmax_lastdim(tape.constant(T2({2}, 0.0)));
  EXPECT_DOUBLE_EQ(a.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(a.value()[1], 0.5);
  auto b = softmax_lastdim(tape.constant(T2({2}, std::vector<double>{1000, 0})));
  EXPECT_TRUE(std::isfinite(b.value()[0]) && std::isfinite(b.value()[1]));
  EXPECT_NEAR(b.value()[0], 1.0, 1e-12);
  EXPECT_NEAR(b.value()[1], 0.0, 1e-12);
  auto r = softmax_lastdim(tape.constant(randn({3, 5}, 4)));
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += r.value()[i * 5 + j];
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Autograd, ActivationValues) {
  Tape<double> tape;
  auto z = tape.constant(T2({1}, 0.0));
  EXPECT_EQ(gelu(z).value()[0], 0.0);
  EXPECT_EQ(silu(z).value()[0], 0.0);
  auto big = tape.constant(T2({1}, 12.0));
  EXPECT_NEAR(gelu(big).value()[0], 12.0, 1e-12);
  EXPECT_NEAR(silu(tape.constant(T2({1}, 1.0))).value()[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(GradCheck, QuadraticIsNearExact) {
  auto f = [](Tape<double>&, Var<double> x) { return sum(square(x)); };
  EXPECT_LT(grad_check(f, randn({4, 3}, 5)).max_rel_error, 1e-9);
}

TEST(GradCheck, AbsKinkIsExcluded) {
  T2 x({3}, std::vector<double>{0.5, 0.0, -0.7});
  auto f = [](Tape<double>&, Var<double> v) { return sum(abs(v)); };
  const auto r = grad_check(f, x);
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, NonScalarOutputIsContractError) {
  auto f = [](Tape<double>&, Var<double> v) { return square(v); };
  EXPECT_THROW(grad_check(f, T2({3}, 1.0)), ContractError);
}

TEST(GradCheck, CorruptedGradientIsDetected) {
  GradCheckOptions opt;
  opt.corrupt_gradient = 1e-3;
  for (const auto& r : run_grad_cases(small_grad_cases(), opt)) EXPECT_FALSE(r.passed) << r.name;
}

TEST(GradCheck, EveryOpPassesTightlyAtSeedZero) {
  for (const auto& r : run_grad_cases(small_grad_cases(1e-6, 0))) EXPECT_TRUE(r.passed) << r.name << " err " << r.report.max_rel_error;
}

TEST(GradCheck, EveryOpPassesAtFiveSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& r : run_grad_cases(small_grad_cases(1e-4, seed))) {
      EXPECT_TRUE(r.passed) << r.name << " seed " << seed << " err " << r.report.max_rel_error;
      EXPECT_GT(r.report.checked, 0u);
    }
  }
}

TEST(Autograd, ReshapeTransposeRoundTripIsBitExact) {
  Tape<double> tape;
  const T2 x = randn({2, 3, 4}, 6);
  auto v = tape.constant(x);
  EXPECT_EQ(reshape(reshape(v, {6, 4}), {2, 3, 4}).value(), x);
  EXPECT_EQ(transpose(transpose(v)).value(), x);
  EXPECT_EQ(permute(permute(v, {2, 0, 1}), {1, 2, 0}).value(), x);
}

TEST(Autograd, GradientAccumulatesOverPaths) {
  const T2 x0 = randn({3, 2}, 7);
  auto grad_of = [&](auto build) {
    Tape<double> tape;
    auto x = tape.leaf(x0);
    tape.backward(build(x));
    return tape.grad(x);
  };
  const T2 g1 = grad_of([](Var<double> x) { return sum(gelu(x)); });
  const T2 g2 = grad_of([](Var<double> x) { return sum(mul(x, x)); });
  const T2 g12 = grad_of([](Var<double> x) { return add(sum(gelu(x)), sum(mul(x, x))); });
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-14);
  // d/dx sum(x * x) = 2x: the reused input collects both sides exactly once.
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_DOUBLE_EQ(g2[i], 2 * x0[i]);
}

TEST(Autograd, BroadcastRules) {
  Tape<double> tape;
  auto a = tape.constant(T2({2, 3}, 1.0));
  EXPECT_THROW(add(a, tape.constant(T2({2}, 1.0))), DimensionError);
  EXPECT_THROW(add(tape.constant(T2({3}, 1.0)), a), DimensionError);
  auto b = add(a, tape.constant(T2({3}, std::vector<double>{1, 2, 3})));
  EXPECT_EQ(b.value(), T2({2, 3}, std::vector<double>{2, 3, 4, 2, 3, 4}));
  auto c = mul(a, tape.constant(T2({2, 1}, std::vector<double>{2, 3})));
  EXPECT_EQ(c.value(), T2({2, 3}, std::vector<double>{2, 2, 2, 3, 3, 3}));
}

TEST(Autograd, BackwardRequiresScalarRoot) {
  Tape<double> tape;
  auto x = tape.leaf(T2({2}, 1.0));
  EXPECT_THROW(tape.backward(square(x)), ContractError);
}

TEST(Autograd, SplitConcatRoundTrip) {
  Tape<double> tape;
  const T2 x = randn({2, 5, 3}, 8);
  auto parts = split(tape.constant(x), 1, {2, 3});
  EXPECT_EQ(parts[0].shape(), (Shape{2, 2, 3}));
  EXPECT_EQ(concat(parts, 1).value(), x);
}

TEST(Autograd, FloatTapeMatchesDouble) {
  const T2 a = randn({4, 6}, 9), w = randn({6, 3}, 10);
  Tape<double> td;
  Tape<float> tf;
  auto yd = softmax_lastdim(gelu(matmul(td.constant(a), td.constant(w))));
  auto yf = softmax_lastdim(gelu(matmul(tf.constant(a.cast<float>()), tf.constant(w.cast<float>()))));
  for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yd.value()[i], yf.value()[i], 1e-5);
}
