#pragma once

// Finite-difference gradient checks over every differentiable op ("small"),
// one transformer block ("block") and a tiny end-to-end DiT ("full").

#include <string>
#include <vector>

#include "sfdit/dit.hpp"
#include "sfdit/grad_check.hpp"
#include "sfdit/rng.hpp"

namespace sfdit {

struct GradCase {
  std::string name;
  ScalarGraphFn fn;
  std::vector<Tensor<double>> inputs;
  double tolerance;
};

struct GradCaseResult {
  std::string name;
  GradCheckReport report;
  double tolerance;
  bool passed;
};

namespace detail {

inline Tensor<double> randn(const Shape& s, RandomStream& rng, double scale = 1.0, double offset = 0.0) {
  Tensor<double> t(s);
  for (auto& v : t.values()) v = offset + scale * rng.normal();
  return t;
}

// Values bounded away from zero, for ops with a kink at the origin.
inline Tensor<double> rand_away_from_zero(const Shape& s, RandomStream& rng) {
  Tensor<double> t(s);
  for (auto& v : t.values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.5);
  return t;
}

// Reduces a non-scalar output to a scalar with fixed random weights, so
// every output coordinate contributes with a distinct sensitivity.
inline Var<double> weighted_sum(Var<double> y, std::uint64_t salt) {
  RandomStream rng(0x57454947ull, salt);
  return sum(mul(y, y.tape->constant(randn(y.shape(), rng))));
}

using UnaryOp = Var<double> (*)(Var<double>);

inline GradCase unary_case(std::string name, UnaryOp op, Tensor<double> x, double tol) {
  const std::uint64_t salt = std::hash<std::string>{}(name);
  return {std::move(name), [op, salt](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(op(v[0]), salt); },
          {std::move(x)}, tol};
}

inline GradCase binary_case(std::string name, Var<double> (*op)(Var<double>, Var<double>), Tensor<double> a,
                            Tensor<double> b, double tol) {
  const std::uint64_t salt = std::hash<std::string>{}(name);
  return {std::move(name),
          [op, salt](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(op(v[0], v[1]), salt); },
          {std::move(a), std::move(b)}, tol};
}

inline DitConfig tiny_dit_config(std::size_t layers) {
  DitConfig c;
  c.n_r = 8;
  c.n_t = 4;
  c.patch = 2;
  c.dim = 8;
  c.layers = layers;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

// Random parameters everywhere (zero-init gates would hide most gradients).
inline DitParams<double> random_params(const DitConfig& cfg, std::uint64_t seed) {
  DitParams<double> p;
  RandomStream rng(seed, 0);
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    const double s = 1.0 / std::sqrt(static_cast<double>(shape[0]));
    p.emplace(name, randn(shape, rng, shape.size() == 2 ? s : 0.1));
  }
  return p;
}

inline ParamVars<double> vars_by_name(const std::vector<std::string>& names, const std::vector<Var<double>>& v,
                                      std::size_t first) {
  ParamVars<double> p;
  for (std::size_t i = 0; i < names.size(); ++i) p.emplace(names[i], v[first + i]);
  return p;
}

}  // namespace detail

inline std::vector<GradCase> small_grad_cases(double tol = 1e-6, std::uint64_t seed = 0) {
  using detail::binary_case;
  using detail::randn;
  using detail::unary_case;
  using V = Var<double>;
  RandomStream rng(0x534d414cull, seed);
  std::vector<GradCase> c;
  c.push_back(binary_case("add", [](V a, V b) { return add(a, b); }, randn({3, 4}, rng), randn({3, 4}, rng), tol));
  c.push_back(binary_case("add_bias", [](V a, V b) { return add(a, b); }, randn({2, 3, 4}, rng), randn({4}, rng), tol));
  c.push_back(binary_case("sub_general_broadcast", [](V a, V b) { return sub(a, b); }, randn({2, 3, 4}, rng),
                          randn({3, 1}, rng), tol));
  c.push_back(binary_case("mul", [](V a, V b) { return mul(a, b); }, randn({3, 4}, rng), randn({3, 4}, rng), tol));
  c.push_back(binary_case("mul_rowwise", [](V a, V b) { return mul(a, b); }, randn({2, 3, 4}, rng),
                          randn({2, 1, 4}, rng), tol));
  c.push_back(binary_case("mul_per_item", [](V a, V b) { return mul(a, b); }, randn({2, 2, 3, 2}, rng),
                          randn({2, 1, 1, 1}, rng), tol));
  c.push_back(unary_case("scale", [](V a) { return scale(a, 0.7); }, randn({5}, rng), tol));
  c.push_back(unary_case("add_scalar", [](V a) { return add_scalar(a, 1.5); }, randn({5}, rng), tol));
  c.push_back(unary_case("neg", [](V a) { return neg(a); }, randn({5}, rng), tol));
  c.push_back(unary_case("square", [](V a) { return square(a); }, randn({2, 3}, rng), tol));
  c.push_back(unary_case("abs", [](V a) { return abs(a); }, detail::rand_away_from_zero({2, 3}, rng), tol));
  c.push_back(unary_case("gelu", [](V a) { return gelu(a); }, randn({3, 4}, rng, 1.5), tol));
  c.push_back(unary_case("silu", [](V a) { return silu(a); }, randn({3, 4}, rng, 1.5), tol));
  c.push_back(unary_case("reshape", [](V a) { return reshape(a, {4, 3}); }, randn({2, 6}, rng), tol));
  c.push_back(unary_case("permute", [](V a) { return permute(a, {2, 0, 1}); }, randn({2, 3, 4}, rng), tol));
  c.push_back(unary_case("transpose", [](V a) { return transpose(a); }, randn({2, 3, 4}, rng), tol));
  c.push_back(unary_case("slice", [](V a) { return slice(a, 1, 1, 2); }, randn({2, 4, 3}, rng), tol));
  c.push_back(unary_case("split", [](V a) {
    auto p = split(a, 1, {1, 2});
    return mul(p[0], reshape(sum(p[1], 1), {2, 1, 2}));
  }, randn({2, 3, 2}, rng), tol));
  c.push_back(binary_case("concat", [](V a, V b) { return concat<double>({a, b, a}, 1); }, randn({2, 2}, rng),
                          randn({2, 3}, rng), tol));
  c.push_back(unary_case("sum_all", [](V a) { return sum(a); }, randn({3, 2}, rng), tol));
  c.push_back(unary_case("mean_all", [](V a) { return mean(a); }, randn({3, 2}, rng), tol));
  c.push_back(unary_case("sum_axis", [](V a) { return sum(a, 1); }, randn({2, 3, 4}, rng), tol));
  c.push_back(unary_case("mean_axis", [](V a) { return mean(a, 0); }, randn({2, 3, 4}, rng), tol));
  c.push_back(binary_case("matmul", [](V a, V b) { return matmul(a, b); }, randn({3, 4}, rng), randn({4, 2}, rng), tol));
  c.push_back(binary_case("matmul_folded", [](V a, V b) { return matmul(a, b); }, randn({2, 3, 4}, rng),
                          randn({4, 5}, rng), tol));
  c.push_back(binary_case("matmul_batched", [](V a, V b) { return matmul(a, b); }, randn({2, 3, 4}, rng),
                          randn({2, 4, 2}, rng), tol));
  {
    const std::uint64_t salt = 17;
    c.push_back({"linear",
                 [salt](Tape<double>&, const std::vector<V>& v) { return detail::weighted_sum(linear(v[0], v[1], v[2]), salt); },
                 {randn({2, 3, 4}, rng), randn({4, 5}, rng), randn({5}, rng)},
                 tol});
  }
  c.push_back(unary_case("layer_norm", [](V a) { return layer_norm(a); }, randn({3, 6}, rng, 2.0, 0.5), tol));
  c.push_back(unary_case("softmax_lastdim", [](V a) { return softmax_lastdim(a); }, randn({2, 3, 5}, rng, 2.0), tol));
  c.push_back(unary_case("composite", [](V a) { return softmax_lastdim(gelu(layer_norm(square(a)))); },
                         randn({2, 4}, rng), tol));
  return c;
}

// One transformer block: tokens, conditioning and all block parameters.
inline GradCase block_grad_case(double tol = 1e-4) {
  const DitConfig cfg = detail::tiny_dit_config(1);
  RandomStream rng(0x424c4f43ull, 0);
  const DitParams<double> all = detail::random_params(cfg, 3);
  std::vector<std::string> names;
  std::vector<Tensor<double>> inputs = {detail::randn({2, cfg.tokens(), cfg.dim}, rng), detail::randn({2, cfg.dim}, rng)};
  for (const auto& [name, t] : all) {
    if (name.rfind(block_prefix(0), 0) != 0) continue;
    names.push_back(name);
    inputs.push_back(t);
  }
  auto fn = [cfg, names](Tape<double>&, const std::vector<Var<double>>& v) {
    return detail::weighted_sum(dit_block(v[0], v[1], detail::vars_by_name(names, v, 2), 0, cfg), 29);
  };
  return {"dit_block", fn, std::move(inputs), tol};
}

// End-to-end tiny DiT (L = 1): input image plus every parameter.
inline GradCase full_grad_case(double tol = 1e-4) {
  const DitConfig cfg = detail::tiny_dit_config(1);
  RandomStream rng(0x46554c4cull, 0);
  const DitParams<double> all = detail::random_params(cfg, 5);
  std::vector<std::string> names;
  std::vector<Tensor<double>> inputs = {detail::randn({2, 2, cfg.n_r, cfg.n_t}, rng)};
  for (const auto& [name, t] : all) {
    names.push_back(name);
    inputs.push_back(t);
  }
  auto fn = [cfg, names](Tape<double>& tape, const std::vector<Var<double>>& v) {
    return detail::weighted_sum(dit_forward(tape, detail::vars_by_name(names, v, 1), cfg, v[0], {0.3, 2.0}), 31);
  };
  return {"dit_forward", fn, std::move(inputs), tol};
}

inline std::vector<GradCase> grad_cases(const std::string& size) {
  if (size == "small") return small_grad_cases();
  if (size == "block") return {block_grad_case()};
  if (size == "full") return {full_grad_case()};
  throw ConfigError("unknown gradcheck size '" + size + "' (small|block|full)");
}

inline std::vector<GradCaseResult> run_grad_cases(const std::vector<GradCase>& cases, const GradCheckOptions& opt = {}) {
  std::vector<GradCaseResult> out;
  for (const auto& c : cases) {
    const GradCheckReport r = grad_check(c.fn, c.inputs, opt);
    out.push_back({c.name, r, c.tolerance, r.checked > 0 && r.max_rel_error < c.tolerance});
  }
  return out;
}

}  // namespace sfdit
