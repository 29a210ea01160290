#pragma once

// Lightweight diffusion transformer f(x_t, sigma) -> x0_hat:
// patchify -> patch projection + 2D sinusoidal positions -> L sigma-modulated
// transformer blocks with gated residuals -> LayerNorm -> linear -> unpatchify.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sfdit/autograd.hpp"
#include "sfdit/errors.hpp"
#include "sfdit/rng.hpp"
#include "sfdit/transforms.hpp"

namespace sfdit {

struct DitConfig {
  std::size_t n_r = 64;
  std::size_t n_t = 16;
  std::size_t patch = 4;
  std::size_t dim = 128;
  std::size_t layers = 2;
  std::size_t heads = 8;
  double mlp_ratio = 4.0;
  double cond_freq_max = 1e4;

  std::size_t grid_rows() const { return n_r / patch; }
  std::size_t grid_cols() const { return n_t / patch; }
  std::size_t tokens() const { return grid_rows() * grid_cols(); }
  std::size_t patch_dim() const { return 2 * patch * patch; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(dim))); }

  void validate() const {
    if (patch == 0 || n_r == 0 || n_t == 0 || n_r % patch || n_t % patch) {
      throw ConfigError("DiT config: patch " + std::to_string(patch) + " must divide " + std::to_string(n_r) + "x" +
                        std::to_string(n_t));
    }
    if (dim == 0 || dim % 4) throw ConfigError("DiT config: dim " + std::to_string(dim) + " must be divisible by 4");
    if (heads == 0 || dim % heads) {
      throw ConfigError("DiT config: heads " + std::to_string(heads) + " must divide dim " + std::to_string(dim));
    }
    if (layers < 1) throw ConfigError("DiT config: need at least one layer");
    if (!(mlp_ratio > 0) || mlp_hidden() == 0) throw ConfigError("DiT config: mlp_ratio must be positive");
    if (!(cond_freq_max > 1)) throw ConfigError("DiT config: cond_freq_max must exceed 1");
  }

  // Closed form; must agree with parameter_shapes().
  std::size_t parameter_count() const {
    const std::size_t d = dim, h = mlp_hidden(), pd = patch_dim();
    const std::size_t block = (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d) + (d * 6 * d + 6 * d);
    return (pd * d + d) + 2 * (d * d + d) + layers * block + (d * pd + pd);
  }

  friend bool operator==(const DitConfig&, const DitConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DitConfig& c) {
  j = {{"n_r", c.n_r},     {"n_t", c.n_t},     {"patch", c.patch},         {"dim", c.dim},
       {"layers", c.layers}, {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio}, {"cond_freq_max", c.cond_freq_max}};
}

inline void from_json(const nlohmann::json& j, DitConfig& c) {
  DitConfig d;
  c.n_r = j.value("n_r", d.n_r);
  c.n_t = j.value("n_t", d.n_t);
  c.patch = j.value("patch", d.patch);
  c.dim = j.value("dim", d.dim);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.cond_freq_max = j.value("cond_freq_max", d.cond_freq_max);
}

template <class T>
using DitParams = std::map<std::string, Tensor<T>>;

inline std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

// Every parameter tensor with its shape. Linear weights are stored [in, out].
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const DitConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim, h = cfg.mlp_hidden(), pd = cfg.patch_dim();
  std::vector<std::pair<std::string, Shape>> s = {
      {"patch_proj.weight", {pd, d}}, {"patch_proj.bias", {d}},     {"cond_mlp.0.weight", {d, d}},
      {"cond_mlp.0.bias", {d}},       {"cond_mlp.1.weight", {d, d}}, {"cond_mlp.1.bias", {d}},
  };
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = block_prefix(i);
    s.push_back({p + "qkv.weight", {d, 3 * d}});
    s.push_back({p + "qkv.bias", {3 * d}});
    s.push_back({p + "attn_out.weight", {d, d}});
    s.push_back({p + "attn_out.bias", {d}});
    s.push_back({p + "mlp_in.weight", {d, h}});
    s.push_back({p + "mlp_in.bias", {h}});
    s.push_back({p + "mlp_out.weight", {h, d}});
    s.push_back({p + "mlp_out.bias", {d}});
    s.push_back({p + "cond_head.weight", {d, 6 * d}});
    s.push_back({p + "cond_head.bias", {6 * d}});
  }
  s.push_back({"final_proj.weight", {d, pd}});
  s.push_back({"final_proj.bias", {pd}});
  return s;
}

template <class T>
std::size_t count_parameters(const DitParams<T>& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : p) n += t.size();
  return n;
}

inline bool is_zero_init(const std::string& name) {
  return name.find("cond_head.") != std::string::npos || name.rfind("final_proj.", 0) == 0;
}

// Xavier-uniform linear weights, N(0, 0.02^2) conditioning MLP, zero biases,
// and zeroed cond_head / final_proj (every block starts as the identity and
// the network output starts at exactly zero).
template <class T>
DitParams<T> init_params(const DitConfig& cfg, std::uint64_t seed) {
  DitParams<T> p;
  std::uint64_t k = 0;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    Tensor<T> t(shape);
    RandomStream rng(seed, stream_id({0x494e4954ull, k++}));
    const bool is_weight = shape.size() == 2;
    if (is_weight && !is_zero_init(name)) {
      if (name.rfind("cond_mlp.", 0) == 0) {
        for (auto& v : t.values()) v = static_cast<T>(0.02 * rng.normal());
      } else {
        const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
        for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
      }
    }
    p.emplace(name, std::move(t));
  }
  return p;
}

// sin/cos features of `value` at K = dim/2 frequencies freq_max^(-k/K).
// Layout: [sin(w_0 v) .. sin(w_{K-1} v), cos(w_0 v) .. cos(w_{K-1} v)].
inline void sinusoidal_features(double value, std::size_t dim, double freq_max, double* out) {
  const std::size_t half = dim / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double w = std::pow(freq_max, -static_cast<double>(k) / static_cast<double>(half));
    out[k] = std::sin(w * value);
    out[half + k] = std::cos(w * value);
  }
}

// [M, d]: first d/2 channels encode the patch row, last d/2 the patch column.
inline Tensor<double> pos_embed_2d(const DitConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim, gc = cfg.grid_cols();
  Tensor<double> e({cfg.tokens(), d});
  for (std::size_t m = 0; m < cfg.tokens(); ++m) {
    sinusoidal_features(static_cast<double>(m / gc), d / 2, cfg.cond_freq_max, e.data() + m * d);
    sinusoidal_features(static_cast<double>(m % gc), d / 2, cfg.cond_freq_max, e.data() + m * d + d / 2);
  }
  return e;
}

// Sinusoidal features of ln(sigma), before the conditioning MLP.
inline Tensor<double> sigma_features(const std::vector<double>& sigmas, const DitConfig& cfg) {
  Tensor<double> f({sigmas.size(), cfg.dim});
  for (std::size_t b = 0; b < sigmas.size(); ++b) {
    if (!(sigmas[b] > 0)) throw DomainError("sigma_embed: noise level must be positive, got " + std::to_string(sigmas[b]));
    sinusoidal_features(std::log(sigmas[b]), cfg.dim, cfg.cond_freq_max, f.data() + b * cfg.dim);
  }
  return f;
}

// Non-overlapping P x P patches in raster order, each flattened channel-major.
inline Tensor<double> patchify(const CsiImage& x, const DitConfig& cfg) {
  cfg.validate();
  if (x.data.shape() != Shape{2, cfg.n_r, cfg.n_t}) {
    throw ConfigError("patchify: image " + shape_str(x.data.shape()) + " does not match config " +
                      std::to_string(cfg.n_r) + "x" + std::to_string(cfg.n_t));
  }
  const std::size_t P = cfg.patch, gc = cfg.grid_cols(), nt = cfg.n_t, nrnt = cfg.n_r * cfg.n_t;
  Tensor<double> out({cfg.tokens(), cfg.patch_dim()});
  for (std::size_t m = 0; m < cfg.tokens(); ++m) {
    const std::size_t pr = m / gc, pc = m % gc;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < P; ++i)
        for (std::size_t j = 0; j < P; ++j)
          out[m * 2 * P * P + c * P * P + i * P + j] = x.data[c * nrnt + (pr * P + i) * nt + pc * P + j];
  }
  return out;
}

inline CsiImage unpatchify(const Tensor<double>& tokens, const DitConfig& cfg) {
  cfg.validate();
  if (tokens.shape() != Shape{cfg.tokens(), cfg.patch_dim()}) {
    throw DimensionError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match config");
  }
  const std::size_t P = cfg.patch, gc = cfg.grid_cols(), nt = cfg.n_t, nrnt = cfg.n_r * cfg.n_t;
  Tensor<double> x({2, cfg.n_r, cfg.n_t});
  for (std::size_t m = 0; m < cfg.tokens(); ++m) {
    const std::size_t pr = m / gc, pc = m % gc;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < P; ++i)
        for (std::size_t j = 0; j < P; ++j)
          x[c * nrnt + (pr * P + i) * nt + pc * P + j] = tokens[m * 2 * P * P + c * P * P + i * P + j];
  }
  return {std::move(x)};
}

// ---- graph construction ----

template <class T>
using ParamVars = std::map<std::string, Var<T>>;

template <class T>
ParamVars<T> bind_params(Tape<T>& tape, const DitParams<T>& params, bool requires_grad) {
  ParamVars<T> v;
  for (const auto& [name, t] : params) v.emplace(name, tape.leaf(t, requires_grad));
  return v;
}

namespace detail {

template <class T>
const Var<T>& param(const ParamVars<T>& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw ConfigError("DiT parameters lack tensor '" + name + "'");
  return it->second;
}

template <class T>
Tensor<T> cast_tensor(const Tensor<double>& t) {
  return t.template cast<T>();
}

inline thread_local std::size_t forward_pass_counter = 0;

}  // namespace detail

// Forward passes executed on the calling thread since it started.
inline std::size_t forward_pass_count() { return detail::forward_pass_counter; }

// [B, 2, n_r, n_t] -> [B, M, 2P^2]
template <class T>
Var<T> patchify(Var<T> x, const DitConfig& cfg) {
  const std::size_t B = x.shape()[0], P = cfg.patch;
  Var<T> r = reshape(x, {B, 2, cfg.grid_rows(), P, cfg.grid_cols(), P});
  r = permute(r, {0, 2, 4, 1, 3, 5});
  return reshape(r, {B, cfg.tokens(), cfg.patch_dim()});
}

// [B, M, 2P^2] -> [B, 2, n_r, n_t]
template <class T>
Var<T> unpatchify(Var<T> tokens, const DitConfig& cfg) {
  const std::size_t B = tokens.shape()[0], P = cfg.patch;
  Var<T> r = reshape(tokens, {B, cfg.grid_rows(), cfg.grid_cols(), 2, P, P});
  r = permute(r, {0, 3, 1, 4, 2, 5});
  return reshape(r, {B, 2, cfg.n_r, cfg.n_t});
}

// c = Linear(SiLU(Linear(features(ln sigma)))) -> [B, d]
template <class T>
Var<T> sigma_embed(Tape<T>& tape, const ParamVars<T>& p, const DitConfig& cfg, const std::vector<double>& sigmas) {
  Var<T> f = tape.constant(detail::cast_tensor<T>(sigma_features(sigmas, cfg)));
  Var<T> h = silu(linear(f, detail::param(p, "cond_mlp.0.weight"), detail::param(p, "cond_mlp.0.bias")));
  return linear(h, detail::param(p, "cond_mlp.1.weight"), detail::param(p, "cond_mlp.1.bias"));
}

// Multi-head scaled dot-product self-attention without mask; tokens [B, M, d].
template <class T>
Var<T> self_attention(Var<T> h, const ParamVars<T>& p, const std::string& prefix, const DitConfig& cfg) {
  const std::size_t B = h.shape()[0], M = h.shape()[1], H = cfg.heads, dh = cfg.head_dim(), d = cfg.dim;
  Var<T> qkv = linear(h, detail::param(p, prefix + "qkv.weight"), detail::param(p, prefix + "qkv.bias"));
  qkv = permute(reshape(qkv, {B, M, 3, H, dh}), {2, 0, 3, 1, 4});  // [3, B, H, M, dh]
  auto parts = split(qkv, 0, {1, 1, 1});
  Var<T> q = reshape(parts[0], {B * H, M, dh});
  Var<T> k = reshape(parts[1], {B * H, M, dh});
  Var<T> v = reshape(parts[2], {B * H, M, dh});
  Var<T> att = softmax_lastdim(scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)))));
  Var<T> o = matmul(att, v);                                           // [B*H, M, dh]
  o = reshape(permute(reshape(o, {B, H, M, dh}), {0, 2, 1, 3}), {B, M, d});
  return linear(o, detail::param(p, prefix + "attn_out.weight"), detail::param(p, prefix + "attn_out.bias"));
}

// (g1, b1, a1, g2, b2, a2) = split(cond_head(c), 6)
// h   = x + a1 * Attn((1 + g1) * LN(x) + b1)
// out = h + a2 * MLP((1 + g2) * LN(h) + b2)
template <class T>
Var<T> dit_block(Var<T> tokens, Var<T> c, const ParamVars<T>& p, std::size_t index, const DitConfig& cfg) {
  const std::string pre = block_prefix(index);
  const std::size_t B = tokens.shape()[0], d = cfg.dim;
  Var<T> mod = linear(c, detail::param(p, pre + "cond_head.weight"), detail::param(p, pre + "cond_head.bias"));
  auto m = split(reshape(mod, {B, 1, 6 * d}), 2, {d, d, d, d, d, d});
  const T one{1};

  Var<T> h = add(mul(layer_norm(tokens), add_scalar(m[0], one)), m[1]);
  Var<T> x = add(tokens, mul(self_attention(h, p, pre, cfg), m[2]));

  Var<T> h2 = add(mul(layer_norm(x), add_scalar(m[3], one)), m[4]);
  Var<T> f = gelu(linear(h2, detail::param(p, pre + "mlp_in.weight"), detail::param(p, pre + "mlp_in.bias")));
  f = linear(f, detail::param(p, pre + "mlp_out.weight"), detail::param(p, pre + "mlp_out.bias"));
  return add(x, mul(f, m[5]));
}

// x_t: [B, 2, n_r, n_t] with one noise level per item. Returns x0_hat with the same shape.
template <class T>
Var<T> dit_forward(Tape<T>& tape, const ParamVars<T>& p, const DitConfig& cfg, Var<T> x_t,
                   const std::vector<double>& sigmas) {
  cfg.validate();
  const Shape& xs = x_t.shape();
  if (xs.size() != 4 || xs[1] != 2 || xs[2] != cfg.n_r || xs[3] != cfg.n_t) {
    throw ConfigError("dit_forward: input " + shape_str(xs) + " does not match model geometry " +
                      std::to_string(cfg.n_r) + "x" + std::to_string(cfg.n_t));
  }
  if (sigmas.size() != xs[0]) throw DimensionError("dit_forward: one noise level per batch item required");
  ++detail::forward_pass_counter;

  Var<T> tok = linear(patchify(x_t, cfg), detail::param(p, "patch_proj.weight"), detail::param(p, "patch_proj.bias"));
  tok = add(tok, tape.constant(detail::cast_tensor<T>(pos_embed_2d(cfg))));
  Var<T> c = sigma_embed(tape, p, cfg, sigmas);
  for (std::size_t i = 0; i < cfg.layers; ++i) tok = dit_block(tok, c, p, i, cfg);
  Var<T> out = linear(layer_norm(tok), detail::param(p, "final_proj.weight"), detail::param(p, "final_proj.bias"));
  return unpatchify(out, cfg);
}

// Stacks images into a [B, 2, n_r, n_t] tensor.
template <class T>
Tensor<T> stack_images(const std::vector<const CsiImage*>& images) {
  if (images.empty()) throw ContractError("stack_images: empty batch");
  const Shape& s = images[0]->data.shape();
  Tensor<T> out({images.size(), s[0], s[1], s[2]});
  const std::size_t n = images[0]->data.size();
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b]->data.shape() != s) throw DimensionError("stack_images: inconsistent image shapes");
    std::copy(images[b]->data.storage().begin(), images[b]->data.storage().end(), out.data() + b * n);
  }
  return out;
}

// Inference wrapper: parameters plus config, no gradient tracking.
template <class T>
class DitModel {
 public:
  DitModel() = default;
  DitModel(DitConfig cfg, DitParams<T> params) : cfg_(cfg), params_(std::move(params)) { cfg_.validate(); }

  static DitModel initialized(const DitConfig& cfg, std::uint64_t seed) { return {cfg, init_params<T>(cfg, seed)}; }

  const DitConfig& config() const noexcept { return cfg_; }
  const DitParams<T>& params() const noexcept { return params_; }
  DitParams<T>& params() noexcept { return params_; }

  std::vector<CsiImage> forward(const std::vector<const CsiImage*>& x_t, const std::vector<double>& sigmas) const {
    Tape<T> tape;
    ParamVars<T> p = bind_params(tape, params_, false);
    Var<T> out = dit_forward(tape, p, cfg_, tape.constant(stack_images<T>(x_t)), sigmas);
    const Tensor<T>& v = out.value();
    const std::size_t n = 2 * cfg_.n_r * cfg_.n_t;
    std::vector<CsiImage> res;
    for (std::size_t b = 0; b < x_t.size(); ++b) {
      Tensor<double> img({2, cfg_.n_r, cfg_.n_t});
      for (std::size_t i = 0; i < n; ++i) img[i] = static_cast<double>(v[b * n + i]);
      res.push_back({std::move(img)});
    }
    return res;
  }

  CsiImage operator()(const CsiImage& x_t, double sigma) const { return forward({&x_t}, {sigma})[0]; }

 private:
  DitConfig cfg_;
  DitParams<T> params_;
};

}  // namespace sfdit
