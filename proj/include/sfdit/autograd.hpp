#pragma once

// Tape-based reverse-mode automatic differentiation over Tensor<T>.
//
// Every op appends a node holding its forward value and a closure that
// scatters the node's gradient into its inputs. Nodes are appended in
// evaluation order, so walking the tape backwards is a reverse topological
// traversal and visits each node exactly once.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sfdit/errors.hpp"
#include "sfdit/tensor.hpp"

namespace sfdit {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{"leaf", std::move(value), {}, {}, requires_grad});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<std::size_t> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::vector<std::size_t>(inputs), std::move(fn));
  }

  Var<T> record(const char* op, Tensor<T> value, const std::vector<std::size_t>& inputs, BackwardFn fn) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_.at(i).requires_grad;
    Node n{op, std::move(value), {}, {}, needs};
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient accumulator, allocated (zeroed) on first access.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  // Gradient of the last backward root with respect to `v` (zeros if unreached).
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor<T>();
  }

  void backward(Var<T> root) {
    if (root.tape != this) throw ContractError("backward: variable belongs to another tape");
    if (value(root.id).size() != 1) {
      throw ContractError("backward: root must be scalar, got shape " + shape_str(value(root.id).shape()));
    }
    grad_buffer(root.id)[0] += T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    const char* op;
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
Tape<T>* same_tape(Var<T> a, Var<T> b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return a.tape;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Flat index into `b` for every flat index of `out`, when b broadcasts to out.
// b may have fewer dims (aligned to the trailing dims) and singleton dims.
inline std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& b) {
  if (b.size() > out.size()) {
    throw DimensionError("cannot broadcast " + shape_str(b) + " to " + shape_str(out));
  }
  Shape padded(out.size() - b.size(), 1);
  padded.insert(padded.end(), b.begin(), b.end());
  Shape bstride = strides_of(padded);
  for (std::size_t d = 0; d < out.size(); ++d) {
    if (padded[d] == out[d]) continue;
    if (padded[d] != 1) throw DimensionError("cannot broadcast " + shape_str(b) + " to " + shape_str(out));
    bstride[d] = 0;
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = off;
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      off += bstride[d];
      if (idx[d] < out[d]) break;
      off -= bstride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

// b broadcast to out as [outer, 1, inner] -> [outer, mid, inner]; covers
// trailing-dim biases, per-item modulation [B, 1, d] and per-item scalars.
struct BlockBroadcast {
  std::size_t outer = 1, mid = 1, inner = 1;
};

inline std::optional<BlockBroadcast> block_broadcast(const Shape& out, const Shape& b) {
  if (b.size() > out.size()) return std::nullopt;
  Shape padded(out.size() - b.size(), 1);
  padded.insert(padded.end(), b.begin(), b.end());
  std::size_t d = 0;
  BlockBroadcast bb;
  for (; d < out.size() && padded[d] == out[d]; ++d) bb.outer *= out[d];
  for (; d < out.size() && padded[d] == 1; ++d) bb.mid *= out[d];
  for (; d < out.size() && padded[d] == out[d]; ++d) bb.inner *= out[d];
  if (d != out.size()) return std::nullopt;
  return bb;
}

enum class BinaryKind { kAdd, kSub, kMul };

template <class T>
Var<T> binary(BinaryKind kind, Var<T> a, Var<T> b, const char* name) {
  Tape<T>* tape = same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  // Either a block pattern or an explicit index map.
  std::optional<BlockBroadcast> blk = block_broadcast(av.shape(), bv.shape());
  std::shared_ptr<std::vector<std::size_t>> map;
  if (!blk) map = std::make_shared<std::vector<std::size_t>>(broadcast_map(av.shape(), bv.shape()));

  // Visits (i, j) pairs: i indexes a/out, j indexes b.
  auto for_each_pair = [blk, map](std::size_t n, auto&& fn) {
    if (blk) {
      std::size_t i = 0;
      for (std::size_t o = 0; o < blk->outer; ++o)
        for (std::size_t m = 0; m < blk->mid; ++m)
          for (std::size_t k = 0; k < blk->inner; ++k, ++i) fn(i, o * blk->inner + k);
    } else {
      for (std::size_t i = 0; i < n; ++i) fn(i, (*map)[i]);
    }
  };

  Tensor<T> out(av.shape());
  T* op = out.data();
  const T* ap = av.data();
  const T* bp = bv.data();
  switch (kind) {
    case BinaryKind::kAdd: for_each_pair(out.size(), [&](std::size_t i, std::size_t j) { op[i] = ap[i] + bp[j]; }); break;
    case BinaryKind::kSub: for_each_pair(out.size(), [&](std::size_t i, std::size_t j) { op[i] = ap[i] - bp[j]; }); break;
    case BinaryKind::kMul: for_each_pair(out.size(), [&](std::size_t i, std::size_t j) { op[i] = ap[i] * bp[j]; }); break;
  }
  const std::size_t ia = a.id, ib = b.id;
  return tape->record(name, std::move(out), {ia, ib}, [kind, ia, ib, for_each_pair](Tape<T>& t, std::size_t self) {
    const T* g = t.grad_buffer(self).data();
    const std::size_t n = t.value(self).size();
    if (t.requires_grad(ia)) {
      T* ga = t.grad_buffer(ia).data();
      if (kind == BinaryKind::kMul) {
        const T* bp = t.value(ib).data();
        for_each_pair(n, [&](std::size_t i, std::size_t j) { ga[i] += g[i] * bp[j]; });
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
    }
    if (t.requires_grad(ib)) {
      T* gb = t.grad_buffer(ib).data();
      if (kind == BinaryKind::kMul) {
        const T* ap = t.value(ia).data();
        for_each_pair(n, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * ap[i]; });
      } else {
        const T s = kind == BinaryKind::kSub ? T{-1} : T{1};
        for_each_pair(n, [&](std::size_t i, std::size_t j) { gb[j] += s * g[i]; });
      }
    }
  });
}

// Elementwise unary op given value and derivative functors.
template <class T, class F, class D>
Var<T> unary(Var<T> a, const char* name, F f, D df) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id;
  return a.tape->record(name, std::move(out), {ia}, [ia, df](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_buffer(self);
    const Tensor<T>& x = t.value(ia);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i]);
  });
}

// Flat source index for each output index of a permutation.
inline std::vector<std::size_t> permute_map(const Shape& in, const std::vector<std::size_t>& perm, Shape& out_shape) {
  if (perm.size() != in.size()) throw DimensionError("permute: axis list does not match rank");
  std::vector<bool> seen(in.size(), false);
  out_shape.assign(in.size(), 0);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= in.size() || seen[perm[i]]) throw DimensionError("permute: invalid axis permutation");
    seen[perm[i]] = true;
    out_shape[i] = in[perm[i]];
  }
  const Shape in_stride = strides_of(in);
  Shape src_stride(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) src_stride[i] = in_stride[perm[i]];
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(in.size(), 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = off;
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      ++idx[d];
      off += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace detail

// ---- elementwise arithmetic (b broadcasts to a's shape) ----

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary(detail::BinaryKind::kAdd, a, b, "add");
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary(detail::BinaryKind::kSub, a, b, "sub");
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary(detail::BinaryKind::kMul, a, b, "mul");
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return detail::unary(a, "scale", [s](T x) { return s * x; }, [s](T) { return s; });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  return detail::unary(a, "add_scalar", [s](T x) { return x + s; }, [](T) { return T{1}; });
}

template <class T>
Var<T> neg(Var<T> a) {
  return scale(a, T{-1});
}

template <class T>
Var<T> square(Var<T> a) {
  return detail::unary(a, "square", [](T x) { return x * x; }, [](T x) { return T{2} * x; });
}

// Subgradient 0 at the kink.
template <class T>
Var<T> abs(Var<T> a) {
  return detail::unary(
      a, "abs", [](T x) { return std::abs(x); }, [](T x) { return x > 0 ? T{1} : (x < 0 ? T{-1} : T{0}); });
}

// ---- activations ----

// tanh approximation
template <class T>
Var<T> gelu(Var<T> a) {
  constexpr T c = T(0.79788456080286535588);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary(
      a, "gelu",
      [](T x) { return T(0.5) * x * (T{1} + std::tanh(c * (x + k * x * x * x))); },
      [](T x) {
        const T u = c * (x + k * x * x * x);
        const T th = std::tanh(u);
        const T du = c * (T{1} + T{3} * k * x * x);
        return T(0.5) * (T{1} + th) + T(0.5) * x * (T{1} - th * th) * du;
      });
}

template <class T>
Var<T> silu(Var<T> a) {
  return detail::unary(
      a, "silu",
      [](T x) { return x / (T{1} + std::exp(-x)); },
      [](T x) {
        const T s = T{1} / (T{1} + std::exp(-x));
        return s * (T{1} + x * (T{1} - s));
      });
}

// ---- shape ops ----

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record("reshape", std::move(out), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_buffer(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Var<T> permute(Var<T> a, const std::vector<std::size_t>& perm) {
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(detail::permute_map(a.shape(), perm, out_shape));
  const Tensor<T>& av = a.value();
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[(*map)[i]];
  const std::size_t ia = a.id;
  return a.tape->record("permute", std::move(out), {ia}, [ia, map](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_buffer(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*map)[i]] += g[i];
  });
}

// Swap the two trailing dims.
template <class T>
Var<T> transpose(Var<T> a) {
  const std::size_t r = a.shape().size();
  if (r < 2) throw DimensionError("transpose: rank < 2");
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

// Contiguous range [start, start+len) along `axis`.
template <class T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& in = a.shape();
  if (axis >= in.size() || len == 0 || start + len > in[axis]) {
    throw DimensionError("slice: range out of bounds for shape " + shape_str(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
  const std::size_t extent = in[axis];
  Shape os = in;
  os[axis] = len;
  Tensor<T> out(os);
  const Tensor<T>& av = a.value();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data() + (o * extent + start) * inner, len * inner, out.data() + o * len * inner);
  }
  const std::size_t ia = a.id;
  return a.tape->record("slice", std::move(out), {ia},
                        [ia, outer, inner, extent, start, len](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& g = t.grad_buffer(self);
                          Tensor<T>& ga = t.grad_buffer(ia);
                          for (std::size_t o = 0; o < outer; ++o) {
                            const T* src = g.data() + o * len * inner;
                            T* dst = ga.data() + (o * extent + start) * inner;
                            for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                          }
                        });
}

template <class T>
std::vector<Var<T>> split(Var<T> a, std::size_t axis, const std::vector<std::size_t>& sizes) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (axis >= a.shape().size() || total != a.shape()[axis]) {
    throw DimensionError("split: sizes do not cover axis of " + shape_str(a.shape()));
  }
  std::vector<Var<T>> parts;
  std::size_t start = 0;
  for (auto s : sizes) {
    parts.push_back(slice(a, axis, start, s));
    start += s;
  }
  return parts;
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Tape<T>* tape = parts[0].tape;
  Shape os = parts[0].shape();
  if (axis >= os.size()) throw DimensionError("concat: axis out of range");
  std::vector<std::size_t> extents, ids;
  os[axis] = 0;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    const Shape& s = p.shape();
    if (s.size() != os.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != parts[0].shape()[d]) throw DimensionError("concat: shape mismatch " + shape_str(s));
    }
    extents.push_back(s[axis]);
    ids.push_back(p.id);
    os[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= os[d];
  for (std::size_t d = axis + 1; d < os.size(); ++d) inner *= os[d];
  const std::size_t total = os[axis];
  Tensor<T> out(os);
  std::size_t start = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& pv = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * extents[k] * inner, extents[k] * inner, out.data() + (o * total + start) * inner);
    }
    start += extents[k];
  }
  return tape->record("concat", std::move(out), ids, [ids, extents, outer, inner, total](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_buffer(self);
    std::size_t start = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor<T>& gk = t.grad_buffer(ids[k]);
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.data() + (o * total + start) * inner;
          T* dst = gk.data() + o * extents[k] * inner;
          for (std::size_t i = 0; i < extents[k] * inner; ++i) dst[i] += src[i];
        }
      }
      start += extents[k];
    }
  });
}

// ---- reductions ----

template <class T>
Var<T> sum(Var<T> a) {
  T acc{0};
  for (T v : a.value().values()) acc += v;
  const std::size_t ia = a.id;
  return a.tape->record("sum", Tensor<T>::scalar(acc), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(self)[0];
    Tensor<T>& ga = t.grad_buffer(ia);
    for (auto& v : ga.values()) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

// Sum over one axis; the axis is removed (a rank-1 input yields shape {1}).
template <class T>
Var<T> sum(Var<T> a, std::size_t axis) {
  const Shape& in = a.shape();
  if (axis >= in.size()) throw DimensionError("sum: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
  const std::size_t extent = in[axis];
  Shape os;
  for (std::size_t d = 0; d < in.size(); ++d)
    if (d != axis) os.push_back(in[d]);
  if (os.empty()) os.push_back(1);
  Tensor<T> out(os);
  const Tensor<T>& av = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * extent + e) * inner + i];
  const std::size_t ia = a.id;
  return a.tape->record("sum_axis", std::move(out), {ia}, [ia, outer, inner, extent](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_buffer(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t e = 0; e < extent; ++e)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * extent + e) * inner + i] += g[o * inner + i];
  });
}

template <class T>
Var<T> mean(Var<T> a, std::size_t axis) {
  if (axis >= a.shape().size()) throw DimensionError("mean: axis out of range");
  return scale(sum(a, axis), T{1} / static_cast<T>(a.shape()[axis]));
}

// ---- linear algebra ----

// [.., m, k] x [k, n]   -> [.., m, n]   (leading dims folded into rows)
// [B.., m, k] x [B.., k, n] -> [B.., m, n] (batched, identical batch dims)
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) throw DimensionError("matmul: operands must have rank >= 2");
  const std::size_t k = as.back();
  if (bs[bs.size() - 2] != k) {
    throw DimensionError("matmul: inner dims disagree, " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t n = bs.back();
  const std::size_t m = as[as.size() - 2];
  std::size_t batch = 1;
  bool batched = bs.size() > 2;
  if (batched) {
    if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
      throw DimensionError("matmul: batch dims disagree, " + shape_str(as) + " x " + shape_str(bs));
    }
    for (std::size_t d = 0; d + 2 < as.size(); ++d) batch *= as[d];
  }
  const std::size_t rows = batched ? m : a.size() / k;
  Shape os = as;
  os.back() = n;
  Tensor<T> out(os);
  {
    const T* ap = a.value().data();
    const T* bp = b.value().data();
    T* cp = out.data();
    for (std::size_t s = 0; s < batch; ++s) {
      detail::CMapMat<T> A(ap + s * rows * k, rows, k);
      detail::CMapMat<T> B(bp + s * k * n, k, n);
      detail::MapMat<T> C(cp + s * rows * n, rows, n);
      C.noalias() = A * B;
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return tape->record("matmul", std::move(out), {ia, ib}, [=](Tape<T>& t, std::size_t self) {
    const T* gp = t.grad_buffer(self).data();
    for (std::size_t s = 0; s < batch; ++s) {
      detail::CMapMat<T> G(gp + s * rows * n, rows, n);
      if (t.requires_grad(ia)) {
        detail::CMapMat<T> B(t.value(ib).data() + s * k * n, k, n);
        detail::MapMat<T> GA(t.grad_buffer(ia).data() + s * rows * k, rows, k);
        GA.noalias() += G * B.transpose();
      }
      if (t.requires_grad(ib)) {
        detail::CMapMat<T> A(t.value(ia).data() + s * rows * k, rows, k);
        detail::MapMat<T> GB(t.grad_buffer(ib).data() + s * k * n, k, n);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

// x·W + b with W stored [in, out].
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add(matmul(x, w), b);
}

// ---- normalization ----

// Normalizes over the last dim with no affine parameters.
template <class T>
Var<T> layer_norm(Var<T> a, T eps = T(1e-6)) {
  const Tensor<T>& av = a.value();
  const std::size_t d = av.shape().back();
  const std::size_t rows = av.size() / d;
  Tensor<T> out(av.shape());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    T* y = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) y[j] = (x[j] - mu) * is;
  }
  const std::size_t ia = a.id;
  return a.tape->record("layer_norm", std::move(out), {ia}, [ia, d, rows, inv_std](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_buffer(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.data() + r * d;
      const T* yr = y.data() + r * d;
      T mg{0}, mgy{0};
      for (std::size_t j = 0; j < d; ++j) {
        mg += gr[j];
        mgy += gr[j] * yr[j];
      }
      mg /= static_cast<T>(d);
      mgy /= static_cast<T>(d);
      T* out = ga.data() + r * d;
      const T is = (*inv_std)[r];
      for (std::size_t j = 0; j < d; ++j) out[j] += is * (gr[j] - mg - yr[j] * mgy);
    }
  });
}

template <class T>
Var<T> softmax_lastdim(Var<T> a) {
  const Tensor<T>& av = a.value();
  const std::size_t d = av.shape().back();
  const std::size_t rows = av.size() / d;
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * d;
    T* y = out.data() + r * d;
    T mx = *std::max_element(x, x + d);
    T z{0};
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  const std::size_t ia = a.id;
  return a.tape->record("softmax", std::move(out), {ia}, [ia, d, rows](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad_buffer(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.data() + r * d;
      const T* yr = y.data() + r * d;
      T dot{0};
      for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
      T* o = ga.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) o[j] += yr[j] * (gr[j] - dot);
    }
  });
}

}  // namespace sfdit
