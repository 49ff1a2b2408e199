#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <vector>

#include "fsseg/nd/tensor.hpp"

// Dense N-d operations with reverse-mode gradients. Shapes are row-major;
// elementwise binaries broadcast NumPy-style (equal rank, axis sizes equal or
// 1; a size-1 tensor acts as a scalar against anything). Every op validates
// its output for NaN/Inf and throws NonFinite instead of propagating.
namespace fsseg::nd {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  check_finite<T>(n->value, op);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  if (rg) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node);
    n->backward_fn = std::move(bw);
  }
  return Tensor<T>(std::move(n));
}

struct BroadcastPlan {
  Shape out_shape;
  std::vector<int64_t> stride_a, stride_b;  // 0 on broadcast axes
  bool trivial = false;                     // identical shapes
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan p;
  if (a == b) {
    p.out_shape = a;
    p.trivial = true;
    return p;
  }
  // A total size-1 operand broadcasts against anything.
  if (numel(a) == 1) {
    p.out_shape = b;
    p.stride_a.assign(b.size(), 0);
    p.stride_b = strides_of(b);
    return p;
  }
  if (numel(b) == 1) {
    p.out_shape = a;
    p.stride_a = strides_of(a);
    p.stride_b.assign(a.size(), 0);
    return p;
  }
  if (a.size() != b.size())
    throw ShapeMismatch(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " +
                        shape_str(b));
  Shape out(a.size());
  Shape sa = strides_of(a), sb = strides_of(b);
  p.stride_a.resize(a.size());
  p.stride_b.resize(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) {
      out[i] = a[i];
      p.stride_a[i] = sa[i];
      p.stride_b[i] = sb[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
      p.stride_a[i] = 0;
      p.stride_b[i] = sb[i];
    } else if (b[i] == 1) {
      out[i] = a[i];
      p.stride_a[i] = sa[i];
      p.stride_b[i] = 0;
    } else {
      throw ShapeMismatch(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
    }
  }
  p.out_shape = std::move(out);
  return p;
}

// Visit every output element of a broadcast op with the two input offsets.
template <typename F>
void for_broadcast(const BroadcastPlan& p, F f) {
  int64_t n = numel(p.out_shape);
  size_t rank = p.out_shape.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(rank, 0);
  int64_t offa = 0, offb = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, offa, offb);
    for (int ax = static_cast<int>(rank) - 1; ax >= 0; --ax) {
      idx[ax]++;
      offa += p.stride_a[ax];
      offb += p.stride_b[ax];
      if (idx[ax] < p.out_shape[ax]) break;
      offa -= p.stride_a[ax] * p.out_shape[ax];
      offb -= p.stride_b[ax] * p.out_shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

// f: value map; df(x, y): local derivative given input x and output y.
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, F f, DF df) {
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (int64_t i = 0; i < x.size(); ++i) out[i] = f(xv[i]);
  auto xn = x.node;
  return detail::make_result<T>(
      x.shape(), std::move(out), name, {x}, [xn, df](Node<T>& self) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i)
          xn->grad[i] += self.grad[i] * df(xn->value[i], self.value[i]);
      });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary_op(x, "neg", [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> sin_(const Tensor<T>& x) {
  return unary_op(x, "sin", [](T v) { return std::sin(v); },
                  [](T xv, T) { return std::cos(xv); });
}

template <typename T>
Tensor<T> cos_(const Tensor<T>& x) {
  return unary_op(x, "cos", [](T v) { return std::cos(v); },
                  [](T xv, T) { return -std::sin(xv); });
}

template <typename T>
Tensor<T> exp_(const Tensor<T>& x) {
  return unary_op(x, "exp", [](T v) { return std::exp(v); }, [](T, T yv) { return yv; });
}

template <typename T>
Tensor<T> log_(const Tensor<T>& x) {
  return unary_op(x, "log", [](T v) { return std::log(v); },
                  [](T xv, T) { return T(1) / xv; });
}

template <typename T>
Tensor<T> sqrt_(const Tensor<T>& x) {
  return unary_op(x, "sqrt", [](T v) { return std::sqrt(v); },
                  [](T, T yv) { return T(0.5) / yv; });
}

template <typename T>
Tensor<T> rsqrt(const Tensor<T>& x) {
  return unary_op(x, "rsqrt", [](T v) { return T(1) / std::sqrt(v); },
                  [](T xv, T yv) { return T(-0.5) * yv / xv; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op(
      x, "sigmoid",
      [](T v) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                         : std::exp(v) / (T(1) + std::exp(v));
      },
      [](T, T yv) { return yv * (T(1) - yv); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary_op(
      x, "softplus",
      [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T xv, T) {
        return xv >= T(0) ? T(1) / (T(1) + std::exp(-xv))
                          : std::exp(xv) / (T(1) + std::exp(xv));
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_op(
      x, "gelu",
      [=](T v) { return T(0.5) * v * (T(1) + T(std::erf(double(v) * kInvSqrt2))); },
      [=](T xv, T) {
        double cdf = 0.5 * (1.0 + std::erf(double(xv) * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(xv) * double(xv));
        return T(cdf + double(xv) * pdf);
      });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return unary_op(
      x, "clamp", [=](T v) { return std::min(std::max(v, lo), hi); },
      [=](T xv, T) { return (xv > lo && xv < hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T k) {
  return unary_op(x, "scale", [=](T v) { return k * v; }, [=](T, T) { return k; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T k) {
  return unary_op(x, "add_scalar", [=](T v) { return v + k; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// elementwise binary with broadcasting
// ---------------------------------------------------------------------------

// fwd(a, b) -> out value; dfa/dfb give d out / d a and d out / d b.
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F fwd, DA dfa,
                    DB dfb) {
  auto plan = detail::plan_broadcast(a.shape(), b.shape(), name);
  std::vector<T> out(numel(plan.out_shape));
  auto av = a.values(), bv = b.values();
  if (plan.trivial) {
    for (int64_t i = 0; i < static_cast<int64_t>(out.size()); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    detail::for_broadcast(plan, [&](int64_t i, int64_t oa, int64_t ob) {
      out[i] = fwd(av[oa], bv[ob]);
    });
  }
  auto an = a.node;
  auto bn = b.node;
  bool need_a = a.requires_grad(), need_b = b.requires_grad();
  return detail::make_result<T>(
      plan.out_shape, std::move(out), name, {a, b},
      [an, bn, plan, dfa, dfb, need_a, need_b](Node<T>& self) {
        if (need_a) an->ensure_grad();
        if (need_b) bn->ensure_grad();
        if (plan.trivial) {
          for (size_t i = 0; i < self.value.size(); ++i) {
            if (need_a) an->grad[i] += self.grad[i] * dfa(an->value[i], bn->value[i]);
            if (need_b) bn->grad[i] += self.grad[i] * dfb(an->value[i], bn->value[i]);
          }
        } else {
          detail::for_broadcast(plan, [&](int64_t i, int64_t oa, int64_t ob) {
            if (need_a) an->grad[oa] += self.grad[i] * dfa(an->value[oa], bn->value[ob]);
            if (need_b) bn->grad[ob] += self.grad[i] * dfb(an->value[oa], bn->value[ob]);
          });
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                   [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                   [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                   [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "div", [](T x, T y) { return x / y; },
                   [](T, T y) { return T(1) / y; },
                   [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// movement
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeMismatch("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  auto xn = x.node;
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {x},
                                [xn](Node<T>& self) {
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < self.value.size(); ++i)
                                    xn->grad[i] += self.grad[i];
                                });
}

namespace detail {
// out[i] = in[perm_offset(i)] for permutation perm; returns in-offsets for
// each linear out index via strides trick.
template <typename T>
std::vector<T> permute_values(std::span<const T> in, const Shape& in_shape,
                              const std::vector<int>& perm, Shape& out_shape) {
  size_t rank = in_shape.size();
  out_shape.resize(rank);
  Shape in_strides = strides_of(in_shape);
  std::vector<int64_t> out_stride_in(rank);  // stride in input for each out axis
  for (size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
    out_stride_in[i] = in_strides[static_cast<size_t>(perm[i])];
  }
  std::vector<T> out(in.size());
  if (rank == 0) {
    out[0] = in[0];
    return out;
  }
  std::vector<int64_t> idx(rank, 0);
  int64_t off = 0;
  for (int64_t i = 0; i < static_cast<int64_t>(in.size()); ++i) {
    out[i] = in[off];
    for (int ax = static_cast<int>(rank) - 1; ax >= 0; --ax) {
      idx[ax]++;
      off += out_stride_in[ax];
      if (idx[ax] < out_shape[ax]) break;
      off -= out_stride_in[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  return out;
}
}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::vector<int> perm) {
  if (perm.size() != x.shape().size()) throw ShapeMismatch("transpose: bad permutation");
  Shape out_shape;
  std::vector<T> out = detail::permute_values<T>(x.values(), x.shape(), perm, out_shape);
  std::vector<int> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
  auto xn = x.node;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), "transpose", {x}, [xn, inv](Node<T>& self) {
        xn->ensure_grad();
        Shape back_shape;
        std::vector<T> g =
            detail::permute_values<T>(std::span<const T>(self.grad), self.shape, inv, back_shape);
        for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
      });
}

// 2-d matrix transpose shorthand.
template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  return transpose(x, {1, 0});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeMismatch("concat: empty input list");
  Shape out_shape = xs[0].shape();
  size_t ax = static_cast<size_t>(axis);
  int64_t total = 0;
  for (const auto& x : xs) {
    if (x.shape().size() != out_shape.size()) throw ShapeMismatch("concat: rank mismatch");
    for (size_t i = 0; i < out_shape.size(); ++i)
      if (i != ax && x.shape()[i] != out_shape[i])
        throw ShapeMismatch("concat: " + shape_str(x.shape()) + " vs " + shape_str(out_shape));
    total += x.shape()[ax];
  }
  out_shape[ax] = total;

  // outer => product of dims before axis; inner => product after.
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];

  std::vector<T> out(numel(out_shape));
  int64_t row = total * inner;
  int64_t col0 = 0;
  std::vector<int64_t> offsets;
  for (const auto& x : xs) {
    offsets.push_back(col0);
    int64_t w = x.shape()[ax] * inner;
    auto xv = x.values();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(xv.begin() + o * w, xv.begin() + (o + 1) * w, out.begin() + o * row + col0);
    col0 += w;
  }

  std::vector<std::shared_ptr<Node<T>>> pnodes;
  bool rg = false;
  for (const auto& x : xs) {
    pnodes.push_back(x.node);
    rg = rg || x.requires_grad();
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = out_shape;
  n->value = std::move(out);
  n->op = "concat";
  check_finite<T>(n->value, "concat");
  if (rg) {
    n->requires_grad = true;
    n->parents = pnodes;
    n->backward_fn = [pnodes, offsets, outer, inner, row, ax](Node<T>& self) {
      for (size_t k = 0; k < pnodes.size(); ++k) {
        auto& p = pnodes[k];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        int64_t w = p->shape[ax] * inner;
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < w; ++j)
            p->grad[o * w + j] += self.grad[o * row + offsets[k] + j];
      }
    };
  }
  return Tensor<T>(std::move(n));
}

// Stack along a new leading axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& xs) {
  std::vector<Tensor<T>> expanded;
  expanded.reserve(xs.size());
  for (const auto& x : xs) {
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    expanded.push_back(reshape(x, s));
  }
  return concat(expanded, 0);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, const Shape& starts, const Shape& sizes) {
  size_t rank = x.shape().size();
  if (starts.size() != rank || sizes.size() != rank) throw ShapeMismatch("slice: rank mismatch");
  for (size_t i = 0; i < rank; ++i)
    if (starts[i] < 0 || starts[i] + sizes[i] > x.shape()[i])
      throw ShapeMismatch("slice: out of range on axis " + std::to_string(i));
  Shape out_shape = sizes;
  Shape in_strides = strides_of(x.shape());
  std::vector<T> out(numel(out_shape));
  auto xv = x.values();

  std::vector<int64_t> idx(rank, 0);
  int64_t base = 0;
  for (size_t i = 0; i < rank; ++i) base += starts[i] * in_strides[i];
  std::vector<int64_t> in_offsets(out.size());
  int64_t off = base;
  for (int64_t i = 0; i < static_cast<int64_t>(out.size()); ++i) {
    out[i] = xv[off];
    in_offsets[i] = off;
    for (int ax = static_cast<int>(rank) - 1; ax >= 0; --ax) {
      idx[ax]++;
      off += in_strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      off -= in_strides[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  auto xn = x.node;
  return detail::make_result<T>(std::move(out_shape), std::move(out), "slice", {x},
                                [xn, in_offsets](Node<T>& self) {
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < self.value.size(); ++i)
                                    xn->grad[in_offsets[i]] += self.grad[i];
                                });
}

// Zero padding; pads[i] = {before, after} per axis.
template <typename T>
Tensor<T> pad_zero(const Tensor<T>& x, const std::vector<std::pair<int64_t, int64_t>>& pads) {
  size_t rank = x.shape().size();
  if (pads.size() != rank) throw ShapeMismatch("pad_zero: rank mismatch");
  Shape out_shape(rank);
  Shape starts(rank);
  for (size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.shape()[i] + pads[i].first + pads[i].second;
    starts[i] = pads[i].first;
  }
  Shape out_strides = strides_of(out_shape);
  std::vector<T> out(numel(out_shape), T(0));
  auto xv = x.values();
  std::vector<int64_t> idx(rank, 0);
  int64_t base = 0;
  for (size_t i = 0; i < rank; ++i) base += starts[i] * out_strides[i];
  std::vector<int64_t> out_offsets(xv.size());
  int64_t off = base;
  const Shape& in_shape = x.shape();
  for (int64_t i = 0; i < static_cast<int64_t>(xv.size()); ++i) {
    out[off] = xv[i];
    out_offsets[i] = off;
    for (int ax = static_cast<int>(rank) - 1; ax >= 0; --ax) {
      idx[ax]++;
      off += out_strides[ax];
      if (idx[ax] < in_shape[ax]) break;
      off -= out_strides[ax] * in_shape[ax];
      idx[ax] = 0;
    }
  }
  auto xn = x.node;
  return detail::make_result<T>(std::move(out_shape), std::move(out), "pad_zero", {x},
                                [xn, out_offsets](Node<T>& self) {
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < out_offsets.size(); ++i)
                                    xn->grad[i] += self.grad[out_offsets[i]];
                                });
}

template <typename T>
Tensor<T> flip(const Tensor<T>& x, int axis) {
  size_t rank = x.shape().size();
  size_t ax = static_cast<size_t>(axis);
  int64_t outer = 1, inner = 1, n = x.shape()[ax];
  for (size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (size_t i = ax + 1; i < rank; ++i) inner *= x.shape()[i];
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n; ++j)
      std::copy(xv.begin() + (o * n + j) * inner, xv.begin() + (o * n + j + 1) * inner,
                out.begin() + (o * n + (n - 1 - j)) * inner);
  auto xn = x.node;
  return detail::make_result<T>(x.shape(), std::move(out), "flip", {x},
                                [xn, outer, inner, n](Node<T>& self) {
                                  xn->ensure_grad();
                                  for (int64_t o = 0; o < outer; ++o)
                                    for (int64_t j = 0; j < n; ++j)
                                      for (int64_t k = 0; k < inner; ++k)
                                        xn->grad[(o * n + j) * inner + k] +=
                                            self.grad[(o * n + (n - 1 - j)) * inner + k];
                                });
}

template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.detached_copy();
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  auto xn = x.node;
  return detail::make_result<T>({}, {s}, "sum", {x}, [xn](Node<T>& self) {
    xn->ensure_grad();
    T g = self.grad[0];
    for (auto& gv : xn->grad) gv += g;
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / T(x.size()));
}

template <typename T>
Tensor<T> sum_axes(const Tensor<T>& x, std::vector<int> axes, bool keepdims) {
  size_t rank = x.shape().size();
  std::vector<bool> reduced(rank, false);
  for (int a : axes) reduced[static_cast<size_t>(a)] = true;
  Shape out_shape;
  Shape kept_shape(rank);
  for (size_t i = 0; i < rank; ++i) {
    kept_shape[i] = reduced[i] ? 1 : x.shape()[i];
    if (!reduced[i])
      out_shape.push_back(x.shape()[i]);
    else if (keepdims)
      out_shape.push_back(1);
  }
  Shape kept_strides = strides_of(kept_shape);
  // map each input element to its output offset
  std::vector<T> out(numel(kept_shape), T(0));
  auto xv = x.values();
  std::vector<int64_t> idx(rank, 0);
  int64_t off = 0;
  std::vector<int64_t> stride_for_axis(rank);
  for (size_t i = 0; i < rank; ++i) stride_for_axis[i] = reduced[i] ? 0 : kept_strides[i];
  std::vector<int64_t> out_offsets(xv.size());
  for (int64_t i = 0; i < static_cast<int64_t>(xv.size()); ++i) {
    out[off] += xv[i];
    out_offsets[i] = off;
    for (int ax = static_cast<int>(rank) - 1; ax >= 0; --ax) {
      idx[ax]++;
      off += stride_for_axis[ax];
      if (idx[ax] < x.shape()[ax]) break;
      off -= stride_for_axis[ax] * x.shape()[ax];
      idx[ax] = 0;
    }
  }
  auto xn = x.node;
  return detail::make_result<T>(std::move(out_shape), std::move(out), "sum_axes", {x},
                                [xn, out_offsets](Node<T>& self) {
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < out_offsets.size(); ++i)
                                    xn->grad[i] += self.grad[out_offsets[i]];
                                });
}

template <typename T>
Tensor<T> mean_axes(const Tensor<T>& x, std::vector<int> axes, bool keepdims) {
  int64_t k = 1;
  for (int a : axes) k *= x.shape()[static_cast<size_t>(a)];
  return scale(sum_axes(x, std::move(axes), keepdims), T(1) / T(k));
}

// Row maxima over the last axis, detached from the graph (used for softmax
// shifting; subtracting a constant per row leaves the gradient unchanged).
template <typename T>
Tensor<T> max_lastdim_detached(const Tensor<T>& x) {
  size_t rank = x.shape().size();
  int64_t d = x.shape()[rank - 1];
  int64_t rows = x.size() / d;
  Shape out_shape = x.shape();
  out_shape[rank - 1] = 1;
  std::vector<T> out(rows);
  auto xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    T m = xv[r * d];
    for (int64_t j = 1; j < d; ++j) m = std::max(m, xv[r * d + j]);
    out[r] = m;
  }
  return Tensor<T>::from_data(out_shape, std::move(out));
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// [M,K] x [K,N] -> [M,N], or batched [B,M,K] x [B,K,N] -> [B,M,N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool batched = sa.size() == 3;
  if ((sa.size() != 2 && sa.size() != 3) || sa.size() != sb.size())
    throw ShapeMismatch("matmul: ranks " + shape_str(sa) + " vs " + shape_str(sb));
  int64_t B = batched ? sa[0] : 1;
  int64_t M = sa[batched ? 1 : 0], K = sa[batched ? 2 : 1];
  int64_t K2 = sb[batched ? 1 : 0], N = sb[batched ? 2 : 1];
  if (K != K2 || (batched && sb[0] != B))
    throw ShapeMismatch("matmul: " + shape_str(sa) + " x " + shape_str(sb));
  Shape out_shape = batched ? Shape{B, M, N} : Shape{M, N};
  std::vector<T> out(B * M * N);
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  for (int64_t i = 0; i < B; ++i) {
    CMapMat<T> ma(ap + i * M * K, M, K);
    CMapMat<T> mb(bp + i * K * N, K, N);
    MapMat<T> mo(out.data() + i * M * N, M, N);
    mo.noalias() = ma * mb;
  }
  auto an = a.node;
  auto bn = b.node;
  bool need_a = a.requires_grad(), need_b = b.requires_grad();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), "matmul", {a, b},
      [an, bn, B, M, K, N, need_a, need_b](Node<T>& self) {
        for (int64_t i = 0; i < B; ++i) {
          CMapMat<T> g(self.grad.data() + i * M * N, M, N);
          if (need_a) {
            an->ensure_grad();
            CMapMat<T> mb(bn->value.data() + i * K * N, K, N);
            MapMat<T> ga(an->grad.data() + i * M * K, M, K);
            ga.noalias() += g * mb.transpose();
          }
          if (need_b) {
            bn->ensure_grad();
            CMapMat<T> ma(an->value.data() + i * M * K, M, K);
            MapMat<T> gb(bn->grad.data() + i * K * N, K, N);
            gb.noalias() += ma.transpose() * g;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace detail {
struct ConvDims {
  int64_t N, H, W, Ci, kh, kw, Co, Ho, Wo;
  bool had_batch;
};

inline ConvDims conv_dims(const Shape& xs, const Shape& ws, int64_t stride, int64_t pad,
                          const char* op) {
  ConvDims d;
  d.had_batch = xs.size() == 4;
  if (xs.size() != 3 && xs.size() != 4)
    throw ShapeMismatch(std::string(op) + ": input rank must be 3 or 4, got " + shape_str(xs));
  if (ws.size() != 4) throw ShapeMismatch(std::string(op) + ": weight must be [kh,kw,Ci,Co]");
  d.N = d.had_batch ? xs[0] : 1;
  d.H = xs[d.had_batch ? 1 : 0];
  d.W = xs[d.had_batch ? 2 : 1];
  d.Ci = xs[d.had_batch ? 3 : 2];
  d.kh = ws[0];
  d.kw = ws[1];
  if (ws[2] != d.Ci)
    throw ShapeMismatch(std::string(op) + ": input channels " + std::to_string(d.Ci) +
                        " vs weight " + std::to_string(ws[2]));
  d.Co = ws[3];
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  if (d.Ho <= 0 || d.Wo <= 0) throw ShapeMismatch(std::string(op) + ": output would be empty");
  return d;
}
}  // namespace detail

// NHWC convolution; x [N,H,W,Ci] or [H,W,Ci], w [kh,kw,Ci,Co], optional bias
// [Co]. im2col + GEMM on both passes.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int64_t stride = 1, int64_t pad = 0) {
  auto d = detail::conv_dims(x.shape(), w.shape(), stride, pad, "conv2d");
  const int64_t patch = d.kh * d.kw * d.Ci;
  std::vector<T> out(d.N * d.Ho * d.Wo * d.Co);
  std::vector<T> cols(d.Ho * d.Wo * patch);
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != d.Co) throw ShapeMismatch("conv2d: bias size");

  auto fill_cols = [&](const T* xs) {
    T* cp = cols.data();
    for (int64_t oy = 0; oy < d.Ho; ++oy)
      for (int64_t ox = 0; ox < d.Wo; ++ox) {
        for (int64_t ky = 0; ky < d.kh; ++ky) {
          int64_t iy = oy * stride + ky - pad;
          for (int64_t kx = 0; kx < d.kw; ++kx) {
            int64_t ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W) {
              const T* src = xs + (iy * d.W + ix) * d.Ci;
              std::copy(src, src + d.Ci, cp);
            } else {
              std::fill(cp, cp + d.Ci, T(0));
            }
            cp += d.Ci;
          }
        }
      }
  };

  for (int64_t n = 0; n < d.N; ++n) {
    fill_cols(xp + n * d.H * d.W * d.Ci);
    CMapMat<T> mc(cols.data(), d.Ho * d.Wo, patch);
    CMapMat<T> mw(wp, patch, d.Co);
    MapMat<T> mo(out.data() + n * d.Ho * d.Wo * d.Co, d.Ho * d.Wo, d.Co);
    mo.noalias() = mc * mw;
    if (has_bias) {
      const T* bp = bias.values().data();
      for (int64_t r = 0; r < d.Ho * d.Wo; ++r)
        for (int64_t c = 0; c < d.Co; ++c) out[n * d.Ho * d.Wo * d.Co + r * d.Co + c] += bp[c];
    }
  }

  Shape out_shape = d.had_batch ? Shape{d.N, d.Ho, d.Wo, d.Co} : Shape{d.Ho, d.Wo, d.Co};
  auto xn = x.node;
  auto wn = w.node;
  auto bias_node = has_bias ? bias.node : nullptr;
  bool need_x = x.requires_grad(), need_w = w.requires_grad();
  bool need_b = has_bias && bias.requires_grad();

  std::function<void(Node<T>&)> bw = [xn, wn, bias_node, d, stride, pad, patch, need_x, need_w,
                                      need_b](Node<T>& self) {
    std::vector<T> cols(d.Ho * d.Wo * patch);
    std::vector<T> dcols(d.Ho * d.Wo * patch);
    if (need_x) xn->ensure_grad();
    if (need_w) wn->ensure_grad();
    if (need_b) bias_node->ensure_grad();
    for (int64_t n = 0; n < d.N; ++n) {
      CMapMat<T> g(self.grad.data() + n * d.Ho * d.Wo * d.Co, d.Ho * d.Wo, d.Co);
      if (need_w) {
        // rebuild cols for this sample
        const T* xs = xn->value.data() + n * d.H * d.W * d.Ci;
        T* cp = cols.data();
        for (int64_t oy = 0; oy < d.Ho; ++oy)
          for (int64_t ox = 0; ox < d.Wo; ++ox)
            for (int64_t ky = 0; ky < d.kh; ++ky) {
              int64_t iy = oy * stride + ky - pad;
              for (int64_t kx = 0; kx < d.kw; ++kx) {
                int64_t ix = ox * stride + kx - pad;
                if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W) {
                  const T* src = xs + (iy * d.W + ix) * d.Ci;
                  std::copy(src, src + d.Ci, cp);
                } else {
                  std::fill(cp, cp + d.Ci, T(0));
                }
                cp += d.Ci;
              }
            }
        CMapMat<T> mc(cols.data(), d.Ho * d.Wo, patch);
        MapMat<T> gw(wn->grad.data(), patch, d.Co);
        gw.noalias() += mc.transpose() * g;
      }
      if (need_b) {
        for (int64_t r = 0; r < d.Ho * d.Wo; ++r)
          for (int64_t c = 0; c < d.Co; ++c)
            bias_node->grad[c] += self.grad[(n * d.Ho * d.Wo + r) * d.Co + c];
      }
      if (need_x) {
        CMapMat<T> mw(wn->value.data(), patch, d.Co);
        MapMat<T> dc(dcols.data(), d.Ho * d.Wo, patch);
        dc.noalias() = g * mw.transpose();
        T* gx = xn->grad.data() + n * d.H * d.W * d.Ci;
        const T* cp = dcols.data();
        for (int64_t oy = 0; oy < d.Ho; ++oy)
          for (int64_t ox = 0; ox < d.Wo; ++ox)
            for (int64_t ky = 0; ky < d.kh; ++ky) {
              int64_t iy = oy * stride + ky - pad;
              for (int64_t kx = 0; kx < d.kw; ++kx) {
                int64_t ix = ox * stride + kx - pad;
                if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W) {
                  T* dst = gx + (iy * d.W + ix) * d.Ci;
                  for (int64_t c = 0; c < d.Ci; ++c) dst[c] += cp[c];
                }
                cp += d.Ci;
              }
            }
      }
    }
  };

  if (has_bias)
    return detail::make_result<T>(std::move(out_shape), std::move(out), "conv2d", {x, w, bias},
                                  std::move(bw));
  return detail::make_result<T>(std::move(out_shape), std::move(out), "conv2d", {x, w},
                                std::move(bw));
}

// Transposed NHWC convolution (stride-s upsampling); x [H,W,Ci] or [N,H,W,Ci],
// w [kh,kw,Ci,Co]. Output spatial size (H-1)*stride + kh.
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           int64_t stride) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  bool had_batch = xs.size() == 4;
  if (xs.size() != 3 && xs.size() != 4)
    throw ShapeMismatch("conv2d_transpose: input rank must be 3 or 4");
  if (ws.size() != 4) throw ShapeMismatch("conv2d_transpose: weight must be [kh,kw,Ci,Co]");
  int64_t N = had_batch ? xs[0] : 1;
  int64_t H = xs[had_batch ? 1 : 0], W = xs[had_batch ? 2 : 1], Ci = xs[had_batch ? 3 : 2];
  int64_t kh = ws[0], kw = ws[1], Co = ws[3];
  if (ws[2] != Ci) throw ShapeMismatch("conv2d_transpose: channel mismatch");
  int64_t Ho = (H - 1) * stride + kh, Wo = (W - 1) * stride + kw;
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != Co) throw ShapeMismatch("conv2d_transpose: bias size");

  std::vector<T> out(N * Ho * Wo * Co, T(0));
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  for (int64_t n = 0; n < N; ++n) {
    const T* xsr = xp + n * H * W * Ci;
    T* os = out.data() + n * Ho * Wo * Co;
    for (int64_t iy = 0; iy < H; ++iy)
      for (int64_t ix = 0; ix < W; ++ix)
        for (int64_t ky = 0; ky < kh; ++ky)
          for (int64_t kx = 0; kx < kw; ++kx) {
            int64_t oy = iy * stride + ky, ox = ix * stride + kx;
            T* dst = os + (oy * Wo + ox) * Co;
            const T* src = xsr + (iy * W + ix) * Ci;
            const T* wk = wp + (ky * kw + kx) * Ci * Co;
            for (int64_t ci = 0; ci < Ci; ++ci)
              for (int64_t co = 0; co < Co; ++co) dst[co] += src[ci] * wk[ci * Co + co];
          }
    if (has_bias) {
      const T* bp = bias.values().data();
      for (int64_t p = 0; p < Ho * Wo; ++p)
        for (int64_t co = 0; co < Co; ++co) os[p * Co + co] += bp[co];
    }
  }

  Shape out_shape = had_batch ? Shape{N, Ho, Wo, Co} : Shape{Ho, Wo, Co};
  auto xn = x.node;
  auto wn = w.node;
  auto bias_node = has_bias ? bias.node : nullptr;
  bool need_x = x.requires_grad(), need_w = w.requires_grad();
  bool need_b = has_bias && bias.requires_grad();
  std::function<void(Node<T>&)> bw = [xn, wn, bias_node, N, H, W, Ci, kh, kw, Co, Ho, Wo, stride,
                                      need_x, need_w, need_b](Node<T>& self) {
    if (need_x) xn->ensure_grad();
    if (need_w) wn->ensure_grad();
    if (need_b) bias_node->ensure_grad();
    for (int64_t n = 0; n < N; ++n) {
      const T* g = self.grad.data() + n * Ho * Wo * Co;
      const T* xsr = xn->value.data() + n * H * W * Ci;
      for (int64_t iy = 0; iy < H; ++iy)
        for (int64_t ix = 0; ix < W; ++ix)
          for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t oy = iy * stride + ky, ox = ix * stride + kx;
              const T* gd = g + (oy * Wo + ox) * Co;
              const T* src = xsr + (iy * W + ix) * Ci;
              for (int64_t ci = 0; ci < Ci; ++ci) {
                const T* wk = wn->value.data() + ((ky * kw + kx) * Ci + ci) * Co;
                T acc = 0;
                for (int64_t co = 0; co < Co; ++co) {
                  if (need_w)
                    wn->grad[((ky * kw + kx) * Ci + ci) * Co + co] += src[ci] * gd[co];
                  acc += wk[co] * gd[co];
                }
                if (need_x) xn->grad[n * H * W * Ci + (iy * W + ix) * Ci + ci] += acc;
              }
            }
      if (need_b)
        for (int64_t p = 0; p < Ho * Wo; ++p)
          for (int64_t co = 0; co < Co; ++co) bias_node->grad[co] += g[p * Co + co];
    }
  };
  if (has_bias)
    return detail::make_result<T>(std::move(out_shape), std::move(out), "conv2d_transpose",
                                  {x, w, bias}, std::move(bw));
  return detail::make_result<T>(std::move(out_shape), std::move(out), "conv2d_transpose", {x, w},
                                std::move(bw));
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

// Bilinear resize of an [H,W,C] map to (oh, ow) with half-pixel centers,
// so resizing to the same size is the identity.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int64_t oh, int64_t ow) {
  if (x.shape().size() != 3) throw ShapeMismatch("bilinear_upsample: expected [H,W,C]");
  int64_t H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  struct Tap {
    int64_t i0, i1;
    T w0, w1;
  };
  auto taps = [](int64_t in, int64_t outn) {
    std::vector<Tap> t(outn);
    for (int64_t o = 0; o < outn; ++o) {
      double src = (o + 0.5) * double(in) / double(outn) - 0.5;
      double lo = std::floor(src);
      double frac = src - lo;
      int64_t i0 = std::clamp<int64_t>(static_cast<int64_t>(lo), 0, in - 1);
      int64_t i1 = std::clamp<int64_t>(static_cast<int64_t>(lo) + 1, 0, in - 1);
      t[o] = {i0, i1, T(1.0 - frac), T(frac)};
    }
    return t;
  };
  auto ty = taps(H, oh), tx = taps(W, ow);
  std::vector<T> out(oh * ow * C);
  auto xv = x.values();
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t xcol = 0; xcol < ow; ++xcol) {
      const Tap& a = ty[y];
      const Tap& b = tx[xcol];
      for (int64_t c = 0; c < C; ++c) {
        T v = a.w0 * (b.w0 * xv[(a.i0 * W + b.i0) * C + c] + b.w1 * xv[(a.i0 * W + b.i1) * C + c]) +
              a.w1 * (b.w0 * xv[(a.i1 * W + b.i0) * C + c] + b.w1 * xv[(a.i1 * W + b.i1) * C + c]);
        out[(y * ow + xcol) * C + c] = v;
      }
    }
  auto xn = x.node;
  return detail::make_result<T>(
      {oh, ow, C}, std::move(out), "bilinear_upsample", {x},
      [xn, ty, tx, W, C, ow](Node<T>& self) {
        xn->ensure_grad();
        int64_t oh2 = static_cast<int64_t>(ty.size());
        for (int64_t y = 0; y < oh2; ++y)
          for (int64_t xcol = 0; xcol < ow; ++xcol) {
            const Tap& a = ty[y];
            const Tap& b = tx[xcol];
            for (int64_t c = 0; c < C; ++c) {
              T g = self.grad[(y * ow + xcol) * C + c];
              xn->grad[(a.i0 * W + b.i0) * C + c] += a.w0 * b.w0 * g;
              xn->grad[(a.i0 * W + b.i1) * C + c] += a.w0 * b.w1 * g;
              xn->grad[(a.i1 * W + b.i0) * C + c] += a.w1 * b.w0 * g;
              xn->grad[(a.i1 * W + b.i1) * C + c] += a.w1 * b.w1 * g;
            }
          }
      });
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  Tensor<T> m = max_lastdim_detached(x);
  Tensor<T> e = exp_(sub(x, m));
  Tensor<T> s = sum_axes(e, {static_cast<int>(x.shape().size()) - 1}, true);
  return div(e, s);
}

// Layer norm over the last axis; gamma/beta are 1-d of that size.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  int last = static_cast<int>(x.shape().size()) - 1;
  int64_t dsize = x.shape()[static_cast<size_t>(last)];
  if (gamma.size() != dsize || beta.size() != dsize)
    throw ShapeMismatch("layer_norm: gamma/beta size");
  Shape bshape(x.shape().size(), 1);
  bshape[static_cast<size_t>(last)] = dsize;
  Tensor<T> mu = mean_axes(x, {last}, true);
  Tensor<T> xc = sub(x, mu);
  Tensor<T> var = mean_axes(mul(xc, xc), {last}, true);
  Tensor<T> inv = rsqrt(add_scalar(var, eps));
  return add(mul(mul(xc, inv), reshape(gamma, bshape)), reshape(beta, bshape));
}

// Rows of the trailing axis scaled to unit L2 norm: x / (||x|| + eps).
template <typename T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, T eps) {
  int last = static_cast<int>(x.shape().size()) - 1;
  Tensor<T> n = sqrt_(sum_axes(mul(x, x), {last}, true));
  return div(x, add_scalar(n, eps));
}

// Mean of x over positions where mask == 1; mask matches x's leading axes and
// broadcasts over trailing channel axes. Caller guarantees mask has >= 1
// active cell. x: [..., C], mask: same shape with C axis of size 1.
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, const Tensor<T>& mask) {
  T count = 0;
  for (T v : mask.values()) count += v;
  if (count <= T(0)) throw EmptyMask("masked_mean: empty mask");
  std::vector<int> axes;
  for (size_t i = 0; i + 1 < x.shape().size(); ++i) axes.push_back(static_cast<int>(i));
  Tensor<T> summed = sum_axes(mul(x, mask), axes, false);
  return scale(summed, T(1) / count);
}

}  // namespace fsseg::nd
