#pragma once

#include <memory>

#include "fsseg/nd/ops.hpp"
#include "fsseg/nd/rng.hpp"
#include "fsseg/nd/tensor.hpp"

// Selective state-space scan. The core recurrence, per batch b and channel d,
// with hidden state h of width S:
//
//   h_t = abar_t * h_{t-1} + bx_t          (elementwise over S, h_{-1} = 0)
//   y_t = <c_t, h_t> + dgain * x_t
//
// abar, bx and c are data-dependent (computed from the input sequence), which
// is what makes the scan selective. Work and memory are O(B*T*D*S); there is
// no attention-style T^2 term.
namespace fsseg::nd {

// Recurrence primitive with a hand-derived backward pass (backprop through
// time, iterating t from T-1 down to 0).
//   abar, bx: [B,T,D,S]   cseq: [B,T,S]   dgain: [D]   x: [B,T,D]  ->  [B,T,D]
template <typename T>
Tensor<T> ssm_recurrence(const Tensor<T>& abar, const Tensor<T>& bx, const Tensor<T>& cseq,
                         const Tensor<T>& dgain, const Tensor<T>& x) {
  const Shape& s = abar.shape();
  if (s.size() != 4) throw ShapeMismatch("ssm_recurrence: abar must be [B,T,D,S]");
  int64_t B = s[0], Tn = s[1], D = s[2], S = s[3];
  if (bx.shape() != s) throw ShapeMismatch("ssm_recurrence: bx vs abar");
  if (cseq.shape() != Shape{B, Tn, S}) throw ShapeMismatch("ssm_recurrence: cseq");
  if (dgain.shape() != Shape{D}) throw ShapeMismatch("ssm_recurrence: dgain");
  if (x.shape() != Shape{B, Tn, D}) throw ShapeMismatch("ssm_recurrence: x");

  auto h = std::make_shared<std::vector<T>>(B * Tn * D * S);
  std::vector<T> y(B * Tn * D);
  const T* ap = abar.values().data();
  const T* bp = bx.values().data();
  const T* cp = cseq.values().data();
  const T* dp = dgain.values().data();
  const T* xp = x.values().data();
  T* hp = h->data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < Tn; ++t)
      for (int64_t d = 0; d < D; ++d) {
        int64_t o = ((b * Tn + t) * D + d) * S;
        int64_t oprev = o - D * S;
        const T* ct = cp + (b * Tn + t) * S;
        T acc = 0;
        for (int64_t k = 0; k < S; ++k) {
          T prev = t > 0 ? hp[oprev + k] : T(0);
          T hv = ap[o + k] * prev + bp[o + k];
          hp[o + k] = hv;
          acc += ct[k] * hv;
        }
        y[(b * Tn + t) * D + d] = acc + dp[d] * xp[(b * Tn + t) * D + d];
      }

  auto an = abar.node;
  auto bn = bx.node;
  auto cn = cseq.node;
  auto dn = dgain.node;
  auto xn = x.node;
  bool need_a = abar.requires_grad(), need_b = bx.requires_grad(),
       need_c = cseq.requires_grad(), need_d = dgain.requires_grad(),
       need_x = x.requires_grad();
  return detail::make_result<T>(
      {B, Tn, D}, std::move(y), "ssm_recurrence", {abar, bx, cseq, dgain, x},
      [an, bn, cn, dn, xn, h, B, Tn, D, S, need_a, need_b, need_c, need_d,
       need_x](Node<T>& self) {
        if (need_a) an->ensure_grad();
        if (need_b) bn->ensure_grad();
        if (need_c) cn->ensure_grad();
        if (need_d) dn->ensure_grad();
        if (need_x) xn->ensure_grad();
        const T* hp = h->data();
        std::vector<T> gh(S);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t d = 0; d < D; ++d) {
            std::fill(gh.begin(), gh.end(), T(0));
            for (int64_t t = Tn - 1; t >= 0; --t) {
              int64_t yo = (b * Tn + t) * D + d;
              int64_t o = yo * S;
              int64_t co = (b * Tn + t) * S;
              T gy = self.grad[yo];
              if (need_d) dn->grad[d] += gy * xn->value[yo];
              if (need_x) xn->grad[yo] += gy * dn->value[d];
              for (int64_t k = 0; k < S; ++k) {
                // y_t depends on h_t directly; h_{t+1} contribution is
                // already accumulated in gh from the previous iteration.
                T ghk = gh[k] + gy * cn->value[co + k];
                if (need_c) cn->grad[co + k] += gy * hp[o + k];
                T hprev = t > 0 ? hp[o - D * S + k] : T(0);
                if (need_a) an->grad[o + k] += ghk * hprev;
                if (need_b) bn->grad[o + k] += ghk;
                gh[k] = ghk * an->value[o + k];
              }
            }
          }
      });
}

// Learnable parameters of one scan direction. S is the per-channel state
// width; D is the feature width of the sequence.
template <typename T>
struct SsmParams {
  Tensor<T> w_delta;  // [D,D]  step-size projection
  Tensor<T> b_delta;  // [D]
  Tensor<T> w_b;      // [D,S]  input -> B_t
  Tensor<T> w_c;      // [D,S]  input -> C_t
  Tensor<T> a;        // [D,S]  continuous-time decay, initialised negative
  Tensor<T> d;        // [D]    skip gain
};

template <typename T>
SsmParams<T> make_ssm_params(Rng& rng, int64_t dim, int64_t state) {
  auto randn = [&](Shape shape, T stddev) {
    std::vector<T> v(numel(shape));
    for (auto& e : v) e = T(rng.trunc_normal(stddev));
    auto t = Tensor<T>::from_data(std::move(shape), std::move(v));
    t.set_requires_grad(true);
    return t;
  };
  SsmParams<T> p;
  p.w_delta = randn({dim, dim}, T(0.05));
  p.b_delta = randn({dim}, T(0.05));
  p.w_b = randn({dim, state}, T(0.1));
  p.w_c = randn({dim, state}, T(0.1));
  p.a = Tensor<T>::full({dim, state}, T(-1));
  p.a.set_requires_grad(true);
  p.d = Tensor<T>::full({dim}, T(1));
  p.d.set_requires_grad(true);
  return p;
}

// One direction of the selective scan over x: [B,T,D].
//   delta_t = softplus(x_t W_delta + b_delta)        (per-channel step size)
//   abar    = exp(delta * a)                          (decay per step)
//   bx      = (delta * x) outer B_t,  B_t = x_t W_b
//   c_t     = x_t W_c
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const SsmParams<T>& p) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeMismatch("selective_scan: x must be [B,T,D]");
  int64_t B = s[0], Tn = s[1], D = s[2];
  int64_t S = p.w_b.shape()[1];
  Tensor<T> flat = reshape(x, {B * Tn, D});
  Tensor<T> delta = softplus(add(matmul(flat, p.w_delta), reshape(p.b_delta, {1, D})));
  Tensor<T> bt = matmul(flat, p.w_b);  // [B*T, S]
  Tensor<T> ct = matmul(flat, p.w_c);  // [B*T, S]
  Tensor<T> abar =
      exp_(mul(reshape(delta, {B, Tn, D, 1}), reshape(p.a, {1, 1, D, S})));
  Tensor<T> dx = mul(delta, flat);  // [B*T, D]
  Tensor<T> bx = mul(reshape(dx, {B, Tn, D, 1}), reshape(bt, {B, Tn, 1, S}));
  return ssm_recurrence(abar, bx, reshape(ct, {B, Tn, S}), p.d, x);
}

// Bidirectional scan: average of a forward pass and a reversed pass that
// shares the same parameters. Flipping the sequence, scanning, and flipping
// back gives every position context from both sides.
template <typename T>
Tensor<T> vss_scan(const Tensor<T>& x, const SsmParams<T>& p) {
  Tensor<T> fwd = selective_scan(x, p);
  Tensor<T> rev = flip(selective_scan(flip(x, 1), p), 1);
  return scale(add(fwd, rev), T(0.5));
}

}  // namespace fsseg::nd
