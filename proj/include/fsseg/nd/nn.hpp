#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fsseg/nd/ops.hpp"
#include "fsseg/nd/rng.hpp"
#include "fsseg/nd/tensor.hpp"

// Small neural-net building blocks on top of the tensor ops: parameter
// registry, linear/attention/transformer layers, positional codes.
namespace fsseg::nd {

// Ordered name -> tensor registry. Insertion order is the canonical order for
// optimiser state and checkpoints, so construction must be deterministic.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  Tensor<T>* find(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return &t;
    return nullptr;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(items_.size());
    for (const auto& [n, t] : items_) out.push_back(t);
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [n, t] : items_) t.zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& [n, t] : items_) t.set_requires_grad(on);
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
};

// value-only snapshots, for checkpoint-on-abort and bitwise comparisons
template <typename T>
std::vector<std::vector<T>> snapshot_values(const ParamStore<T>& ps) {
  std::vector<std::vector<T>> out;
  out.reserve(ps.items().size());
  for (const auto& [name, t] : ps.items())
    out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

template <typename T>
void restore_values(ParamStore<T>& ps, const std::vector<std::vector<T>>& snap) {
  if (snap.size() != ps.items().size()) throw ShapeMismatch("restore_values: count mismatch");
  size_t i = 0;
  for (auto& [name, t] : ps.items()) {
    if (snap[i].size() != t.node->value.size())
      throw ShapeMismatch("restore_values: size mismatch at " + name);
    std::copy(snap[i].begin(), snap[i].end(), t.node->value.begin());
    ++i;
  }
}

template <typename T>
Tensor<T> trunc_normal_tensor(Rng& rng, Shape shape, T stddev) {
  std::vector<T> v(numel(shape));
  for (auto& e : v) e = T(rng.trunc_normal(stddev));
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

// fan-in scaled init for linear / conv weights
template <typename T>
Tensor<T> fanin_normal_tensor(Rng& rng, Shape shape, int64_t fan_in) {
  return trunc_normal_tensor<T>(rng, std::move(shape), T(std::sqrt(2.0 / double(fan_in))));
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <typename T>
struct LinearParams {
  Tensor<T> w;  // [in,out]
  Tensor<T> b;  // [out]
};

template <typename T>
LinearParams<T> make_linear(ParamStore<T>& ps, const std::string& name, Rng& rng, int64_t in,
                            int64_t out, bool bias = true) {
  LinearParams<T> p;
  p.w = ps.add(name + ".w", fanin_normal_tensor<T>(rng, {in, out}, in));
  if (bias) p.b = ps.add(name + ".b", Tensor<T>::zeros({out}));
  return p;
}

// x: [N,in] -> [N,out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
  int64_t out = p.w.shape()[1];
  Tensor<T> y = matmul(x, p.w);
  if (p.b.defined()) y = add(y, reshape(p.b, {1, out}));
  return y;
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
};

template <typename T>
LayerNormParams<T> make_layer_norm(ParamStore<T>& ps, const std::string& name, int64_t dim) {
  LayerNormParams<T> p;
  p.gamma = ps.add(name + ".gamma", Tensor<T>::full({dim}, T(1)));
  p.beta = ps.add(name + ".beta", Tensor<T>::zeros({dim}));
  return p;
}

template <typename T>
Tensor<T> apply_layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gamma, p.beta);
}

template <typename T>
struct MhaParams {
  LinearParams<T> q, k, v, o;
  int64_t heads = 1;
};

template <typename T>
MhaParams<T> make_mha(ParamStore<T>& ps, const std::string& name, Rng& rng, int64_t dim,
                      int64_t heads) {
  MhaParams<T> p;
  p.q = make_linear(ps, name + ".q", rng, dim, dim);
  // no key bias: softmax is invariant to a per-row constant, so a key bias
  // would be an untrainable parameter
  p.k = make_linear(ps, name + ".k", rng, dim, dim, false);
  p.v = make_linear(ps, name + ".v", rng, dim, dim);
  p.o = make_linear(ps, name + ".o", rng, dim, dim);
  p.heads = heads;
  return p;
}

// Multi-head attention with separate query / key / value sources, each
// [N*,C]. k_in and v_in must share their token count. The split lets callers
// add position codes to queries and keys without perturbing the values.
template <typename T>
Tensor<T> mha(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
              const MhaParams<T>& p) {
  int64_t Nq = q_in.shape()[0], Nk = k_in.shape()[0];
  if (v_in.shape()[0] != Nk) throw ShapeMismatch("mha: key/value token counts differ");
  int64_t C = q_in.shape()[1];
  int64_t h = p.heads, hd = C / h;
  if (h * hd != C) throw ShapeMismatch("mha: dim not divisible by heads");
  auto split = [&](const Tensor<T>& t, int64_t n) {
    return transpose(reshape(t, {n, h, hd}), {1, 0, 2});  // [h,n,hd]
  };
  Tensor<T> q = split(linear(q_in, p.q), Nq);
  Tensor<T> k = split(linear(k_in, p.k), Nk);
  Tensor<T> v = split(linear(v_in, p.v), Nk);
  Tensor<T> scores = scale(matmul(q, transpose(k, {0, 2, 1})), T(1.0 / std::sqrt(double(hd))));
  Tensor<T> att = softmax_lastdim(scores);              // [h,Nq,Nk]
  Tensor<T> ctx = matmul(att, v);                       // [h,Nq,hd]
  Tensor<T> merged = reshape(transpose(ctx, {1, 0, 2}), {Nq, C});
  return linear(merged, p.o);
}

// keys and values from the same source; self-attention is mha(x, x, p)
template <typename T>
Tensor<T> mha(const Tensor<T>& q_in, const Tensor<T>& kv_in, const MhaParams<T>& p) {
  return mha(q_in, kv_in, kv_in, p);
}

template <typename T>
struct MlpParams {
  LinearParams<T> fc1, fc2;
};

template <typename T>
MlpParams<T> make_mlp(ParamStore<T>& ps, const std::string& name, Rng& rng, int64_t dim,
                      int64_t hidden) {
  MlpParams<T> p;
  p.fc1 = make_linear(ps, name + ".fc1", rng, dim, hidden);
  p.fc2 = make_linear(ps, name + ".fc2", rng, hidden, dim);
  return p;
}

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpParams<T>& p) {
  return linear(gelu(linear(x, p.fc1)), p.fc2);
}

// Pre-norm transformer block: x += attn(ln(x)); x += mlp(ln(x)).
template <typename T>
struct TransformerBlockParams {
  LayerNormParams<T> ln1, ln2;
  MhaParams<T> attn;
  MlpParams<T> ffn;
};

template <typename T>
TransformerBlockParams<T> make_transformer_block(ParamStore<T>& ps, const std::string& name,
                                                 Rng& rng, int64_t dim, int64_t heads,
                                                 int64_t ffn_hidden) {
  TransformerBlockParams<T> p;
  p.ln1 = make_layer_norm(ps, name + ".ln1", dim);
  p.attn = make_mha(ps, name + ".attn", rng, dim, heads);
  p.ln2 = make_layer_norm(ps, name + ".ln2", dim);
  p.ffn = make_mlp(ps, name + ".ffn", rng, dim, ffn_hidden);
  return p;
}

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerBlockParams<T>& p) {
  Tensor<T> h = add(x, mha(apply_layer_norm(x, p.ln1), apply_layer_norm(x, p.ln1), p.attn));
  return add(h, mlp(apply_layer_norm(h, p.ln2), p.ffn));
}

// Fixed 2-d sinusoidal position codes for a gh x gw token grid, [gh*gw, dim].
// First half of the channels encodes the row, second half the column, each as
// interleaved sin/cos at geometrically spaced frequencies.
template <typename T>
Tensor<T> sincos_position_codes(int64_t gh, int64_t gw, int64_t dim, T amplitude) {
  std::vector<T> v(gh * gw * dim, T(0));
  int64_t half = dim / 2;
  auto fill_axis = [&](int64_t offset, int64_t span, auto coord) {
    int64_t pairs = span / 2;
    for (int64_t y = 0; y < gh; ++y)
      for (int64_t x = 0; x < gw; ++x) {
        double pos = double(coord(y, x));
        T* row = v.data() + (y * gw + x) * dim + offset;
        for (int64_t i = 0; i < pairs; ++i) {
          double freq = std::pow(10000.0, -double(i) / double(std::max<int64_t>(pairs, 1)));
          row[2 * i] = amplitude * T(std::sin(pos * freq));
          row[2 * i + 1] = amplitude * T(std::cos(pos * freq));
        }
      }
  };
  fill_axis(0, half, [](int64_t y, int64_t) { return y; });
  fill_axis(half, dim - half, [](int64_t, int64_t x) { return x; });
  return Tensor<T>::from_data({gh * gw, dim}, std::move(v));
}

}  // namespace fsseg::nd
