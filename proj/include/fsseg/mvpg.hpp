#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fsseg/encoder.hpp"
#include "fsseg/error.hpp"
#include "fsseg/nd/nn.hpp"
#include "fsseg/nd/ops.hpp"
#include "fsseg/nd/scan.hpp"

// Prompt generation from support/query features: a sparse prompt pooled from
// the masked support features, and a dense prior mask produced by refining a
// stack of foreground-minus-background correlation volumes with convolution +
// state-space blocks.
namespace fsseg {

inline constexpr double kCosineEps = 1e-8;

enum class VolumeKind { Fg, Bg, Contrastive, Refined };

inline const char* volume_kind_name(VolumeKind k) {
  switch (k) {
    case VolumeKind::Fg: return "fg";
    case VolumeKind::Bg: return "bg";
    case VolumeKind::Contrastive: return "contrastive";
    default: return "refined";
  }
}

// values: [l, H_q, W_q, H_s, W_s]
template <typename T>
struct CorrelationVolume4D {
  nd::Tensor<T> values;
  VolumeKind kind = VolumeKind::Contrastive;

  void validate() const {
    if (!values.defined() || values.shape().size() != 5)
      throw ShapeMismatch("correlation volume must be rank 5");
    if (kind == VolumeKind::Refined) return;
    const T bound = kind == VolumeKind::Contrastive ? T(2) : T(1);
    for (T v : values.values())
      if (v < -bound - T(1e-6) || v > bound + T(1e-6))
        throw BadFormat(std::string("correlation volume of kind ") + volume_kind_name(kind) +
                        " out of range");
  }
};

// prototype is kept alongside the sine encoding so multi-shot aggregation can
// average before the nonlinearity
template <typename T>
struct SparsePrompt {
  nd::Tensor<T> prototype;  // [1, C_sam]
  nd::Tensor<T> values;     // [1, C_sam], entries in [-1, 1]
};

template <typename T>
struct PriorMask {
  nd::Tensor<T> values;  // [1, H'_q, W'_q], entries in (0, 1)
};

// Nearest-neighbor reduction of a pixel mask to the feature grid: each cell
// takes the pixel at its center, thresholded at 0.5.
template <typename T>
nd::Tensor<T> downsample_mask_nearest(const nd::Tensor<T>& mask, int64_t gh, int64_t gw) {
  if (mask.shape().size() != 2) throw ShapeMismatch("mask must be [H,W]");
  if (gh <= 0 || gw <= 0) throw ShapeMismatch("grid dims must be positive");
  int64_t H = mask.shape()[0], W = mask.shape()[1];
  std::vector<T> out(gh * gw);
  for (int64_t i = 0; i < gh; ++i) {
    int64_t src_i = std::min(H - 1, int64_t((i + 0.5) * double(H) / double(gh)));
    for (int64_t j = 0; j < gw; ++j) {
      int64_t src_j = std::min(W - 1, int64_t((j + 0.5) * double(W) / double(gw)));
      out[i * gw + j] = mask.values()[src_i * W + src_j] > T(0.5) ? T(1) : T(0);
    }
  }
  return nd::Tensor<T>::from_data({gh, gw}, std::move(out));
}

// ---- semantic visual prompt ----

template <typename T>
struct SvpParams {
  nd::Tensor<T> conv1_w, conv1_b;  // [1,1,C,C_sam]
  nd::LayerNormParams<T> ln1;
  nd::Tensor<T> conv2_w, conv2_b;  // [3,3,C_sam,C_sam]
  nd::LayerNormParams<T> ln2;
};

template <typename T>
SvpParams<T> make_svp(nd::ParamStore<T>& ps, const std::string& name, nd::Rng& rng, int64_t C,
                      int64_t C_sam) {
  SvpParams<T> p;
  p.conv1_w = ps.add(name + ".conv1.w", nd::trunc_normal_tensor<T>(rng, {1, 1, C, C_sam}, T(0.02)));
  p.conv1_b = ps.add(name + ".conv1.b", nd::Tensor<T>::zeros({C_sam}));
  p.ln1 = nd::make_layer_norm(ps, name + ".ln1", C_sam);
  p.conv2_w =
      ps.add(name + ".conv2.w", nd::trunc_normal_tensor<T>(rng, {3, 3, C_sam, C_sam}, T(0.02)));
  p.conv2_b = ps.add(name + ".conv2.b", nd::Tensor<T>::zeros({C_sam}));
  p.ln2 = nd::make_layer_norm(ps, name + ".ln2", C_sam);
  return p;
}

// F: [H_s, W_s, C] -> [H_s, W_s, C_sam], a 1x1 then a 3x3 conv, each followed
// by layer norm
template <typename T>
nd::Tensor<T> svp_features(const nd::Tensor<T>& f, const SvpParams<T>& p) {
  nd::Tensor<T> x = nd::conv2d(f, p.conv1_w, p.conv1_b, 1, 0);
  x = nd::apply_layer_norm(x, p.ln1);
  x = nd::conv2d(x, p.conv2_w, p.conv2_b, 1, 1);
  return nd::apply_layer_norm(x, p.ln2);
}

// Masked average pooling over the foreground cells of the projected support
// features, then an elementwise sine.
template <typename T>
SparsePrompt<T> semantic_visual_prompt(const nd::Tensor<T>& f_support_last,
                                       const nd::Tensor<T>& grid_mask, const SvpParams<T>& p) {
  if (f_support_last.shape().size() != 3) throw ShapeMismatch("support features must be [H,W,C]");
  if (grid_mask.shape().size() != 2 || grid_mask.shape()[0] != f_support_last.shape()[0] ||
      grid_mask.shape()[1] != f_support_last.shape()[1])
    throw GridMismatch("mask grid " + nd::shape_str(grid_mask.shape()) + " vs features " +
                       nd::shape_str(f_support_last.shape()));
  nd::Tensor<T> fp = svp_features(f_support_last, p);
  nd::Tensor<T> mask3 =
      nd::reshape(grid_mask, {grid_mask.shape()[0], grid_mask.shape()[1], int64_t(1)});
  nd::Tensor<T> proto = nd::reshape(nd::masked_mean(fp, mask3), {int64_t(1), fp.shape()[2]});
  SparsePrompt<T> out;
  out.prototype = proto;
  out.values = nd::sin_(proto);
  return out;
}

// ---- contrastive correlation volumes ----

// cosine similarity between every query cell and every support cell;
// denominator is |q||s| + eps so an all-zero side gives zero similarity
template <typename T>
nd::Tensor<T> cosine_volume(const nd::Tensor<T>& q, const nd::Tensor<T>& s) {
  if (q.shape().size() != 3 || s.shape().size() != 3 || q.shape()[2] != s.shape()[2])
    throw GridMismatch("cosine_volume: " + nd::shape_str(q.shape()) + " vs " +
                       nd::shape_str(s.shape()));
  int64_t Hq = q.shape()[0], Wq = q.shape()[1], C = q.shape()[2];
  int64_t Hs = s.shape()[0], Ws = s.shape()[1];
  nd::Tensor<T> q2 = nd::reshape(q, {Hq * Wq, C});
  nd::Tensor<T> s2 = nd::reshape(s, {Hs * Ws, C});
  nd::Tensor<T> dots = nd::matmul(q2, nd::transpose2d(s2));
  nd::Tensor<T> nq = nd::sqrt_(nd::sum_axes(nd::mul(q2, q2), {1}, true));  // [HqWq,1]
  nd::Tensor<T> ns = nd::sqrt_(nd::sum_axes(nd::mul(s2, s2), {1}, true));  // [HsWs,1]
  nd::Tensor<T> denom = nd::add_scalar(nd::mul(nq, nd::transpose2d(ns)), T(kCosineEps));
  return nd::reshape(nd::div(dots, denom), {Hq, Wq, Hs, Ws});
}

namespace detail {

template <typename T>
void check_layer_grids(const std::vector<nd::Tensor<T>>& layers, const char* what) {
  for (const auto& t : layers) {
    if (t.shape().size() != 3) throw GridMismatch(std::string(what) + " layer must be [H,W,C]");
    if (t.shape() != layers.front().shape())
      throw GridMismatch(std::string(what) + " layers disagree on grid");
  }
}

}  // namespace detail

// foreground-only volume from a single layer, kept for the dense-prompt
// residual; values [1, H_q, W_q, H_s, W_s]
template <typename T>
CorrelationVolume4D<T> foreground_volume(const nd::Tensor<T>& q, const nd::Tensor<T>& s,
                                         const nd::Tensor<T>& grid_mask) {
  nd::Tensor<T> mask3 =
      nd::reshape(grid_mask, {grid_mask.shape()[0], grid_mask.shape()[1], int64_t(1)});
  nd::Tensor<T> v = cosine_volume(q, nd::mul(s, mask3));
  CorrelationVolume4D<T> out;
  out.kind = VolumeKind::Fg;
  const auto& sh = v.shape();
  out.values = nd::reshape(v, {int64_t(1), sh[0], sh[1], sh[2], sh[3]});
  return out;
}

// per layer in the last l: cos(q, mask*s) - cos(q, (1-mask)*s), stacked along
// a new leading axis
template <typename T>
CorrelationVolume4D<T> contrastive_volume(const std::vector<nd::Tensor<T>>& q_layers,
                                          const std::vector<nd::Tensor<T>>& s_layers,
                                          const nd::Tensor<T>& grid_mask, int64_t l) {
  if (l < 1 || size_t(l) > q_layers.size() || q_layers.size() != s_layers.size())
    throw GridMismatch("contrastive_volume: need 1 <= l <= layer count");
  detail::check_layer_grids(q_layers, "query");
  detail::check_layer_grids(s_layers, "support");
  if (grid_mask.shape().size() != 2 || grid_mask.shape()[0] != s_layers.front().shape()[0] ||
      grid_mask.shape()[1] != s_layers.front().shape()[1])
    throw GridMismatch("mask grid does not match support grid");
  nd::Tensor<T> mask3 =
      nd::reshape(grid_mask, {grid_mask.shape()[0], grid_mask.shape()[1], int64_t(1)});
  nd::Tensor<T> inv3 = nd::add_scalar(nd::neg(mask3), T(1));
  std::vector<nd::Tensor<T>> per_layer;
  for (size_t i = q_layers.size() - size_t(l); i < q_layers.size(); ++i) {
    nd::Tensor<T> fg = cosine_volume(q_layers[i], nd::mul(s_layers[i], mask3));
    nd::Tensor<T> bg = cosine_volume(q_layers[i], nd::mul(s_layers[i], inv3));
    per_layer.push_back(nd::sub(fg, bg));
  }
  CorrelationVolume4D<T> out;
  out.kind = VolumeKind::Contrastive;
  out.values = nd::stack(per_layer);
  return out;
}

inline CorrelationVolume4D<float> contrastive_volume(const FeatureStack& q, const FeatureStack& s,
                                                     const nd::Tensor<float>& grid_mask,
                                                     int64_t l) {
  return contrastive_volume<float>(q.layers, s.layers, grid_mask, l);
}

// foreground similarities only, no background subtraction; the ablated form
// of the volume above, same shape and layer selection
template <typename T>
CorrelationVolume4D<T> foreground_stack(const std::vector<nd::Tensor<T>>& q_layers,
                                        const std::vector<nd::Tensor<T>>& s_layers,
                                        const nd::Tensor<T>& grid_mask, int64_t l) {
  if (l < 1 || size_t(l) > q_layers.size() || q_layers.size() != s_layers.size())
    throw GridMismatch("foreground_stack: need 1 <= l <= layer count");
  detail::check_layer_grids(q_layers, "query");
  detail::check_layer_grids(s_layers, "support");
  if (grid_mask.shape().size() != 2 || grid_mask.shape()[0] != s_layers.front().shape()[0] ||
      grid_mask.shape()[1] != s_layers.front().shape()[1])
    throw GridMismatch("mask grid does not match support grid");
  nd::Tensor<T> mask3 =
      nd::reshape(grid_mask, {grid_mask.shape()[0], grid_mask.shape()[1], int64_t(1)});
  std::vector<nd::Tensor<T>> per_layer;
  for (size_t i = q_layers.size() - size_t(l); i < q_layers.size(); ++i)
    per_layer.push_back(cosine_volume(q_layers[i], nd::mul(s_layers[i], mask3)));
  CorrelationVolume4D<T> out;
  out.kind = VolumeKind::Fg;
  out.values = nd::stack(per_layer);
  return out;
}

// ---- hierarchical global modeling ----

struct HGMBConfig {
  int64_t in_channels = 3;       // layer count l of the incoming volume
  int64_t hidden_channels = 16;  // l'
  int64_t block_q = 4;           // k_q
  int64_t block_s = 4;           // k_s
  int64_t vss_state_dim = 8;
  int64_t num_blocks = 2;

  void validate() const {
    if (in_channels <= 0 || hidden_channels <= 0 || vss_state_dim <= 0 || num_blocks <= 0)
      throw BadConfig("hgmb dimensions must be positive");
    if (block_q <= 0 || block_s <= 0) throw PartitionError("block sizes must be positive");
  }
};

template <typename T>
struct HgmbParams {
  nd::Tensor<T> conv_a_w, conv_a_b;  // 3x3 over the query plane, support as batch
  nd::Tensor<T> conv_b_w, conv_b_b;  // 3x3 over the support plane, query as batch
  nd::SsmParams<T> ssm;              // token width k_s*k_s
};

template <typename T>
HgmbParams<T> make_hgmb(nd::ParamStore<T>& ps, const std::string& name, nd::Rng& rng,
                        const HGMBConfig& cfg, int64_t cin) {
  HgmbParams<T> p;
  int64_t cout = cfg.hidden_channels;
  p.conv_a_w = ps.add(name + ".conv_a.w", nd::trunc_normal_tensor<T>(rng, {3, 3, cin, cout}, T(0.02)));
  p.conv_a_b = ps.add(name + ".conv_a.b", nd::Tensor<T>::zeros({cout}));
  p.conv_b_w = ps.add(name + ".conv_b.w", nd::trunc_normal_tensor<T>(rng, {3, 3, cin, cout}, T(0.02)));
  p.conv_b_b = ps.add(name + ".conv_b.b", nd::Tensor<T>::zeros({cout}));
  int64_t d = cfg.block_s * cfg.block_s;
  p.ssm = nd::make_ssm_params<T>(rng, d, cfg.vss_state_dim);
  ps.add(name + ".ssm.w_delta", p.ssm.w_delta);
  ps.add(name + ".ssm.b_delta", p.ssm.b_delta);
  ps.add(name + ".ssm.w_b", p.ssm.w_b);
  ps.add(name + ".ssm.w_c", p.ssm.w_c);
  ps.add(name + ".ssm.a", p.ssm.a);
  ps.add(name + ".ssm.d", p.ssm.d);
  return p;
}

namespace detail {

inline int64_t pad_to_multiple(int64_t n, int64_t k) { return (k - n % k) % k; }

}  // namespace detail

// number of k_q x k_q x k_s x k_s cells the padded volume partitions into
inline int64_t partition_block_count(int64_t Hq, int64_t Wq, int64_t Hs, int64_t Ws, int64_t kq,
                                     int64_t ks) {
  if (kq <= 0 || ks <= 0) throw PartitionError("block sizes must be positive");
  auto cells = [](int64_t n, int64_t k) { return (n + detail::pad_to_multiple(n, k)) / k; };
  return cells(Hq, kq) * cells(Wq, kq) * cells(Hs, ks) * cells(Ws, ks);
}

// One block: (1) two independent 3x3 convs over the query and support planes
// of the volume, summed; (2) partition into k_q x k_q x k_s x k_s cells,
// flatten each to a (k_q*k_q)-step sequence of (k_s*k_s)-wide tokens, run the
// bidirectional selective scan, reassemble; (3) residual add.
template <typename T>
nd::Tensor<T> hgmb_forward(const nd::Tensor<T>& v, const HGMBConfig& cfg,
                           const HgmbParams<T>& p) {
  cfg.validate();
  if (v.shape().size() != 5) throw ShapeMismatch("hgmb_forward: volume must be rank 5");
  if (v.shape()[0] != p.conv_a_w.shape()[2])
    throw ShapeMismatch("hgmb_forward: channel count " + std::to_string(v.shape()[0]) +
                        " does not match params");
  int64_t Hq = v.shape()[1], Wq = v.shape()[2], Hs = v.shape()[3], Ws = v.shape()[4];
  int64_t co = p.conv_a_w.shape()[3];

  nd::Tensor<T> va = nd::transpose(v, {3, 4, 1, 2, 0});  // [Hs,Ws,Hq,Wq,C]
  va = nd::reshape(va, {Hs * Ws, Hq, Wq, v.shape()[0]});
  va = nd::conv2d(va, p.conv_a_w, p.conv_a_b, 1, 1);
  va = nd::transpose(nd::reshape(va, {Hs, Ws, Hq, Wq, co}), {4, 2, 3, 0, 1});

  nd::Tensor<T> vb = nd::transpose(v, {1, 2, 3, 4, 0});  // [Hq,Wq,Hs,Ws,C]
  vb = nd::reshape(vb, {Hq * Wq, Hs, Ws, v.shape()[0]});
  vb = nd::conv2d(vb, p.conv_b_w, p.conv_b_b, 1, 1);
  vb = nd::transpose(nd::reshape(vb, {Hq, Wq, Hs, Ws, co}), {4, 0, 1, 2, 3});

  nd::Tensor<T> vhat = nd::add(va, vb);  // [co,Hq,Wq,Hs,Ws]

  int64_t kq = cfg.block_q, ks = cfg.block_s;
  int64_t pq1 = detail::pad_to_multiple(Hq, kq), pq2 = detail::pad_to_multiple(Wq, kq);
  int64_t ps1 = detail::pad_to_multiple(Hs, ks), ps2 = detail::pad_to_multiple(Ws, ks);
  nd::Tensor<T> padded =
      nd::pad_zero(vhat, {{0, 0}, {0, pq1}, {0, pq2}, {0, ps1}, {0, ps2}});
  int64_t Hqp = Hq + pq1, Wqp = Wq + pq2, Hsp = Hs + ps1, Wsp = Ws + ps2;
  int64_t nq1 = Hqp / kq, nq2 = Wqp / kq, ns1 = Hsp / ks, ns2 = Wsp / ks;
  int64_t N = nq1 * nq2 * ns1 * ns2;

  nd::Tensor<T> cells = nd::reshape(padded, {co, nq1, kq, nq2, kq, ns1, ks, ns2, ks});
  cells = nd::transpose(cells, {0, 1, 3, 5, 7, 2, 4, 6, 8});
  nd::Tensor<T> seq = nd::reshape(cells, {co * N, kq * kq, ks * ks});
  nd::Tensor<T> scanned = nd::vss_scan(seq, p.ssm);
  scanned = nd::reshape(scanned, {co, nq1, nq2, ns1, ns2, kq, kq, ks, ks});
  scanned = nd::transpose(scanned, {0, 1, 5, 2, 6, 3, 7, 4, 8});
  scanned = nd::reshape(scanned, {co, Hqp, Wqp, Hsp, Wsp});
  scanned = nd::slice(scanned, {0, 0, 0, 0, 0}, {co, Hq, Wq, Hs, Ws});

  return nd::add(vhat, scanned);
}

template <typename T>
struct MhcmParams {
  std::vector<HgmbParams<T>> blocks;
};

template <typename T>
MhcmParams<T> make_mhcm(nd::ParamStore<T>& ps, const std::string& name, nd::Rng& rng,
                        const HGMBConfig& cfg) {
  cfg.validate();
  MhcmParams<T> p;
  for (int64_t i = 0; i < cfg.num_blocks; ++i) {
    int64_t cin = i == 0 ? cfg.in_channels : cfg.hidden_channels;
    p.blocks.push_back(make_hgmb(ps, name + ".hgmb" + std::to_string(i), rng, cfg, cin));
  }
  return p;
}

template <typename T>
CorrelationVolume4D<T> mhcm_forward(const CorrelationVolume4D<T>& v, const HGMBConfig& cfg,
                                    const MhcmParams<T>& p) {
  nd::Tensor<T> x = v.values;
  for (const auto& blk : p.blocks) x = hgmb_forward(x, cfg, blk);
  CorrelationVolume4D<T> out;
  out.kind = VolumeKind::Refined;
  out.values = x;
  return out;
}

// ---- dense prior-mask prompt ----

template <typename T>
struct DensePromptParams {
  nd::Tensor<T> proj_w, proj_b;  // [1,1,l',1]
};

template <typename T>
DensePromptParams<T> make_dense_prompt(nd::ParamStore<T>& ps, const std::string& name,
                                       nd::Rng& rng, int64_t hidden) {
  DensePromptParams<T> p;
  p.proj_w = ps.add(name + ".proj.w", nd::trunc_normal_tensor<T>(rng, {1, 1, hidden, 1}, T(0.02)));
  p.proj_b = ps.add(name + ".proj.b", nd::Tensor<T>::zeros({1}));
  return p;
}

// average both volumes over the support plane, broadcast-sum the single
// foreground channel onto the refined channels, upsample, project to one
// channel, sigmoid
template <typename T>
PriorMask<T> dense_prompt(const nd::Tensor<T>& v_refined, const nd::Tensor<T>& v_fg_last,
                          const DensePromptParams<T>& p, int64_t upsample_factor = 4) {
  if (v_refined.shape().size() != 5 || v_fg_last.shape().size() != 5)
    throw ShapeMismatch("dense_prompt: volumes must be rank 5");
  if (v_fg_last.shape()[0] != 1) throw ShapeMismatch("dense_prompt: fg volume must have 1 channel");
  if (v_refined.shape()[1] != v_fg_last.shape()[1] || v_refined.shape()[2] != v_fg_last.shape()[2])
    throw ShapeMismatch("dense_prompt: query grids disagree");
  if (v_refined.shape()[0] != p.proj_w.shape()[2])
    throw ShapeMismatch("dense_prompt: projection expects " +
                        std::to_string(p.proj_w.shape()[2]) + " channels");
  if (upsample_factor < 1) throw BadConfig("upsample factor must be >= 1");
  nd::Tensor<T> pooled_r = nd::mean_axes(v_refined, {3, 4}, false);  // [l',Hq,Wq]
  nd::Tensor<T> pooled_f = nd::mean_axes(v_fg_last, {3, 4}, false);  // [1,Hq,Wq]
  nd::Tensor<T> v2d = nd::add(pooled_r, pooled_f);
  int64_t Hq = v2d.shape()[1], Wq = v2d.shape()[2];
  nd::Tensor<T> hw =
      nd::bilinear_upsample(nd::transpose(v2d, {1, 2, 0}), Hq * upsample_factor,
                            Wq * upsample_factor);
  nd::Tensor<T> logits = nd::conv2d(hw, p.proj_w, p.proj_b, 1, 0);  // [H',W',1]
  PriorMask<T> out;
  out.values = nd::transpose(nd::sigmoid(logits), {2, 0, 1});
  return out;
}

// ---- k-shot aggregation ----

// prototypes are averaged before the sine re-encoding; volumes elementwise;
// K = 1 returns the inputs unchanged
template <typename T>
std::pair<SparsePrompt<T>, CorrelationVolume4D<T>> kshot_aggregate(
    const std::vector<std::pair<SparsePrompt<T>, CorrelationVolume4D<T>>>& shots) {
  if (shots.empty()) throw ShapeMismatch("kshot_aggregate: no shots");
  for (const auto& [sp, vol] : shots) {
    if (sp.prototype.shape() != shots.front().first.prototype.shape() ||
        vol.values.shape() != shots.front().second.values.shape() ||
        vol.kind != shots.front().second.kind)
      throw ShapeMismatch("kshot_aggregate: shots disagree on shape");
  }
  if (shots.size() == 1) return shots.front();
  const T inv_k = T(1) / T(shots.size());
  nd::Tensor<T> proto = shots.front().first.prototype;
  nd::Tensor<T> vol = shots.front().second.values;
  for (size_t i = 1; i < shots.size(); ++i) {
    proto = nd::add(proto, shots[i].first.prototype);
    vol = nd::add(vol, shots[i].second.values);
  }
  SparsePrompt<T> sp;
  sp.prototype = nd::scale(proto, inv_k);
  sp.values = nd::sin_(sp.prototype);
  CorrelationVolume4D<T> cv;
  cv.kind = shots.front().second.kind;
  cv.values = nd::scale(vol, inv_k);
  return {sp, cv};
}

// ---- bundled module ----

struct MvpgConfig {
  int64_t feature_channels = 64;  // C from the encoder
  int64_t sam_channels = 32;      // C_sam
  int64_t corr_layers = 3;        // l
  HGMBConfig hgmb;
  int64_t upsample_factor = 4;

  // ablation switches: disabling SVP zeroes the sparse prompt, disabling
  // MHCM feeds the raw volume to the dense path, disabling CE drops the
  // background subtraction
  bool use_svp = true;
  bool use_mhcm = true;
  bool use_ce = true;

  // channel count of the volume handed to the dense-prompt projection
  int64_t dense_channels() const { return use_mhcm ? hgmb.hidden_channels : corr_layers; }

  void validate() const {
    if (feature_channels <= 0 || sam_channels <= 0 || corr_layers <= 0 || upsample_factor <= 0)
      throw BadConfig("mvpg dimensions must be positive");
    if (use_mhcm) {
      if (hgmb.in_channels != corr_layers)
        throw BadConfig("hgmb input channels must equal the correlation layer count");
      hgmb.validate();
    }
  }
};

template <typename T>
struct MvpgParams {
  MvpgConfig cfg;
  nd::ParamStore<T> store;
  SvpParams<T> svp;
  MhcmParams<T> mhcm;
  DensePromptParams<T> dense;
};

template <typename T>
MvpgParams<T> make_mvpg(const MvpgConfig& cfg, uint64_t seed) {
  cfg.validate();
  nd::Rng rng(nd::Rng::mix(seed, 0x3B6));
  MvpgParams<T> p;
  p.cfg = cfg;
  if (cfg.use_svp) p.svp = make_svp(p.store, "svp", rng, cfg.feature_channels, cfg.sam_channels);
  if (cfg.use_mhcm) p.mhcm = make_mhcm(p.store, "mhcm", rng, cfg.hgmb);
  p.dense = make_dense_prompt(p.store, "dense", rng, cfg.dense_channels());
  return p;
}

template <typename T>
struct MvpgOutput {
  SparsePrompt<T> sparse;
  PriorMask<T> prior;
  CorrelationVolume4D<T> contrastive;
  CorrelationVolume4D<T> refined;
};

namespace detail {

template <typename T>
SparsePrompt<T> zero_prompt(int64_t channels) {
  SparsePrompt<T> sp;
  sp.prototype = nd::Tensor<T>::zeros({1, channels});
  sp.values = nd::Tensor<T>::zeros({1, channels});
  return sp;
}

}  // namespace detail

// one support shot; grid_mask at the support feature resolution
template <typename T>
MvpgOutput<T> mvpg_forward(const std::vector<nd::Tensor<T>>& q_layers,
                           const std::vector<nd::Tensor<T>>& s_layers,
                           const nd::Tensor<T>& grid_mask, const MvpgParams<T>& p) {
  MvpgOutput<T> out;
  out.sparse = p.cfg.use_svp ? semantic_visual_prompt(s_layers.back(), grid_mask, p.svp)
                             : detail::zero_prompt<T>(p.cfg.sam_channels);
  out.contrastive = p.cfg.use_ce
                        ? contrastive_volume(q_layers, s_layers, grid_mask, p.cfg.corr_layers)
                        : foreground_stack(q_layers, s_layers, grid_mask, p.cfg.corr_layers);
  out.refined = p.cfg.use_mhcm ? mhcm_forward(out.contrastive, p.cfg.hgmb, p.mhcm)
                               : out.contrastive;
  CorrelationVolume4D<T> fg = foreground_volume(q_layers.back(), s_layers.back(), grid_mask);
  out.prior = dense_prompt(out.refined.values, fg.values, p.dense, p.cfg.upsample_factor);
  return out;
}

// K support shots: prompts and contrastive volumes aggregate by the k-shot
// rule; the foreground residual volume is averaged the same way
template <typename T>
MvpgOutput<T> mvpg_forward_kshot(const std::vector<nd::Tensor<T>>& q_layers,
                                 const std::vector<std::vector<nd::Tensor<T>>>& s_shots,
                                 const std::vector<nd::Tensor<T>>& masks,
                                 const MvpgParams<T>& p) {
  if (s_shots.empty() || s_shots.size() != masks.size())
    throw ShapeMismatch("mvpg_forward_kshot: shot/mask count mismatch");
  std::vector<std::pair<SparsePrompt<T>, CorrelationVolume4D<T>>> shots;
  nd::Tensor<T> fg_sum;
  for (size_t k = 0; k < s_shots.size(); ++k) {
    SparsePrompt<T> sp = p.cfg.use_svp ? semantic_visual_prompt(s_shots[k].back(), masks[k], p.svp)
                                       : detail::zero_prompt<T>(p.cfg.sam_channels);
    CorrelationVolume4D<T> cv =
        p.cfg.use_ce ? contrastive_volume(q_layers, s_shots[k], masks[k], p.cfg.corr_layers)
                     : foreground_stack(q_layers, s_shots[k], masks[k], p.cfg.corr_layers);
    CorrelationVolume4D<T> fg = foreground_volume(q_layers.back(), s_shots[k].back(), masks[k]);
    fg_sum = fg_sum.defined() ? nd::add(fg_sum, fg.values) : fg.values;
    shots.emplace_back(std::move(sp), std::move(cv));
  }
  auto [sparse, contrastive] = kshot_aggregate(shots);
  MvpgOutput<T> out;
  out.sparse = std::move(sparse);
  out.contrastive = std::move(contrastive);
  out.refined = p.cfg.use_mhcm ? mhcm_forward(out.contrastive, p.cfg.hgmb, p.mhcm)
                               : out.contrastive;
  nd::Tensor<T> fg_mean = nd::scale(fg_sum, T(1) / T(s_shots.size()));
  out.prior = dense_prompt(out.refined.values, fg_mean, p.dense, p.cfg.upsample_factor);
  return out;
}

}  // namespace fsseg
