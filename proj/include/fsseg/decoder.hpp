#pragma once

#include <limits>
#include <string>
#include <vector>

#include "fsseg/error.hpp"
#include "fsseg/mvpg.hpp"
#include "fsseg/nd/nn.hpp"
#include "fsseg/nd/rng.hpp"

// Prompted mask decoder with two-way attention. The dense prior mask is
// embedded by a small conv stack and added to the image embedding; an output
// token and the sparse prompt token then exchange information with the image
// over two-way blocks; the refined embedding is upscaled 4x and dotted with a
// hypernetwork projection of the output token to give per-pixel logits.
namespace fsseg {

template <typename T>
struct DecoderInputs {
  nd::Tensor<T> image_embedding;  // [H,W,C]
  SparsePrompt<T> sparse;         // values [1,C]
  PriorMask<T> dense;             // values [1,4H,4W]
};

template <typename T>
struct MaskProbMap {
  nd::Tensor<T> values;  // [4H,4W], strictly inside (0,1)
};

struct DecoderConfig {
  int64_t channels = 32;  // width of tokens and image embedding
  int64_t num_heads = 4;
  int64_t num_blocks = 2;
  int64_t ffn_hidden = 64;
  int64_t dense_hidden = 8;    // conv stack width for the prior-mask embedding
  bool position_codes = true;  // fixed sinusoidal codes on image queries/keys

  void validate() const {
    if (channels <= 0 || num_heads <= 0 || num_blocks <= 0 || ffn_hidden <= 0 ||
        dense_hidden <= 0)
      throw BadConfig("decoder dimensions must be positive");
    if (channels % num_heads != 0) throw BadConfig("decoder channels must divide into heads");
    if (channels % 4 != 0)
      throw BadConfig("decoder channels must be divisible by 4 for the upscaling stack");
  }
};

// token self-attn -> token-to-image cross-attn -> FFN -> image-to-token
// cross-attn, each with a post-residual layer norm
template <typename T>
struct TwoWayBlockParams {
  nd::MhaParams<T> self_attn, token_to_image, image_to_token;
  nd::MlpParams<T> ffn;
  nd::LayerNormParams<T> ln_self, ln_t2i, ln_ffn, ln_i2t;
};

template <typename T>
TwoWayBlockParams<T> make_two_way_block(nd::ParamStore<T>& ps, const std::string& name,
                                        nd::Rng& rng, const DecoderConfig& cfg) {
  TwoWayBlockParams<T> p;
  p.self_attn = nd::make_mha(ps, name + ".self", rng, cfg.channels, cfg.num_heads);
  p.ln_self = nd::make_layer_norm<T>(ps, name + ".ln_self", cfg.channels);
  p.token_to_image = nd::make_mha(ps, name + ".t2i", rng, cfg.channels, cfg.num_heads);
  p.ln_t2i = nd::make_layer_norm<T>(ps, name + ".ln_t2i", cfg.channels);
  p.ffn = nd::make_mlp(ps, name + ".ffn", rng, cfg.channels, cfg.ffn_hidden);
  p.ln_ffn = nd::make_layer_norm<T>(ps, name + ".ln_ffn", cfg.channels);
  p.image_to_token = nd::make_mha(ps, name + ".i2t", rng, cfg.channels, cfg.num_heads);
  p.ln_i2t = nd::make_layer_norm<T>(ps, name + ".ln_i2t", cfg.channels);
  return p;
}

template <typename T>
struct DecoderParams {
  DecoderConfig cfg;
  nd::ParamStore<T> store;

  nd::Tensor<T> output_token;  // [1,C]

  // prior-mask embedding: two stride-2 convs down to the feature grid, 1x1 up
  // to full width
  nd::Tensor<T> dense1_w, dense1_b;
  nd::LayerNormParams<T> dense_ln1;
  nd::Tensor<T> dense2_w, dense2_b;
  nd::LayerNormParams<T> dense_ln2;
  nd::Tensor<T> dense3_w, dense3_b;

  std::vector<TwoWayBlockParams<T>> blocks;

  // two stride-2 transposed convs, channels C -> C/2 -> C/4
  nd::Tensor<T> up1_w, up1_b;
  nd::LayerNormParams<T> up_ln;
  nd::Tensor<T> up2_w, up2_b;

  // hypernetwork mapping the output token to the upscaled channel width
  nd::LinearParams<T> hyper1, hyper2, hyper3;
};

template <typename T>
DecoderParams<T> make_decoder(const DecoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  DecoderParams<T> p;
  p.cfg = cfg;
  nd::Rng rng(nd::Rng::mix(seed, 0x5D3));
  auto& ps = p.store;
  const int64_t C = cfg.channels, dh = cfg.dense_hidden;

  p.output_token = ps.add("output_token", nd::trunc_normal_tensor<T>(rng, {1, C}, T(0.02)));

  p.dense1_w = ps.add("dense1.w", nd::fanin_normal_tensor<T>(rng, {2, 2, 1, dh}, 4));
  p.dense1_b = ps.add("dense1.b", nd::Tensor<T>::zeros({dh}));
  p.dense_ln1 = nd::make_layer_norm<T>(ps, "dense_ln1", dh);
  p.dense2_w = ps.add("dense2.w", nd::fanin_normal_tensor<T>(rng, {2, 2, dh, dh}, 4 * dh));
  p.dense2_b = ps.add("dense2.b", nd::Tensor<T>::zeros({dh}));
  p.dense_ln2 = nd::make_layer_norm<T>(ps, "dense_ln2", dh);
  p.dense3_w = ps.add("dense3.w", nd::fanin_normal_tensor<T>(rng, {1, 1, dh, C}, dh));
  p.dense3_b = ps.add("dense3.b", nd::Tensor<T>::zeros({C}));

  for (int64_t i = 0; i < cfg.num_blocks; ++i)
    p.blocks.push_back(make_two_way_block(ps, "block" + std::to_string(i), rng, cfg));

  p.up1_w = ps.add("up1.w", nd::fanin_normal_tensor<T>(rng, {2, 2, C, C / 2}, C));
  p.up1_b = ps.add("up1.b", nd::Tensor<T>::zeros({C / 2}));
  p.up_ln = nd::make_layer_norm<T>(ps, "up_ln", C / 2);
  p.up2_w = ps.add("up2.w", nd::fanin_normal_tensor<T>(rng, {2, 2, C / 2, C / 4}, C / 2));
  p.up2_b = ps.add("up2.b", nd::Tensor<T>::zeros({C / 4}));

  p.hyper1 = nd::make_linear(ps, "hyper1", rng, C, C);
  p.hyper2 = nd::make_linear(ps, "hyper2", rng, C, C);
  p.hyper3 = nd::make_linear(ps, "hyper3", rng, C, C / 4);
  return p;
}

namespace detail {

template <typename T>
void check_decoder_inputs(const DecoderInputs<T>& in, const DecoderConfig& cfg) {
  const auto& es = in.image_embedding.shape();
  if (es.size() != 3) throw ShapeMismatch("decoder: image embedding must be [H,W,C]");
  if (es[2] != cfg.channels)
    throw ShapeMismatch("decoder: embedding channels " + std::to_string(es[2]) +
                        " vs configured " + std::to_string(cfg.channels));
  const auto& ss = in.sparse.values.shape();
  if (ss.size() != 2 || ss[0] != 1 || ss[1] != cfg.channels)
    throw ShapeMismatch("decoder: sparse prompt must be [1,C]");
  const auto& ds = in.dense.values.shape();
  if (ds.size() != 3 || ds[0] != 1)
    throw ShapeMismatch("decoder: dense prompt must be [1,H',W']");
  if (ds[1] != 4 * es[0] || ds[2] != 4 * es[1])
    throw ShapeMismatch("decoder: dense prompt grid " + std::to_string(ds[1]) + "x" +
                        std::to_string(ds[2]) + " is not 4x the embedding grid");
}

}  // namespace detail

template <typename T>
MaskProbMap<T> decode(const DecoderInputs<T>& in, const DecoderParams<T>& p) {
  const DecoderConfig& cfg = p.cfg;
  detail::check_decoder_inputs(in, cfg);
  const int64_t H = in.image_embedding.shape()[0], W = in.image_embedding.shape()[1];
  const int64_t C = cfg.channels;

  auto plane = nd::transpose(in.dense.values, {1, 2, 0});  // [4H,4W,1]
  auto d1 = nd::gelu(nd::apply_layer_norm(nd::conv2d(plane, p.dense1_w, p.dense1_b, 2, 0),
                                          p.dense_ln1));
  auto d2 = nd::gelu(nd::apply_layer_norm(nd::conv2d(d1, p.dense2_w, p.dense2_b, 2, 0),
                                          p.dense_ln2));
  auto dense_emb = nd::conv2d(d2, p.dense3_w, p.dense3_b, 1, 0);  // [H,W,C]

  auto src = nd::reshape(nd::add(in.image_embedding, dense_emb), {H * W, C});
  nd::Tensor<T> pe;
  if (cfg.position_codes) pe = nd::sincos_position_codes<T>(H, W, C, T(1));

  auto tokens = nd::concat<T>({p.output_token, in.sparse.values}, 0);  // [2,C]

  for (const auto& b : p.blocks) {
    tokens = nd::apply_layer_norm(nd::add(tokens, nd::mha(tokens, tokens, tokens, b.self_attn)),
                                  b.ln_self);
    auto src_pe = pe.defined() ? nd::add(src, pe) : src;
    tokens = nd::apply_layer_norm(nd::add(tokens, nd::mha(tokens, src_pe, src, b.token_to_image)),
                                  b.ln_t2i);
    tokens = nd::apply_layer_norm(nd::add(tokens, nd::mlp(tokens, b.ffn)), b.ln_ffn);
    src = nd::apply_layer_norm(nd::add(src, nd::mha(src_pe, tokens, tokens, b.image_to_token)),
                               b.ln_i2t);
  }

  auto grid = nd::reshape(src, {H, W, C});
  auto u1 = nd::gelu(nd::apply_layer_norm(nd::conv2d_transpose(grid, p.up1_w, p.up1_b, 2),
                                          p.up_ln));              // [2H,2W,C/2]
  auto u2 = nd::gelu(nd::conv2d_transpose(u1, p.up2_w, p.up2_b, 2));  // [4H,4W,C/4]

  auto tok0 = nd::slice(tokens, {0, 0}, {1, C});
  auto h1 = nd::gelu(nd::linear(tok0, p.hyper1));
  auto h2 = nd::gelu(nd::linear(h1, p.hyper2));
  auto hyper = nd::linear(h2, p.hyper3);  // [1,C/4]

  auto logits = nd::matmul(nd::reshape(u2, {16 * H * W, C / 4}), nd::transpose(hyper, {1, 0}));
  auto probs = nd::sigmoid(nd::reshape(logits, {4 * H, 4 * W}));
  // saturated logits would round the sigmoid to exactly 0 or 1; pin the map
  // strictly inside the open interval
  const T eps = std::numeric_limits<T>::epsilon();
  MaskProbMap<T> out;
  out.values = nd::clamp(probs, eps, T(1) - eps);
  return out;
}

// pixel is foreground iff P_m >= threshold; result is a detached 0/1 map
template <typename T>
nd::Tensor<T> binarize(const MaskProbMap<T>& m, T threshold = T(0.5)) {
  if (!(threshold > T(0) && threshold < T(1)))
    throw BadConfig("binarize threshold must lie in (0,1)");
  const auto& v = m.values.values();
  std::vector<T> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] >= threshold ? T(1) : T(0);
  return nd::Tensor<T>::from_data(m.values.shape(), std::move(out));
}

}  // namespace fsseg
