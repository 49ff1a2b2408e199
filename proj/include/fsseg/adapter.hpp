#pragma once

#include <string>
#include <vector>

#include "fsseg/error.hpp"
#include "fsseg/nd/nn.hpp"
#include "fsseg/nd/ops.hpp"
#include "fsseg/nd/rng.hpp"

// Bottleneck adapter: projects a low-layer feature map into the teacher's
// embedding space. Topology: 1x1 conv (C -> C_sam), 3x3 conv (C_sam -> C_sam,
// padding 1) with layer norm + GELU, 1x1 conv down to the bottleneck width
// C', a stack of pre-norm transformer blocks over the grid tokens, then a
// 1x1 conv back up to C_sam. A residual carries the first projection past
// the whole middle, so the module always contains an exactly linear path
// and can represent linear maps without fighting the norm layers.
namespace fsseg {

struct AdapterConfig {
  int64_t in_channels = 64;    // C
  int64_t mid_channels = 16;   // C', bottleneck width
  int64_t out_channels = 32;   // C_sam
  int64_t attn_ffn_dim = 32;
  int64_t num_attn_blocks = 2;
  int64_t num_heads = 4;

  void validate() const {
    if (in_channels <= 0 || mid_channels <= 0 || out_channels <= 0 || attn_ffn_dim <= 0 ||
        num_attn_blocks <= 0 || num_heads <= 0)
      throw BadConfig("adapter dimensions must be positive");
    if (mid_channels >= in_channels)
      throw BadConfig("bottleneck width must be below input channels");
    if (mid_channels > out_channels)
      throw BadConfig("bottleneck width must not exceed output channels");
    if (mid_channels % num_heads != 0)
      throw BadConfig("bottleneck width not divisible by num_heads");
  }
};

template <typename T>
struct AdapterParams {
  AdapterConfig cfg;
  nd::ParamStore<T> store;
  nd::Tensor<T> conv1_w, conv1_b;  // [1,1,C,C_sam]
  nd::Tensor<T> conv2_w, conv2_b;  // [3,3,C_sam,C_sam]
  nd::LayerNormParams<T> mid_ln;
  nd::Tensor<T> conv3_w, conv3_b;  // [1,1,C_sam,C']
  std::vector<nd::TransformerBlockParams<T>> blocks;
  nd::Tensor<T> out_w, out_b;  // [1,1,C',C_sam]
};

template <typename T>
AdapterParams<T> make_adapter(const AdapterConfig& cfg, uint64_t seed) {
  cfg.validate();
  nd::Rng rng(nd::Rng::mix(seed, 0xADA));
  AdapterParams<T> p;
  p.cfg = cfg;
  const T std02 = T(0.02);
  int64_t C = cfg.in_channels, Cm = cfg.mid_channels, Co = cfg.out_channels;
  p.conv1_w = p.store.add("conv1.w", nd::trunc_normal_tensor<T>(rng, {1, 1, C, Co}, std02));
  p.conv1_b = p.store.add("conv1.b", nd::Tensor<T>::zeros({Co}));
  p.conv2_w = p.store.add("conv2.w", nd::trunc_normal_tensor<T>(rng, {3, 3, Co, Co}, std02));
  p.conv2_b = p.store.add("conv2.b", nd::Tensor<T>::zeros({Co}));
  p.mid_ln = nd::make_layer_norm(p.store, "mid_ln", Co);
  p.conv3_w = p.store.add("conv3.w", nd::trunc_normal_tensor<T>(rng, {1, 1, Co, Cm}, std02));
  p.conv3_b = p.store.add("conv3.b", nd::Tensor<T>::zeros({Cm}));
  for (int64_t i = 0; i < cfg.num_attn_blocks; ++i)
    p.blocks.push_back(nd::make_transformer_block(p.store, "attn" + std::to_string(i), rng, Cm,
                                                  cfg.num_heads, cfg.attn_ffn_dim));
  p.out_w = p.store.add("out.w", nd::trunc_normal_tensor<T>(rng, {1, 1, Cm, Co}, std02));
  p.out_b = p.store.add("out.b", nd::Tensor<T>::zeros({Co}));
  return p;
}

// F_low: [H,W,C] -> [H,W,C_sam]
template <typename T>
nd::Tensor<T> adapter_forward(const nd::Tensor<T>& f_low, const AdapterParams<T>& p) {
  if (f_low.shape().size() != 3 || f_low.shape()[2] != p.cfg.in_channels)
    throw ShapeMismatch("adapter_forward: input " + nd::shape_str(f_low.shape()) +
                        ", expected [H,W," + std::to_string(p.cfg.in_channels) + "]");
  int64_t H = f_low.shape()[0], W = f_low.shape()[1];
  nd::Tensor<T> base = nd::conv2d(f_low, p.conv1_w, p.conv1_b, 1, 0);
  nd::Tensor<T> x = nd::conv2d(base, p.conv2_w, p.conv2_b, 1, 1);
  x = nd::gelu(nd::apply_layer_norm(x, p.mid_ln));
  x = nd::conv2d(x, p.conv3_w, p.conv3_b, 1, 0);
  nd::Tensor<T> tokens = nd::reshape(x, {H * W, p.cfg.mid_channels});
  for (const auto& blk : p.blocks) tokens = nd::transformer_block(tokens, blk);
  x = nd::reshape(tokens, {H, W, p.cfg.mid_channels});
  return nd::add(base, nd::conv2d(x, p.out_w, p.out_b, 1, 0));
}

}  // namespace fsseg
