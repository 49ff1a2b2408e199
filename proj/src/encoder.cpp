#include "fsseg/encoder.hpp"

#include <filesystem>

#include "fsseg/io.hpp"
#include "fsseg/nd/ops.hpp"
#include "fsseg/nd/rng.hpp"

namespace fs = std::filesystem;

namespace fsseg {

void EncoderConfig::validate() const {
  if (num_layers < 4)
    throw BadConfig("encoder needs at least 4 layers, got " + std::to_string(num_layers));
  if (patch_size <= 0 || input_resolution <= 0 || embed_dim <= 0 || num_heads <= 0)
    throw BadConfig("encoder dimensions must be positive");
  if (input_resolution % patch_size != 0)
    throw BadConfig("input_resolution " + std::to_string(input_resolution) +
                    " not divisible by patch_size " + std::to_string(patch_size));
  if (embed_dim % num_heads != 0)
    throw BadConfig("embed_dim not divisible by num_heads");
}

void FeatureStack::validate() const {
  if (layers.empty()) throw ShapeMismatch("feature stack has no layers");
  const nd::Shape& s0 = layers[0].shape();
  for (const auto& l : layers) {
    if (l.shape().size() != 3) throw ShapeMismatch("feature layer must be [H,W,C]");
    if (l.shape() != s0)
      throw ShapeMismatch("feature layers differ: " + nd::shape_str(l.shape()) + " vs " +
                          nd::shape_str(s0));
    nd::check_finite<float>(l.values(), "feature_stack");
  }
}

ToyEncoder::ToyEncoder(EncoderConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  nd::Rng rng(nd::Rng::mix(cfg_.seed, 0xE7C0DE));
  int64_t C = cfg_.embed_dim, p = cfg_.patch_size, g = cfg_.grid();
  patch_w_ = params_.add("patch.w", nd::fanin_normal_tensor<float>(rng, {p, p, 3, C}, p * p * 3));
  patch_b_ = params_.add("patch.b", nd::Tensor<float>::zeros({C}));
  pos_codes_ = nd::sincos_position_codes<float>(g, g, C, 0.2f);
  for (int64_t i = 0; i < cfg_.num_layers; ++i)
    blocks_.push_back(nd::make_transformer_block(params_, "block" + std::to_string(i), rng, C,
                                                 cfg_.num_heads, 2 * C));
  // frozen for good: nothing here ever receives gradients
  params_.set_trainable(false);
}

bool ToyEncoder::frozen() const {
  for (const auto& [name, t] : params_.items())
    if (t.requires_grad()) return false;
  return true;
}

nd::Tensor<float> ToyEncoder::patch_embedding(const nd::Tensor<float>& image) const {
  const nd::Shape& s = image.shape();
  if (s != nd::Shape{cfg_.input_resolution, cfg_.input_resolution, 3})
    throw ShapeMismatch("encode: image " + nd::shape_str(s) + ", expected [" +
                        std::to_string(cfg_.input_resolution) + "," +
                        std::to_string(cfg_.input_resolution) + ",3]");
  return nd::conv2d(image, patch_w_, patch_b_, cfg_.patch_size, 0);
}

FeatureStack ToyEncoder::encode(const nd::Tensor<float>& image) const {
  int64_t g = cfg_.grid(), C = cfg_.embed_dim;
  nd::Tensor<float> tokens = nd::reshape(patch_embedding(image), {g * g, C});
  tokens = nd::add(tokens, pos_codes_);
  FeatureStack out;
  out.source = FeatureSource::ToyEncoder;
  out.resolution = cfg_.input_resolution;
  // collected layers pass through a shared final norm, the way intermediate
  // ViT features are usually extracted; the residual stream itself stays raw
  nd::Tensor<float> gamma = nd::Tensor<float>::full({C}, 1.0f);
  nd::Tensor<float> beta = nd::Tensor<float>::zeros({C});
  for (const auto& blk : blocks_) {
    tokens = nd::transformer_block(tokens, blk);
    nd::Tensor<float> normed = nd::layer_norm(tokens, gamma, beta);
    out.layers.push_back(nd::reshape(normed, {g, g, C}).detached_copy());
  }
  out.validate();
  return out;
}

void save_feature_file(const std::string& manifest_path, const FeatureStack& fs_in) {
  fs_in.validate();
  fs::path mpath(manifest_path);
  std::string stem = mpath.stem().string();
  std::vector<std::pair<std::string, std::string>> entries;
  for (size_t i = 0; i < fs_in.layers.size(); ++i) {
    char fname[64];
    std::snprintf(fname, sizeof(fname), "%s.layer%02zu.uft", stem.c_str(), i);
    io::save_uft((mpath.parent_path() / fname).string(), fs_in.layers[i].shape(),
                 fs_in.layers[i].values());
    entries.emplace_back(std::to_string(i), fname);
  }
  io::save_manifest(manifest_path, entries);
}

FeatureStack load_feature_file(const std::string& manifest_path) {
  fs::path mpath(manifest_path);
  auto entries = io::load_manifest(manifest_path);
  FeatureStack out;
  out.source = FeatureSource::File;
  out.layers.resize(entries.size());
  for (const auto& [idx_str, fname] : entries) {
    size_t idx = std::stoul(idx_str);
    if (idx >= out.layers.size()) throw BadFormat(manifest_path + ": layer index " + idx_str);
    io::UftTensor t = io::load_uft((mpath.parent_path() / fname).string());
    if (t.shape.size() != 3) throw ShapeMismatch("feature layer must be [H,W,C]");
    out.layers[idx] = nd::Tensor<float>::from_data(t.shape, std::move(t.data));
  }
  out.validate();
  return out;
}

}  // namespace fsseg
