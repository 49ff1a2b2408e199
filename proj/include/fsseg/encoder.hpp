#pragma once

#include <string>
#include <vector>

#include "fsseg/error.hpp"
#include "fsseg/nd/nn.hpp"
#include "fsseg/nd/tensor.hpp"

// Frozen feature extraction. Either a small fixed-seed ViT runs on images
// directly, or per-layer feature maps precomputed elsewhere are loaded from
// files. Downstream modules only ever see a FeatureStack and do not care
// which path produced it.
namespace fsseg {

struct EncoderConfig {
  int64_t num_layers = 6;
  int64_t embed_dim = 64;
  int64_t patch_size = 8;
  int64_t num_heads = 4;
  int64_t input_resolution = 64;
  uint64_t seed = 1234;

  int64_t grid() const { return input_resolution / patch_size; }
  void validate() const;
};

enum class FeatureSource { ToyEncoder, File };

struct FeatureStack {
  std::vector<nd::Tensor<float>> layers;  // each [H,W,C]
  FeatureSource source = FeatureSource::ToyEncoder;
  int64_t resolution = 0;

  int64_t grid_h() const { return layers.empty() ? 0 : layers[0].shape()[0]; }
  int64_t grid_w() const { return layers.empty() ? 0 : layers[0].shape()[1]; }
  int64_t channels() const { return layers.empty() ? 0 : layers[0].shape()[2]; }
  void validate() const;  // uniform layer shapes, finite values
};

// ViT with fixed random weights. The weights are a pure function of the
// config seed and are never trained; encode builds no gradient tape.
class ToyEncoder {
 public:
  explicit ToyEncoder(EncoderConfig cfg);

  // image: [res,res,3] with values in [0,1]
  FeatureStack encode(const nd::Tensor<float>& image) const;

  // conv patch embedding only, before position codes and attention;
  // exposed because translation by one patch is exactly one grid cell here
  nd::Tensor<float> patch_embedding(const nd::Tensor<float>& image) const;

  const EncoderConfig& config() const { return cfg_; }
  int64_t param_count() const { return params_.param_count(); }
  bool frozen() const;

 private:
  EncoderConfig cfg_;
  nd::ParamStore<float> params_;
  nd::Tensor<float> patch_w_, patch_b_;  // [p,p,3,C], [C]
  nd::Tensor<float> pos_codes_;          // [grid*grid, C]
  std::vector<nd::TransformerBlockParams<float>> blocks_;
};

// Feature stacks on disk: a manifest with one "layer_index filename" line per
// layer, file paths relative to the manifest's directory, each layer a UFT1
// tensor of shape [H,W,C].
void save_feature_file(const std::string& manifest_path, const FeatureStack& fs);
FeatureStack load_feature_file(const std::string& manifest_path);

}  // namespace fsseg
