#include "fsseg/distill.hpp"

#include <cmath>
#include <sstream>

#include "fsseg/nd/optim.hpp"

namespace fsseg {

void DistillStagePlan::validate() const {
  if (resolutions.empty()) throw BadConfig("distill plan has no stages");
  for (size_t i = 1; i < resolutions.size(); ++i) {
    if (resolutions[i] <= resolutions[i - 1])
      throw BadConfig("distill resolutions must be strictly increasing");
    double ratio = double(resolutions[i]) / double(resolutions[i - 1]);
    if (ratio < 1.9 || ratio > 2.1)
      throw BadConfig("stage " + std::to_string(resolutions[i - 1]) + "->" +
                      std::to_string(resolutions[i]) + " is not a doubling (ratio " +
                      std::to_string(ratio) + ")");
  }
  if (epochs_per_stage <= 0 || batch_size <= 0) throw BadConfig("distill epochs/batch must be positive");
  if (lr <= 0) throw BadConfig("distill lr must be positive");
  if (weight_decay < 0) throw BadConfig("distill weight decay must be non-negative");
}

LinearTeacher::LinearTeacher(int64_t in_channels, int64_t out_channels, uint64_t seed) {
  nd::Rng rng(nd::Rng::mix(seed, 0x71C));
  std::vector<float> w(in_channels * out_channels);
  float s = float(1.0 / std::sqrt(double(in_channels)));
  for (auto& e : w) e = float(rng.normal()) * s;
  w_ = nd::Tensor<float>::from_data({in_channels, out_channels}, std::move(w));
}

nd::Tensor<float> LinearTeacher::target(const nd::Tensor<float>&, const nd::Tensor<float>& f_low,
                                        int64_t, int64_t) {
  int64_t H = f_low.shape()[0], W = f_low.shape()[1], C = f_low.shape()[2];
  if (C != w_.shape()[0]) throw ShapeMismatch("linear teacher: channel mismatch");
  return nd::reshape(nd::matmul(nd::reshape(f_low, {H * W, C}), w_), {H, W, w_.shape()[1]});
}

AttentionTeacher::AttentionTeacher(int64_t patch_size, int64_t width, int64_t out_channels,
                                   int64_t heads, uint64_t seed)
    : patch_(patch_size), width_(width), out_(out_channels) {
  nd::Rng rng(nd::Rng::mix(seed, 0x7EAC));
  patch_w_ = params_.add("patch.w",
                         nd::fanin_normal_tensor<float>(rng, {patch_, patch_, 3, width_},
                                                        patch_ * patch_ * 3));
  patch_b_ = params_.add("patch.b", nd::Tensor<float>::zeros({width_}));
  block_ = nd::make_transformer_block(params_, "block", rng, width_, heads, 2 * width_);
  head_ = nd::make_linear(params_, "head", rng, width_, out_);
  params_.set_trainable(false);
}

nd::Tensor<float> AttentionTeacher::target(const nd::Tensor<float>& image,
                                           const nd::Tensor<float>&, int64_t, int64_t) {
  if (image.shape().size() != 3 || image.shape()[2] != 3)
    throw ShapeMismatch("attention teacher: image must be [H,W,3]");
  if (image.shape()[0] % patch_ != 0 || image.shape()[1] % patch_ != 0)
    throw ShapeMismatch("attention teacher: image not divisible by patch");
  int64_t gh = image.shape()[0] / patch_, gw = image.shape()[1] / patch_;
  nd::Tensor<float> x = nd::conv2d(image, patch_w_, patch_b_, patch_, 0);
  nd::Tensor<float> tokens = nd::reshape(x, {gh * gw, width_});
  tokens = nd::transformer_block(tokens, block_);
  return nd::reshape(nd::linear(tokens, head_), {gh, gw, out_});
}

SelfTeacher::SelfTeacher(const AdapterConfig& cfg, uint64_t seed)
    : frozen_(make_adapter<float>(cfg, seed)) {
  frozen_.store.set_trainable(false);
}

nd::Tensor<float> SelfTeacher::target(const nd::Tensor<float>&, const nd::Tensor<float>& f_low,
                                      int64_t, int64_t) {
  return adapter_forward(f_low, frozen_);
}

FileTeacher::FileTeacher(std::map<int64_t, std::vector<std::string>> manifests_by_resolution)
    : manifests_(std::move(manifests_by_resolution)) {}

bool FileTeacher::supports_resolution(int64_t res) const { return manifests_.count(res) > 0; }

nd::Tensor<float> FileTeacher::target(const nd::Tensor<float>&, const nd::Tensor<float>&,
                                      int64_t resolution, int64_t sample_index) {
  auto it = manifests_.find(resolution);
  if (it == manifests_.end())
    throw MissingTeacherResolution("no teacher features at resolution " +
                                   std::to_string(resolution));
  if (sample_index < 0 || sample_index >= int64_t(it->second.size()))
    throw IoError("teacher sample index out of range");
  FeatureStack fs = load_feature_file(it->second[sample_index]);
  return fs.layers.at(0);
}

std::vector<nd::Tensor<float>> make_distill_corpus(int64_t n, int64_t resolution, uint64_t seed) {
  std::vector<nd::Tensor<float>> out;
  out.reserve(n);
  for (int64_t i = 0; i < n; ++i) {
    nd::Rng rng(nd::Rng::mix(seed, 0xC0 + uint64_t(i)));
    std::vector<float> img(resolution * resolution * 3);
    // base color plus a few low-frequency waves per channel
    for (int64_t c = 0; c < 3; ++c) {
      double base = rng.uniform(0.25, 0.75);
      struct Wave {
        double fx, fy, phase, amp;
      };
      Wave waves[3];
      for (auto& w : waves)
        w = {rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 6.28318),
             rng.uniform(0.05, 0.2)};
      for (int64_t y = 0; y < resolution; ++y)
        for (int64_t x = 0; x < resolution; ++x) {
          double v = base;
          for (const auto& w : waves)
            v += w.amp * std::sin(6.28318 * (w.fx * x + w.fy * y) / double(resolution) + w.phase);
          img[(y * resolution + x) * 3 + c] = float(std::clamp(v, 0.0, 1.0));
        }
    }
    out.push_back(nd::Tensor<float>::from_data({resolution, resolution, 3}, std::move(img)));
  }
  return out;
}

namespace {

nd::Tensor<float> resize_image(const nd::Tensor<float>& img, int64_t res) {
  if (img.shape()[0] == res && img.shape()[1] == res) return img;
  return nd::bilinear_upsample(img, res, res);
}

double corpus_loss(const std::vector<nd::Tensor<float>>& lows,
                   const std::vector<nd::Tensor<float>>& targets,
                   const AdapterParams<float>& adapter) {
  double total = 0;
  for (size_t i = 0; i < lows.size(); ++i)
    total += double(distill_loss(adapter_forward(lows[i], adapter), targets[i]).item());
  return total / double(lows.size());
}

}  // namespace

DistillResult run_distillation(const DistillStagePlan& plan, const EncoderConfig& encoder_cfg,
                               int low_layer, TeacherSource& teacher,
                               AdapterParams<float>& adapter,
                               const std::vector<nd::Tensor<float>>& corpus, uint64_t seed) {
  plan.validate();
  if (low_layer < 0 || low_layer >= int(encoder_cfg.num_layers))
    throw BadConfig("low_layer outside encoder depth");
  if (int64_t(corpus.size()) < plan.batch_size)
    throw InsufficientSamples("corpus smaller than one batch");
  for (int64_t res : plan.resolutions)
    if (!teacher.supports_resolution(res))
      throw MissingTeacherResolution("no teacher targets at resolution " + std::to_string(res));

  DistillResult result;
  int64_t global_step = 0;
  const int64_t n = int64_t(corpus.size());
  // last parameter state known to produce a finite loss; a non-finite forward
  // means the most recent update was harmful, so recovery rolls back past it
  auto good = nd::snapshot_values(adapter.store);

  for (size_t stage = 0; stage < plan.resolutions.size(); ++stage) {
    int64_t res = plan.resolutions[stage];
    EncoderConfig stage_cfg = encoder_cfg;
    stage_cfg.input_resolution = res;
    ToyEncoder enc(stage_cfg);

    // the encoder and teacher are frozen, so features and targets are
    // computed once per stage
    std::vector<nd::Tensor<float>> lows, targets;
    lows.reserve(n);
    targets.reserve(n);
    for (int64_t i = 0; i < n; ++i) {
      nd::Tensor<float> img = resize_image(corpus[i], res);
      FeatureStack fs = enc.encode(img);
      nd::Tensor<float> f_low = fs.layers[low_layer];
      nd::Tensor<float> tgt = teacher.target(img, f_low, res, i);
      if (tgt.shape() != nd::Shape{f_low.shape()[0], f_low.shape()[1], adapter.cfg.out_channels})
        throw ShapeMismatch("teacher target " + nd::shape_str(tgt.shape()) + " at resolution " +
                            std::to_string(res));
      lows.push_back(std::move(f_low));
      targets.push_back(std::move(tgt));
    }

    try {
      result.stage_initial_loss.push_back(corpus_loss(lows, targets, adapter));
    } catch (const NonFinite&) {
      nd::restore_values(adapter.store, good);
      result.aborted = true;
      result.stage_final_loss.push_back(corpus_loss(lows, targets, adapter));
      return result;
    }

    // optimizer state resets at each stage boundary; parameters carry over
    nd::AdamW<float> opt(adapter.store.tensors(), plan.lr, plan.weight_decay);
    nd::Rng order_rng(nd::Rng::mix(seed, 0xD15 + stage));
    std::vector<int64_t> order(n);
    for (int64_t i = 0; i < n; ++i) order[i] = i;
    const int64_t steps_per_epoch = n / plan.batch_size;

    for (int64_t epoch = 0; epoch < plan.epochs_per_stage; ++epoch) {
      order_rng.shuffle(order.begin(), order.end());
      for (int64_t b = 0; b < steps_per_epoch; ++b) {
        auto pre_step = nd::snapshot_values(adapter.store);
        try {
          opt.zero_grad();
          double batch_loss = 0;
          for (int64_t k = 0; k < plan.batch_size; ++k) {
            int64_t idx = order[b * plan.batch_size + k];
            nd::Tensor<float> loss =
                distill_loss(adapter_forward(lows[idx], adapter), targets[idx]);
            batch_loss += double(loss.item());
            nd::backward(nd::scale(loss, 1.0f / float(plan.batch_size)));
          }
          good = std::move(pre_step);
          opt.step();
          result.history.push_back(
              {global_step++, int(stage), batch_loss / double(plan.batch_size)});
        } catch (const NonFinite&) {
          nd::restore_values(adapter.store, good);
          result.aborted = true;
          result.stage_final_loss.push_back(corpus_loss(lows, targets, adapter));
          return result;
        }
      }
    }

    result.stage_final_loss.push_back(corpus_loss(lows, targets, adapter));
  }
  return result;
}

std::string distill_history_csv(const DistillResult& r) {
  std::ostringstream os;
  os << "step,stage,loss\n";
  char buf[64];
  for (const auto& rec : r.history) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.9g\n", static_cast<long long>(rec.step), rec.stage,
                  rec.loss);
    os << buf;
  }
  return os.str();
}

}  // namespace fsseg
