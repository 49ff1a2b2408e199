#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fsseg/adapter.hpp"
#include "fsseg/encoder.hpp"
#include "fsseg/nd/tensor.hpp"

// Coarse-to-fine feature distillation: train the adapter (and nothing else)
// to match a teacher's output embedding under MSE, running the same corpus
// through a ladder of doubling resolutions.
namespace fsseg {

struct DistillStagePlan {
  std::vector<int64_t> resolutions;
  int64_t epochs_per_stage = 15;
  double lr = 1e-3;
  double weight_decay = 5e-4;
  int64_t batch_size = 8;

  // strictly increasing, consecutive ratio within 5% of doubling
  void validate() const;
};

// mean squared error over all elements
template <typename T>
nd::Tensor<T> distill_loss(const nd::Tensor<T>& f_ba, const nd::Tensor<T>& f_sam) {
  if (f_ba.shape() != f_sam.shape())
    throw ShapeMismatch("distill_loss: " + nd::shape_str(f_ba.shape()) + " vs " +
                        nd::shape_str(f_sam.shape()));
  nd::Tensor<T> d = nd::sub(f_ba, f_sam);
  return nd::mean_all(nd::mul(d, d));
}

// Supplies the target embedding for one sample at one stage resolution.
class TeacherSource {
 public:
  virtual ~TeacherSource() = default;
  virtual nd::Tensor<float> target(const nd::Tensor<float>& image,
                                   const nd::Tensor<float>& f_low, int64_t resolution,
                                   int64_t sample_index) = 0;
  virtual bool supports_resolution(int64_t) const { return true; }
};

// target = F_low through a fixed random channel mix; resolution-agnostic
class LinearTeacher : public TeacherSource {
 public:
  LinearTeacher(int64_t in_channels, int64_t out_channels, uint64_t seed);
  nd::Tensor<float> target(const nd::Tensor<float>&, const nd::Tensor<float>& f_low, int64_t,
                           int64_t) override;

 private:
  nd::Tensor<float> w_;  // [C,C_sam]
};

// Frozen random net over the raw image: patch embedding, one global
// attention block, linear head. Global attention gives the target long-range
// structure the student's low layer lacks, which is what makes the
// coarse-to-fine schedule observable.
class AttentionTeacher : public TeacherSource {
 public:
  AttentionTeacher(int64_t patch_size, int64_t width, int64_t out_channels, int64_t heads,
                   uint64_t seed);
  nd::Tensor<float> target(const nd::Tensor<float>& image, const nd::Tensor<float>&, int64_t,
                           int64_t) override;

 private:
  int64_t patch_, width_, out_;
  nd::ParamStore<float> params_;
  nd::Tensor<float> patch_w_, patch_b_;
  nd::TransformerBlockParams<float> block_;
  nd::LinearParams<float> head_;
};

// adapter_forward with a frozen copy of some parameter state; used to verify
// that a student equal to its teacher has zero loss
class SelfTeacher : public TeacherSource {
 public:
  SelfTeacher(const AdapterConfig& cfg, uint64_t seed);
  nd::Tensor<float> target(const nd::Tensor<float>&, const nd::Tensor<float>& f_low, int64_t,
                           int64_t) override;
  AdapterParams<float>& params() { return frozen_; }

 private:
  AdapterParams<float> frozen_;
};

// Precomputed targets on disk: per resolution, one manifest per sample, each
// a single-layer feature file.
class FileTeacher : public TeacherSource {
 public:
  explicit FileTeacher(std::map<int64_t, std::vector<std::string>> manifests_by_resolution);
  nd::Tensor<float> target(const nd::Tensor<float>&, const nd::Tensor<float>&,
                           int64_t resolution, int64_t sample_index) override;
  bool supports_resolution(int64_t res) const override;

 private:
  std::map<int64_t, std::vector<std::string>> manifests_;
};

struct DistillRecord {
  int64_t step = 0;  // global step across stages
  int stage = 0;
  double loss = 0;
};

struct DistillResult {
  std::vector<DistillRecord> history;
  std::vector<double> stage_initial_loss;  // mean corpus loss before training each stage
  std::vector<double> stage_final_loss;    // after
  bool aborted = false;
};

// Seeded low-frequency color fields; enough texture for feature matching
// without any labels.
std::vector<nd::Tensor<float>> make_distill_corpus(int64_t n, int64_t resolution, uint64_t seed);

// Runs all stages of the plan. encoder_cfg describes the frozen student at
// its native resolution; per stage the same weights are instantiated at the
// stage resolution. Only adapter parameters are updated. On a non-finite
// loss the last completed step's parameters are restored and the run stops
// with aborted=true.
DistillResult run_distillation(const DistillStagePlan& plan, const EncoderConfig& encoder_cfg,
                               int low_layer, TeacherSource& teacher,
                               AdapterParams<float>& adapter,
                               const std::vector<nd::Tensor<float>>& corpus, uint64_t seed);

std::string distill_history_csv(const DistillResult& r);

}  // namespace fsseg
