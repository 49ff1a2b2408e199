#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fsseg/adapter.hpp"
#include "fsseg/data.hpp"
#include "fsseg/decoder.hpp"
#include "fsseg/encoder.hpp"
#include "fsseg/error.hpp"
#include "fsseg/mvpg.hpp"
#include "fsseg/protocol.hpp"

namespace fsseg {

struct LossConfig {
  float dice_smooth = 1.0f;
  float bce_eps = 1e-7f;

  void validate() const {
    if (!(dice_smooth > 0)) throw BadConfig("dice_smooth must be positive");
    if (!(bce_eps > 0) || bce_eps > 1e-3f) throw BadConfig("bce_eps must lie in (0, 1e-3]");
  }
};

template <typename T>
nd::Tensor<T> dice_loss(const nd::Tensor<T>& p, const nd::Tensor<T>& m, T smooth) {
  if (p.shape() != m.shape())
    throw ShapeMismatch("dice_loss: " + nd::shape_str(p.shape()) + " vs " +
                        nd::shape_str(m.shape()));
  nd::Tensor<T> num = nd::add_scalar(nd::scale(nd::sum_all(nd::mul(p, m)), T(2)), smooth);
  nd::Tensor<T> den = nd::add_scalar(nd::add(nd::sum_all(p), nd::sum_all(m)), smooth);
  return nd::add_scalar(nd::neg(nd::div(num, den)), T(1));
}

template <typename T>
nd::Tensor<T> bce_loss(const nd::Tensor<T>& p, const nd::Tensor<T>& m, T eps) {
  if (p.shape() != m.shape())
    throw ShapeMismatch("bce_loss: " + nd::shape_str(p.shape()) + " vs " +
                        nd::shape_str(m.shape()));
  nd::Tensor<T> pc = nd::clamp(p, eps, T(1) - eps);
  nd::Tensor<T> hit = nd::mul(m, nd::log_(pc));
  nd::Tensor<T> miss =
      nd::mul(nd::add_scalar(nd::neg(m), T(1)), nd::log_(nd::add_scalar(nd::neg(pc), T(1))));
  return nd::neg(nd::mean_all(nd::add(hit, miss)));
}

template <typename T>
struct LossParts {
  nd::Tensor<T> total;
  nd::Tensor<T> prior;
  nd::Tensor<T> final_;
};

// Both predictions are supervised against the query mask, resized by nearest
// neighbor to each prediction's own resolution.
template <typename T>
LossParts<T> total_loss(const nd::Tensor<T>& prior_map, const nd::Tensor<T>& final_map,
                        const nd::Tensor<T>& query_mask, const LossConfig& cfg) {
  cfg.validate();
  if (query_mask.shape().size() != 2) throw ShapeMismatch("total_loss: query mask must be [H,W]");
  nd::Tensor<T> prior2d = prior_map;
  if (prior2d.shape().size() == 3 && prior2d.shape()[0] == 1)
    prior2d = nd::reshape(prior2d, {prior2d.shape()[1], prior2d.shape()[2]});
  if (prior2d.shape().size() != 2 || final_map.shape().size() != 2)
    throw ShapeMismatch("total_loss: predictions must be [H,W] or [1,H,W]");

  auto at_res = [&](const nd::Tensor<T>& pred) {
    return downsample_mask_nearest(query_mask, pred.shape()[0], pred.shape()[1]);
  };
  T smooth = T(cfg.dice_smooth), eps = T(cfg.bce_eps);
  nd::Tensor<T> m_prior = at_res(prior2d);
  nd::Tensor<T> m_final = at_res(final_map);

  LossParts<T> out;
  out.prior = nd::add(dice_loss(prior2d, m_prior, smooth), bce_loss(prior2d, m_prior, eps));
  out.final_ = nd::add(dice_loss(final_map, m_final, smooth), bce_loss(final_map, m_final, eps));
  out.total = nd::add(out.prior, out.final_);
  return out;
}

// ---- full pipeline bundle ----

struct PipelineConfig {
  EncoderConfig encoder;
  AdapterConfig adapter;
  MvpgConfig mvpg;
  DecoderConfig decoder;
  int64_t low_layer = 1;
  uint64_t seed = 7;

  void validate() const;
};

// Frozen encoder and adapter, trainable prompt generator and decoder.
struct ModelBundle {
  PipelineConfig cfg;
  ToyEncoder encoder;
  AdapterParams<float> adapter;
  MvpgParams<float> mvpg;
  DecoderParams<float> decoder;

  std::vector<nd::Tensor<float>> trainable_params() const;
  std::vector<std::pair<std::string, nd::Tensor<float>>> named_trainable_params() const;
};

ModelBundle make_bundle(const PipelineConfig& cfg);

struct EpisodeForward {
  PriorMask<float> prior;     // [1, 4*gh, 4*gw]
  MaskProbMap<float> final_;  // [4*gh, 4*gw]
};

EpisodeForward forward_episode(const ModelBundle& bundle, const Dataset& ds,
                               const EpisodeSpec& ep);

// ---- episodic training ----

struct TrainConfig {
  float lr = 1e-3f;
  float weight_decay = 5e-4f;
  float poly_power = 0.9f;
  int64_t total_steps = 1;
  int64_t batch_episodes = 8;
  uint64_t seed = 0;
  bool use_svp = true;
  bool use_mhcm = true;
  bool use_ce = true;

  void validate() const {
    if (!(lr > 0)) throw BadConfig("lr must be positive");
    if (total_steps < 1) throw BadConfig("total_steps must be >= 1");
    if (batch_episodes < 1) throw BadConfig("batch_episodes must be >= 1");
    if (!(weight_decay >= 0) || !(poly_power >= 0))
      throw BadConfig("weight_decay and poly_power must be non-negative");
  }
};

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<double> step_lrs;
  std::vector<int> trained_classes;  // sorted, unique
  int64_t episodes_skipped = 0;
  bool aborted = false;
};

std::vector<EpisodeSpec> make_training_episodes(const Dataset& ds, const FoldProtocol& protocol,
                                                int k, int64_t count, uint64_t seed);

// Consumes the episode list cyclically, batch_episodes per step. Episodes
// whose support vanishes at the feature grid are skipped deterministically.
TrainResult train_episodic(ModelBundle& bundle, const Dataset& ds,
                           const std::vector<EpisodeSpec>& episodes, const TrainConfig& cfg,
                           const LossConfig& loss_cfg);

// ---- evaluation ----

class EvalAccumulator {
 public:
  void add(const nd::Tensor<float>& pred, const nd::Tensor<float>& truth, int class_id);

  double iou(int class_id) const;
  double miou() const;
  std::vector<int> classes() const;  // sorted
  int64_t episodes(int class_id) const;
  int64_t tp(int class_id) const;
  int64_t fp(int class_id) const;
  int64_t fn(int class_id) const;

 private:
  struct Counts {
    int64_t tp = 0, fp = 0, fn = 0, episodes = 0;
  };
  std::map<int, Counts> per_class_;
};

struct EvalReport {
  struct Row {
    int class_id = -1;
    double iou = 0;
    int64_t episodes = 0;
    int64_t tp = 0, fp = 0, fn = 0;
  };
  std::vector<Row> rows;  // one per held-out class, ascending class id
  double miou = 0;
};

// K-shot evaluation over the protocol's held-out classes. Throws FoldLeak if
// any held-out class appears in trained_classes. Never updates parameters.
EvalReport evaluate(const ModelBundle& bundle, const Dataset& ds, const FoldProtocol& protocol,
                    int shots, int64_t episodes_per_class, uint64_t seed,
                    const std::vector<int>& trained_classes);

std::string metrics_jsonl(const EvalReport& report, int fold);
std::string summary_csv(const std::vector<double>& fold_mious);

}  // namespace fsseg
