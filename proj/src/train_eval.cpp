#include "fsseg/train_eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "fsseg/nd/optim.hpp"

namespace fsseg {

void PipelineConfig::validate() const {
  encoder.validate();
  adapter.validate();
  mvpg.validate();
  decoder.validate();
  if (adapter.in_channels != encoder.embed_dim)
    throw BadConfig("adapter input width must match the encoder embedding width");
  if (mvpg.feature_channels != encoder.embed_dim)
    throw BadConfig("prompt-generator feature width must match the encoder embedding width");
  if (mvpg.sam_channels != adapter.out_channels)
    throw BadConfig("prompt width must match the adapter output width");
  if (decoder.channels != adapter.out_channels)
    throw BadConfig("decoder width must match the adapter output width");
  if (low_layer < 0 || low_layer >= encoder.num_layers)
    throw BadConfig("low_layer out of range");
  if (mvpg.corr_layers > encoder.num_layers)
    throw BadConfig("correlation depth exceeds the encoder layer count");
  if (mvpg.upsample_factor != 4)
    throw BadConfig("decoder expects the prior mask at 4x the feature grid");
}

ModelBundle make_bundle(const PipelineConfig& cfg) {
  cfg.validate();
  ModelBundle b{cfg, ToyEncoder(cfg.encoder), make_adapter<float>(cfg.adapter, cfg.seed),
                make_mvpg<float>(cfg.mvpg, cfg.seed), make_decoder<float>(cfg.decoder, cfg.seed)};
  b.adapter.store.set_trainable(false);
  return b;
}

std::vector<nd::Tensor<float>> ModelBundle::trainable_params() const {
  auto out = mvpg.store.tensors();
  auto dec = decoder.store.tensors();
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

std::vector<std::pair<std::string, nd::Tensor<float>>> ModelBundle::named_trainable_params()
    const {
  std::vector<std::pair<std::string, nd::Tensor<float>>> out;
  for (const auto& [name, t] : mvpg.store.items()) out.emplace_back("mvpg." + name, t);
  for (const auto& [name, t] : decoder.store.items()) out.emplace_back("decoder." + name, t);
  return out;
}

namespace {

const Sample& sample_at(const Dataset& ds, int64_t idx) {
  if (idx < 0 || size_t(idx) >= ds.samples.size())
    throw BadConfig("episode references sample " + std::to_string(idx) + " of " +
                    std::to_string(ds.samples.size()));
  return ds.samples[size_t(idx)];
}

}  // namespace

EpisodeForward forward_episode(const ModelBundle& bundle, const Dataset& ds,
                               const EpisodeSpec& ep) {
  if (ep.support.empty()) throw BadConfig("episode has no support samples");
  const Sample& query = sample_at(ds, ep.query);
  FeatureStack q = bundle.encoder.encode(query.image);
  const int64_t gh = q.grid_h(), gw = q.grid_w();

  std::vector<std::vector<nd::Tensor<float>>> shots;
  std::vector<nd::Tensor<float>> grid_masks;
  for (int64_t idx : ep.support) {
    const Sample& s = sample_at(ds, idx);
    FeatureStack fs = bundle.encoder.encode(s.image);
    nd::Tensor<float> gm = downsample_mask_nearest(s.mask, gh, gw);
    float fg = 0;
    for (float v : gm.values()) fg += v;
    if (fg == 0.0f)
      throw EmptyEpisode("support sample " + std::to_string(idx) +
                         " has no foreground at the feature grid");
    shots.push_back(std::move(fs.layers));
    grid_masks.push_back(std::move(gm));
  }

  MvpgOutput<float> prompts =
      shots.size() == 1 ? mvpg_forward(q.layers, shots[0], grid_masks[0], bundle.mvpg)
                        : mvpg_forward_kshot(q.layers, shots, grid_masks, bundle.mvpg);

  DecoderInputs<float> din;
  din.image_embedding = adapter_forward(q.layers[size_t(bundle.cfg.low_layer)], bundle.adapter);
  din.sparse = prompts.sparse;
  din.dense = prompts.prior;

  EpisodeForward out;
  out.prior = std::move(prompts.prior);
  out.final_ = decode(din, bundle.decoder);
  return out;
}

std::vector<EpisodeSpec> make_training_episodes(const Dataset& ds, const FoldProtocol& protocol,
                                                int k, int64_t count, uint64_t seed) {
  if (count < 1) throw BadConfig("episode count must be >= 1");
  EpisodeSampler sampler(ds, protocol, Split::Train, k, seed);
  std::vector<EpisodeSpec> out;
  out.reserve(size_t(count));
  for (int64_t i = 0; i < count; ++i) out.push_back(sampler.next());
  return out;
}

TrainResult train_episodic(ModelBundle& bundle, const Dataset& ds,
                           const std::vector<EpisodeSpec>& episodes, const TrainConfig& cfg,
                           const LossConfig& loss_cfg) {
  cfg.validate();
  loss_cfg.validate();
  if (episodes.empty()) throw BadConfig("no training episodes");
  if (bundle.cfg.mvpg.use_svp != cfg.use_svp || bundle.cfg.mvpg.use_mhcm != cfg.use_mhcm ||
      bundle.cfg.mvpg.use_ce != cfg.use_ce)
    throw BadConfig("ablation flags disagree with the constructed model");

  TrainResult result;
  {
    std::set<int> classes;
    for (const auto& ep : episodes) classes.insert(ep.class_id);
    result.trained_classes.assign(classes.begin(), classes.end());
  }

  nd::AdamW<float> opt(bundle.trainable_params(), cfg.lr, cfg.weight_decay);
  auto snapshot = [&] {
    return std::pair{nd::snapshot_values(bundle.mvpg.store),
                     nd::snapshot_values(bundle.decoder.store)};
  };
  auto restore = [&](const auto& snap) {
    nd::restore_values(bundle.mvpg.store, snap.first);
    nd::restore_values(bundle.decoder.store, snap.second);
  };
  auto good = snapshot();

  size_t cursor = 0;
  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    double lr = nd::poly_lr(cfg.lr, step, cfg.total_steps, cfg.poly_power);
    opt.set_lr(lr);
    auto pre_step = snapshot();
    try {
      opt.zero_grad();
      double batch_loss = 0;
      for (int64_t b = 0; b < cfg.batch_episodes; ++b) {
        int64_t skipped_in_a_row = 0;
        for (;;) {
          const EpisodeSpec& ep = episodes[cursor % episodes.size()];
          ++cursor;
          try {
            EpisodeForward fwd = forward_episode(bundle, ds, ep);
            nd::Tensor<float> loss =
                total_loss(fwd.prior.values, fwd.final_.values, sample_at(ds, ep.query).mask,
                           loss_cfg)
                    .total;
            if (!std::isfinite(loss.item())) throw NonFinite("episode loss is not finite");
            batch_loss += double(loss.item());
            nd::backward(nd::scale(loss, 1.0f / float(cfg.batch_episodes)));
            break;
          } catch (const EmptyEpisode&) {
            ++result.episodes_skipped;
            if (++skipped_in_a_row >= int64_t(episodes.size()))
              throw EmptyEpisode("every training episode is empty at the feature grid");
          }
        }
      }
      good = std::move(pre_step);
      opt.step();
      result.step_losses.push_back(batch_loss / double(cfg.batch_episodes));
      result.step_lrs.push_back(lr);
    } catch (const NonFinite&) {
      restore(good);
      result.aborted = true;
      return result;
    }
  }
  return result;
}

// ---- evaluation ----

void EvalAccumulator::add(const nd::Tensor<float>& pred, const nd::Tensor<float>& truth,
                          int class_id) {
  if (pred.shape() != truth.shape())
    throw ShapeMismatch("eval: prediction " + nd::shape_str(pred.shape()) + " vs truth " +
                        nd::shape_str(truth.shape()));
  Counts& c = per_class_[class_id];
  auto pv = pred.values();
  auto tv = truth.values();
  for (size_t i = 0; i < pv.size(); ++i) {
    bool p = pv[i] > 0.5f, t = tv[i] > 0.5f;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  ++c.episodes;
}

double EvalAccumulator::iou(int class_id) const {
  auto it = per_class_.find(class_id);
  if (it == per_class_.end()) throw BadConfig("no episodes recorded for class " +
                                              std::to_string(class_id));
  const Counts& c = it->second;
  int64_t denom = c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : double(c.tp) / double(denom);
}

double EvalAccumulator::miou() const {
  if (per_class_.empty()) throw BadConfig("no episodes recorded");
  double s = 0;
  for (const auto& [cls, c] : per_class_) s += iou(cls);
  return s / double(per_class_.size());
}

std::vector<int> EvalAccumulator::classes() const {
  std::vector<int> out;
  for (const auto& [cls, c] : per_class_) out.push_back(cls);
  return out;
}

int64_t EvalAccumulator::episodes(int class_id) const { return per_class_.at(class_id).episodes; }
int64_t EvalAccumulator::tp(int class_id) const { return per_class_.at(class_id).tp; }
int64_t EvalAccumulator::fp(int class_id) const { return per_class_.at(class_id).fp; }
int64_t EvalAccumulator::fn(int class_id) const { return per_class_.at(class_id).fn; }

EvalReport evaluate(const ModelBundle& bundle, const Dataset& ds, const FoldProtocol& protocol,
                    int shots, int64_t episodes_per_class, uint64_t seed,
                    const std::vector<int>& trained_classes) {
  protocol.validate();
  if (episodes_per_class < 1) throw BadConfig("episodes_per_class must be >= 1");
  auto held_out = protocol.test_classes();
  for (int cls : held_out)
    if (std::find(trained_classes.begin(), trained_classes.end(), cls) != trained_classes.end())
      throw FoldLeak("class " + std::to_string(cls) + " was trained on and is held out");

  EvalAccumulator acc;
  for (int cls : held_out) {
    for (int64_t e = 0; e < episodes_per_class; ++e) {
      EpisodeSpec ep = sample_episode_for_class(ds, cls, shots, seed, uint64_t(e));
      try {
        EpisodeForward fwd = forward_episode(bundle, ds, ep);
        nd::Tensor<float> pred = binarize(fwd.final_);
        nd::Tensor<float> truth = downsample_mask_nearest(
            sample_at(ds, ep.query).mask, pred.shape()[0], pred.shape()[1]);
        acc.add(pred, truth, cls);
      } catch (const EmptyEpisode&) {
        // counted episodes reflect only evaluable draws
      }
    }
    if (std::find(acc.classes().begin(), acc.classes().end(), cls) == acc.classes().end())
      throw EmptyEpisode("class " + std::to_string(cls) +
                         " produced no evaluable episodes");
  }

  EvalReport report;
  for (int cls : held_out) {
    EvalReport::Row row;
    row.class_id = cls;
    row.iou = acc.iou(cls);
    row.episodes = acc.episodes(cls);
    row.tp = acc.tp(cls);
    row.fp = acc.fp(cls);
    row.fn = acc.fn(cls);
    report.rows.push_back(row);
  }
  std::sort(report.rows.begin(), report.rows.end(),
            [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
  report.miou = acc.miou();
  return report;
}

std::string metrics_jsonl(const EvalReport& report, int fold) {
  std::string out;
  for (const auto& row : report.rows) {
    nlohmann::json j;
    j["fold"] = fold;
    j["class_id"] = row.class_id;
    j["iou"] = row.iou;
    j["episodes"] = row.episodes;
    out += j.dump() + "\n";
  }
  return out;
}

std::string summary_csv(const std::vector<double>& fold_mious) {
  if (fold_mious.empty()) throw BadConfig("no folds to summarize");
  std::ostringstream header, values;
  char buf[32];
  double sum = 0;
  for (size_t f = 0; f < fold_mious.size(); ++f) {
    header << "fold-" << f << ",";
    std::snprintf(buf, sizeof buf, "%.4f", fold_mious[f]);
    values << buf << ",";
    sum += fold_mious[f];
  }
  header << "mean\n";
  std::snprintf(buf, sizeof buf, "%.4f", sum / double(fold_mious.size()));
  values << buf << "\n";
  return header.str() + values.str();
}

}  // namespace fsseg
