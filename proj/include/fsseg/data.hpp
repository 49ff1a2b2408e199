#pragma once

#include <array>
#include <string>
#include <vector>

#include "fsseg/error.hpp"
#include "fsseg/nd/rng.hpp"
#include "fsseg/nd/tensor.hpp"
#include "fsseg/protocol.hpp"

// Synthetic few-shot segmentation corpus: procedurally drawn shape classes
// with textured backgrounds and cross-class distractors, deterministic
// episodic sampling, and PGM mask I/O.
namespace fsseg {

enum class ShapeFamily { Disk, Ring, Triangle, Bar, Cross, Blob };

struct ShapeClass {
  int class_id = -1;
  ShapeFamily family = ShapeFamily::Disk;
  double min_size = 0, max_size = 0;  // radius-like extent in pixels
  std::array<float, 3> color{};
  uint64_t texture_seed = 0;
};

struct Sample {
  nd::Tensor<float> image;  // [R,R,3] in [0,1]
  nd::Tensor<float> mask;   // [R,R] in {0,1}
  int class_id = -1;
  int num_distractors = 0;
};

struct Dataset {
  std::vector<ShapeClass> classes;
  std::vector<Sample> samples;
  int64_t resolution = 0;

  std::vector<int64_t> class_sample_indices(int class_id) const;
  std::vector<int> class_ids() const;
};

// Deterministic in seed. Backgrounds carry low-frequency color fields plus
// noise; most samples also contain at least one off-class distractor shape.
// Every mask covers between 1% and 90% of the pixels, and instances of
// different classes overlap weakly (mean pairwise IoU < 0.3, checked here).
Dataset generate_dataset(int num_classes, int per_class, int64_t resolution, uint64_t seed);

enum class Split { Train, Test };

struct EpisodeSpec {
  int class_id = -1;
  std::vector<int64_t> support;  // sample indices, K entries
  int64_t query = -1;            // distinct from every support entry
  uint64_t seed = 0;
};

// Deterministic in (seed, index): class uniform over the split's classes,
// then K+1 distinct samples of that class.
EpisodeSpec sample_episode(const Dataset& ds, const FoldProtocol& protocol, Split split, int k,
                           uint64_t seed, uint64_t index);

// episode pinned to one class, for per-class evaluation
EpisodeSpec sample_episode_for_class(const Dataset& ds, int class_id, int k, uint64_t seed,
                                     uint64_t index);

// sample_episode with a running call index
class EpisodeSampler {
 public:
  EpisodeSampler(const Dataset& ds, FoldProtocol protocol, Split split, int k, uint64_t seed)
      : ds_(&ds), protocol_(std::move(protocol)), split_(split), k_(k), seed_(seed) {}

  EpisodeSpec next() { return sample_episode(*ds_, protocol_, split_, k_, seed_, index_++); }
  uint64_t index() const { return index_; }

 private:
  const Dataset* ds_;
  FoldProtocol protocol_;
  Split split_;
  int k_;
  uint64_t seed_;
  uint64_t index_ = 0;
};

// Deterministic, seed-driven episode-time transforms: horizontal flip,
// quarter-turn rotation, crop-and-resize, image-only box blur. Masks use
// nearest-neighbor resampling and stay binary.
Sample augment_sample(const Sample& s, uint64_t seed);

// PGM P5 masks: writes {0,255}; on read, any value >= 128 is foreground.
// A malformed file surfaces as BadFormat.
void save_mask(const std::string& path, const nd::Tensor<float>& mask);
nd::Tensor<float> load_mask(const std::string& path);

// Directory layout: index.txt plus one PPM image and PGM mask per sample.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace fsseg
