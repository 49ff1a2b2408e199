#pragma once

#include <string>
#include <vector>

#include "fsseg/encoder.hpp"
#include "fsseg/nd/tensor.hpp"

// Feature-space diagnostics that drive the choice of the adapter's source
// layer: cosine self-similarity maps and a probe-based match score between
// each student layer and a teacher feature map.
namespace fsseg {

struct SelfSimilarityMap {
  nd::Tensor<float> values;  // [H*W, H*W], row i = similarities of cell i
  int64_t grid_h = 0, grid_w = 0;
  int source_layer = -1;
};

struct LayerMatchReport {
  std::vector<double> per_layer_score;
  int selected_layer = -1;
};

// values[i][j] = <F_i,F_j> / (|F_i||F_j| + eps), eps = 1e-8, cells flattened
// row-major. Scale-invariant; zero vectors score 0 against everything.
SelfSimilarityMap self_similarity(const nd::Tensor<float>& fmap, int source_layer = -1);

// Draws `probes` anchor cells from a seeded uniform choice over the grid.
// For each student layer, scores the mean cosine similarity between the
// layer's similarity row and the teacher's at the same anchors; the selected
// layer is the argmax (lowest index wins ties).
LayerMatchReport select_low_layer(const FeatureStack& student,
                                  const nd::Tensor<float>& teacher_map, int probes,
                                  uint64_t seed);

// Writes the anchor's similarity row as an H x W grayscale PGM, min-max
// normalized to [0,255].
void ssm_heatmap(const SelfSimilarityMap& ssm, int64_t row, int64_t col,
                 const std::string& path);

std::string layer_match_report_json(const LayerMatchReport& rep);

}  // namespace fsseg
