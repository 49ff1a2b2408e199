#include "fsseg/analysis.hpp"

#include <json.hpp>

#include <cmath>

#include "fsseg/io.hpp"
#include "fsseg/nd/ops.hpp"
#include "fsseg/nd/rng.hpp"

namespace fsseg {

namespace {
constexpr double kEps = 1e-8;

// cosine between two raw similarity rows
double row_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + kEps);
}

// one row of the self-similarity matrix for a single anchor cell
std::vector<double> similarity_row(const nd::Tensor<float>& fmap, int64_t anchor) {
  int64_t H = fmap.shape()[0], W = fmap.shape()[1], C = fmap.shape()[2];
  int64_t n = H * W;
  auto v = fmap.values();
  std::vector<double> row(n);
  double nanchor = 0;
  for (int64_t c = 0; c < C; ++c) {
    double e = v[anchor * C + c];
    nanchor += e * e;
  }
  nanchor = std::sqrt(nanchor);
  for (int64_t i = 0; i < n; ++i) {
    double dot = 0, ni = 0;
    for (int64_t c = 0; c < C; ++c) {
      double e = v[i * C + c];
      dot += e * double(v[anchor * C + c]);
      ni += e * e;
    }
    row[i] = dot / (std::sqrt(ni) * nanchor + kEps);
  }
  return row;
}
}  // namespace

SelfSimilarityMap self_similarity(const nd::Tensor<float>& fmap, int source_layer) {
  if (fmap.shape().size() != 3) throw ShapeMismatch("self_similarity: expected [H,W,C]");
  int64_t H = fmap.shape()[0], W = fmap.shape()[1], C = fmap.shape()[2];
  int64_t n = H * W;
  auto v = fmap.values();
  std::vector<double> norms(n);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t c = 0; c < C; ++c) s += double(v[i * C + c]) * v[i * C + c];
    norms[i] = std::sqrt(s);
  }
  std::vector<float> out(n * n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i; j < n; ++j) {
      double dot = 0;
      for (int64_t c = 0; c < C; ++c) dot += double(v[i * C + c]) * v[j * C + c];
      float s = float(dot / (norms[i] * norms[j] + kEps));
      out[i * n + j] = s;
      out[j * n + i] = s;
    }
  SelfSimilarityMap m;
  m.values = nd::Tensor<float>::from_data({n, n}, std::move(out));
  m.grid_h = H;
  m.grid_w = W;
  m.source_layer = source_layer;
  return m;
}

LayerMatchReport select_low_layer(const FeatureStack& student,
                                  const nd::Tensor<float>& teacher_map, int probes,
                                  uint64_t seed) {
  student.validate();
  if (teacher_map.shape().size() != 3)
    throw ShapeMismatch("select_low_layer: teacher must be [H,W,C]");
  int64_t H = student.grid_h(), W = student.grid_w();
  if (teacher_map.shape()[0] != H || teacher_map.shape()[1] != W)
    throw GridMismatch("student grid " + std::to_string(H) + "x" + std::to_string(W) +
                       " vs teacher " + std::to_string(teacher_map.shape()[0]) + "x" +
                       std::to_string(teacher_map.shape()[1]));
  if (probes < 1) throw BadConfig("select_low_layer: probes must be >= 1");

  nd::Rng rng(nd::Rng::mix(seed, 0x55A));
  std::vector<int64_t> anchors(probes);
  for (auto& a : anchors) a = int64_t(rng.uniform_int(uint64_t(H * W)));

  LayerMatchReport rep;
  rep.per_layer_score.assign(student.layers.size(), 0.0);
  for (int64_t a : anchors) {
    std::vector<double> trow = similarity_row(teacher_map, a);
    for (size_t l = 0; l < student.layers.size(); ++l)
      rep.per_layer_score[l] += row_cosine(similarity_row(student.layers[l], a), trow);
  }
  for (auto& s : rep.per_layer_score) s /= probes;
  rep.selected_layer = 0;
  for (size_t l = 1; l < rep.per_layer_score.size(); ++l)
    if (rep.per_layer_score[l] > rep.per_layer_score[rep.selected_layer])
      rep.selected_layer = int(l);
  return rep;
}

void ssm_heatmap(const SelfSimilarityMap& ssm, int64_t row, int64_t col,
                 const std::string& path) {
  if (row < 0 || row >= ssm.grid_h || col < 0 || col >= ssm.grid_w)
    throw AnchorOutOfRange("anchor (" + std::to_string(row) + "," + std::to_string(col) +
                           ") outside " + std::to_string(ssm.grid_h) + "x" +
                           std::to_string(ssm.grid_w));
  int64_t n = ssm.grid_h * ssm.grid_w;
  int64_t anchor = row * ssm.grid_w + col;
  auto v = ssm.values.values();
  float lo = v[anchor * n], hi = lo;
  for (int64_t i = 0; i < n; ++i) {
    lo = std::min(lo, v[anchor * n + i]);
    hi = std::max(hi, v[anchor * n + i]);
  }
  io::GrayImage img;
  img.h = ssm.grid_h;
  img.w = ssm.grid_w;
  img.pixels.resize(n);
  float range = hi - lo;
  for (int64_t i = 0; i < n; ++i)
    img.pixels[i] = range > 0
                        ? uint8_t(std::floor((v[anchor * n + i] - lo) / range * 255.0f))
                        : 0;
  io::save_pgm(path, img);
}

std::string layer_match_report_json(const LayerMatchReport& rep) {
  nlohmann::json j;
  j["scores"] = rep.per_layer_score;
  j["selected"] = rep.selected_layer;
  return j.dump(2);
}

}  // namespace fsseg
