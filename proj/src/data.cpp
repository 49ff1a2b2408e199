#include "fsseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fsseg/io.hpp"

namespace fsseg {

namespace {

constexpr double kMinCoverage = 0.01;
constexpr double kMaxCoverage = 0.90;

struct ShapePose {
  double cx, cy, size, aspect, angle_steps;  // angle in quarter turns for bars
};

// paint family into buf (1 = inside) without clearing it
void rasterize(std::vector<float>& buf, int64_t R, ShapeFamily family, const ShapePose& pose,
               nd::Rng& rng) {
  auto at = [&](int64_t y, int64_t x) -> float& { return buf[y * R + x]; };
  double cx = pose.cx, cy = pose.cy, r = pose.size;
  switch (family) {
    case ShapeFamily::Disk: {
      for (int64_t y = 0; y < R; ++y)
        for (int64_t x = 0; x < R; ++x)
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) at(y, x) = 1;
      break;
    }
    case ShapeFamily::Ring: {
      double inner = 0.55 * r;
      for (int64_t y = 0; y < R; ++y)
        for (int64_t x = 0; x < R; ++x) {
          double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          if (d2 <= r * r && d2 >= inner * inner) at(y, x) = 1;
        }
      break;
    }
    case ShapeFamily::Triangle: {
      double ax = cx, ay = cy - r;
      double bx = cx - 0.9 * r, by = cy + 0.75 * r;
      double ex = cx + 0.9 * r, ey = cy + 0.75 * r;
      auto side = [](double px, double py, double x1, double y1, double x2, double y2) {
        return (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2);
      };
      for (int64_t y = 0; y < R; ++y)
        for (int64_t x = 0; x < R; ++x) {
          double d1 = side(x, y, ax, ay, bx, by);
          double d2 = side(x, y, bx, by, ex, ey);
          double d3 = side(x, y, ex, ey, ax, ay);
          bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
          bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
          if (!(has_neg && has_pos)) at(y, x) = 1;
        }
      break;
    }
    case ShapeFamily::Bar: {
      double half_long = r, half_short = r / pose.aspect;
      bool vertical = int64_t(pose.angle_steps) % 2 == 1;
      double hx = vertical ? half_short : half_long;
      double hy = vertical ? half_long : half_short;
      for (int64_t y = 0; y < R; ++y)
        for (int64_t x = 0; x < R; ++x)
          if (std::abs(x - cx) <= hx && std::abs(y - cy) <= hy) at(y, x) = 1;
      break;
    }
    case ShapeFamily::Cross: {
      double half_long = r, half_short = std::max(1.5, r / pose.aspect);
      for (int64_t y = 0; y < R; ++y)
        for (int64_t x = 0; x < R; ++x) {
          bool horiz = std::abs(x - cx) <= half_long && std::abs(y - cy) <= half_short;
          bool vert = std::abs(x - cx) <= half_short && std::abs(y - cy) <= half_long;
          if (horiz || vert) at(y, x) = 1;
        }
      break;
    }
    case ShapeFamily::Blob: {
      int lobes = 3 + int(rng.uniform_int(3));
      for (int i = 0; i < lobes; ++i) {
        double lr = r * rng.uniform(0.45, 0.7);
        double lx = cx + rng.uniform(-0.6, 0.6) * r;
        double ly = cy + rng.uniform(-0.6, 0.6) * r;
        for (int64_t y = 0; y < R; ++y)
          for (int64_t x = 0; x < R; ++x)
            if ((x - lx) * (x - lx) + (y - ly) * (y - ly) <= lr * lr) at(y, x) = 1;
      }
      break;
    }
  }
}

std::vector<float> draw_shape(int64_t R, const ShapeClass& sc, nd::Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<float> buf(R * R, 0.0f);
    ShapePose pose;
    pose.size = rng.uniform(sc.min_size, sc.max_size);
    double margin = pose.size + 1;
    pose.cx = rng.uniform(margin, double(R) - margin);
    pose.cy = rng.uniform(margin, double(R) - margin);
    pose.aspect = rng.uniform(3.0, 4.5);
    pose.angle_steps = double(rng.uniform_int(4));
    rasterize(buf, R, sc.family, pose, rng);
    double cov = 0;
    for (float v : buf) cov += v;
    cov /= double(R * R);
    if (cov >= kMinCoverage && cov <= kMaxCoverage) return buf;
  }
  throw Error("GenerationFailed", "shape class " + std::to_string(sc.class_id) +
                                      " cannot satisfy the coverage bounds");
}

// smooth low-frequency color field, same construction idea as the
// distillation corpus backgrounds
void paint_background(std::vector<float>& img, int64_t R, nd::Rng& rng) {
  for (int64_t c = 0; c < 3; ++c) {
    double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0);
    double px = rng.uniform(0, 2 * M_PI), py = rng.uniform(0, 2 * M_PI);
    double base = rng.uniform(0.2, 0.6), amp = rng.uniform(0.05, 0.18);
    for (int64_t y = 0; y < R; ++y)
      for (int64_t x = 0; x < R; ++x) {
        double v = base + amp * std::sin(2 * M_PI * fx * x / double(R) + px) *
                              std::cos(2 * M_PI * fy * y / double(R) + py);
        img[(y * R + x) * 3 + c] = float(v);
      }
  }
}

void paint_shape(std::vector<float>& img, const std::vector<float>& shape, int64_t R,
                 const std::array<float, 3>& color, nd::Rng& tex) {
  for (int64_t p = 0; p < R * R; ++p) {
    if (shape[p] == 0) continue;
    for (int64_t c = 0; c < 3; ++c) {
      double v = double(color[c]) + tex.uniform(-0.08, 0.08);
      img[p * 3 + c] = float(std::clamp(v, 0.0, 1.0));
    }
  }
}

float quantize(float v) { return float(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f; }

double mask_iou(const nd::Tensor<float>& a, const nd::Tensor<float>& b) {
  int64_t inter = 0, uni = 0;
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) {
    bool fa = av[i] > 0.5f, fb = bv[i] > 0.5f;
    inter += fa && fb;
    uni += fa || fb;
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

std::vector<ShapeClass> build_classes(int num_classes, int64_t R, nd::Rng& rng) {
  // distinct hues around the color wheel so class appearance separates
  auto hue_color = [](double h) -> std::array<float, 3> {
    auto f = [&](double shift) {
      double t = std::fmod(h + shift, 1.0) * 6.0;
      double v = std::clamp(std::min(t, 4.0 - t), 0.0, 1.0);
      return float(0.25 + 0.65 * v);
    };
    return {f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)};
  };
  const double unit = double(R) / 64.0;  // size ranges written for R=64
  std::vector<ShapeClass> out;
  for (int i = 0; i < num_classes; ++i) {
    ShapeClass sc;
    sc.class_id = i;
    sc.family = ShapeFamily(i % 6);
    bool second_round = i >= 6;
    // the second pass over the families uses a different size band
    sc.min_size = (second_round ? 7.0 : 9.0) * unit;
    sc.max_size = (second_round ? 10.0 : 14.0) * unit;
    sc.color = hue_color(double(i) / double(num_classes));
    sc.texture_seed = rng.raw();
    out.push_back(sc);
  }
  return out;
}

}  // namespace

std::vector<int64_t> Dataset::class_sample_indices(int class_id) const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < samples.size(); ++i)
    if (samples[i].class_id == class_id) out.push_back(int64_t(i));
  return out;
}

std::vector<int> Dataset::class_ids() const {
  std::vector<int> out;
  for (const auto& c : classes) out.push_back(c.class_id);
  return out;
}

Dataset generate_dataset(int num_classes, int per_class, int64_t resolution, uint64_t seed) {
  if (num_classes < 8)
    throw BadConfig("generate_dataset: need at least 8 classes for 4-fold protocols");
  if (per_class < 1 || resolution < 16) throw BadConfig("generate_dataset: degenerate sizes");
  const int64_t R = resolution;
  nd::Rng meta(nd::Rng::mix(seed, 0xDA7A));
  Dataset ds;
  ds.resolution = R;
  ds.classes = build_classes(num_classes, R, meta);

  for (int ci = 0; ci < num_classes; ++ci) {
    const ShapeClass& sc = ds.classes[ci];
    nd::Rng tex(sc.texture_seed);
    for (int si = 0; si < per_class; ++si) {
      nd::Rng rng(nd::Rng::mix(seed, uint64_t(ci) * 100000 + uint64_t(si)));
      std::vector<float> img(R * R * 3, 0.0f);
      paint_background(img, R, rng);

      int distractors = rng.uniform() < 0.75 ? 1 + int(rng.uniform_int(2)) : 0;
      for (int d = 0; d < distractors; ++d) {
        int other = int(rng.uniform_int(num_classes - 1));
        if (other >= ci) ++other;
        auto dshape = draw_shape(R, ds.classes[other], rng);
        paint_shape(img, dshape, R, ds.classes[other].color, tex);
      }

      auto fg = draw_shape(R, sc, rng);
      paint_shape(img, fg, R, sc.color, tex);
      for (auto& v : img) v = quantize(v);

      Sample s;
      s.image = nd::Tensor<float>::from_data({R, R, 3}, std::move(img));
      s.mask = nd::Tensor<float>::from_data({R, R}, std::move(fg));
      s.class_id = ci;
      s.num_distractors = distractors;
      ds.samples.push_back(std::move(s));
    }
  }

  // class-distinctness audit: instances of different classes must overlap
  // weakly even though they share the canvas distribution
  const int probe = std::min(per_class, 6);
  double iou_sum = 0;
  int64_t iou_n = 0;
  for (int a = 0; a < num_classes; ++a)
    for (int b = a + 1; b < num_classes; ++b)
      for (int i = 0; i < probe; ++i)
        for (int j = 0; j < probe; ++j) {
          iou_sum += mask_iou(ds.samples[size_t(a) * size_t(per_class) + size_t(i)].mask,
                              ds.samples[size_t(b) * size_t(per_class) + size_t(j)].mask);
          ++iou_n;
        }
  if (iou_n > 0 && iou_sum / double(iou_n) >= 0.3)
    throw Error("GenerationFailed", "cross-class instances overlap too strongly");
  return ds;
}

namespace {

EpisodeSpec draw_episode(const Dataset& ds, int class_id, int k, uint64_t seed, nd::Rng& rng) {
  auto pool = ds.class_sample_indices(class_id);
  if (pool.size() < size_t(k) + 1)
    throw InsufficientSamples("class " + std::to_string(class_id) + " has " +
                              std::to_string(pool.size()) + " samples, episode needs " +
                              std::to_string(k + 1));
  rng.shuffle(pool.begin(), pool.end());
  EpisodeSpec ep;
  ep.class_id = class_id;
  ep.support.assign(pool.begin(), pool.begin() + k);
  ep.query = pool[size_t(k)];
  ep.seed = seed;
  return ep;
}

}  // namespace

EpisodeSpec sample_episode(const Dataset& ds, const FoldProtocol& protocol, Split split, int k,
                           uint64_t seed, uint64_t index) {
  if (k < 1) throw BadConfig("sample_episode: k must be >= 1");
  auto classes = split == Split::Train ? protocol.train_classes() : protocol.test_classes();
  if (classes.empty()) throw BadConfig("sample_episode: split has no classes");
  nd::Rng rng(nd::Rng::mix(seed, 0xE915 + index * 0x9E37));
  int class_id = classes[size_t(rng.uniform_int(int64_t(classes.size())))];
  return draw_episode(ds, class_id, k, seed, rng);
}

EpisodeSpec sample_episode_for_class(const Dataset& ds, int class_id, int k, uint64_t seed,
                                     uint64_t index) {
  if (k < 1) throw BadConfig("sample_episode_for_class: k must be >= 1");
  nd::Rng rng(nd::Rng::mix(seed, 0xC1A5 + index * 0x9E37 + uint64_t(class_id) * 0x85EB));
  return draw_episode(ds, class_id, k, seed, rng);
}

Sample augment_sample(const Sample& s, uint64_t seed) {
  const int64_t R = s.image.shape()[0];
  nd::Rng rng(nd::Rng::mix(seed, 0xA06));
  std::vector<float> img(s.image.values().begin(), s.image.values().end());
  std::vector<float> mask(s.mask.values().begin(), s.mask.values().end());

  auto apply_geometry = [&](auto&& map_src) {
    std::vector<float> ni(R * R * 3), nm(R * R);
    for (int64_t y = 0; y < R; ++y)
      for (int64_t x = 0; x < R; ++x) {
        auto [sy, sx] = map_src(y, x);
        for (int64_t c = 0; c < 3; ++c) ni[(y * R + x) * 3 + c] = img[(sy * R + sx) * 3 + c];
        nm[y * R + x] = mask[sy * R + sx];
      }
    img = std::move(ni);
    mask = std::move(nm);
  };

  if (rng.uniform() < 0.5)
    apply_geometry([&](int64_t y, int64_t x) { return std::pair{y, R - 1 - x}; });

  int quarter = int(rng.uniform_int(4));
  for (int q = 0; q < quarter; ++q)
    apply_geometry([&](int64_t y, int64_t x) { return std::pair{x, R - 1 - y}; });

  if (rng.uniform() < 0.5) {
    // crop a sub-window and scale it back up with nearest-neighbor lookup
    double frac = rng.uniform(0.7, 0.95);
    int64_t side = std::max<int64_t>(8, int64_t(frac * double(R)));
    int64_t oy = rng.uniform_int(R - side + 1), ox = rng.uniform_int(R - side + 1);
    apply_geometry([&](int64_t y, int64_t x) {
      int64_t sy = oy + std::min(side - 1, y * side / R);
      int64_t sx = ox + std::min(side - 1, x * side / R);
      return std::pair{sy, sx};
    });
  }

  if (rng.uniform() < 0.3) {
    // image-only 3x3 box blur; the mask must stay binary
    std::vector<float> blurred(R * R * 3);
    for (int64_t y = 0; y < R; ++y)
      for (int64_t x = 0; x < R; ++x)
        for (int64_t c = 0; c < 3; ++c) {
          double acc = 0;
          int n = 0;
          for (int64_t dy = -1; dy <= 1; ++dy)
            for (int64_t dx = -1; dx <= 1; ++dx) {
              int64_t yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= R || xx < 0 || xx >= R) continue;
              acc += img[(yy * R + xx) * 3 + c];
              ++n;
            }
          blurred[(y * R + x) * 3 + c] = float(acc / n);
        }
    img = std::move(blurred);
  }

  Sample out;
  out.image = nd::Tensor<float>::from_data({R, R, 3}, std::move(img));
  out.mask = nd::Tensor<float>::from_data({R, R}, std::move(mask));
  out.class_id = s.class_id;
  out.num_distractors = s.num_distractors;
  return out;
}

void save_mask(const std::string& path, const nd::Tensor<float>& mask) {
  if (mask.shape().size() != 2) throw ShapeMismatch("save_mask: mask must be [H,W]");
  io::GrayImage img;
  img.h = mask.shape()[0];
  img.w = mask.shape()[1];
  img.pixels.resize(mask.size());
  for (int64_t i = 0; i < mask.size(); ++i)
    img.pixels[size_t(i)] = mask.values()[size_t(i)] >= 0.5f ? 255 : 0;
  io::save_pgm(path, img);
}

nd::Tensor<float> load_mask(const std::string& path) {
  io::GrayImage img;
  try {
    img = io::load_pgm(path);
  } catch (const BadMagic& e) {
    throw BadFormat(e.what());
  } catch (const TruncatedFile& e) {
    throw BadFormat(e.what());
  }
  std::vector<float> v(img.pixels.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] >= 128 ? 1.0f : 0.0f;
  return nd::Tensor<float>::from_data({img.h, img.w}, std::move(v));
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir);

  std::ostringstream index;
  index << "classes " << ds.classes.size() << " resolution " << ds.resolution << "\n";
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    std::string stem = "sample_" + std::to_string(i);
    io::RgbImage img;
    img.h = ds.resolution;
    img.w = ds.resolution;
    img.pixels.resize(size_t(ds.resolution * ds.resolution * 3));
    for (size_t p = 0; p < img.pixels.size(); ++p)
      img.pixels[p] = uint8_t(std::lround(std::clamp(s.image.values()[p], 0.0f, 1.0f) * 255.0f));
    io::save_ppm(dir + "/" + stem + ".ppm", img);
    save_mask(dir + "/" + stem + ".pgm", s.mask);
    index << i << " " << s.class_id << " " << stem << ".ppm " << stem << ".pgm "
          << s.num_distractors << "\n";
  }
  std::ofstream os(dir + "/index.txt", std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + dir + "/index.txt");
  os << index.str();
  if (!os) throw IoError("write failed: " + dir + "/index.txt");
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream is(dir + "/index.txt", std::ios::binary);
  if (!is) throw IoError("cannot open: " + dir + "/index.txt");
  std::string word;
  int64_t num_classes = 0;
  Dataset ds;
  is >> word >> num_classes >> word >> ds.resolution;
  if (!is || num_classes <= 0 || ds.resolution <= 0)
    throw BadFormat(dir + "/index.txt: bad header");
  for (int64_t i = 0; i < num_classes; ++i) {
    ShapeClass sc;
    sc.class_id = int(i);
    ds.classes.push_back(sc);  // generator parameters are not persisted
  }
  int64_t id, class_id;
  int distract;
  std::string img_rel, mask_rel;
  while (is >> id >> class_id >> img_rel >> mask_rel >> distract) {
    io::RgbImage img = io::load_ppm(dir + "/" + img_rel);
    Sample s;
    std::vector<float> v(img.pixels.size());
    for (size_t p = 0; p < v.size(); ++p) v[p] = float(img.pixels[p]) / 255.0f;
    s.image = nd::Tensor<float>::from_data({img.h, img.w, 3}, std::move(v));
    s.mask = load_mask(dir + "/" + mask_rel);
    s.class_id = int(class_id);
    s.num_distractors = distract;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace fsseg
