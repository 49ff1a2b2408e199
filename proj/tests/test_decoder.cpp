#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "fsseg/decoder.hpp"
#include "fsseg/nd/grad_check.hpp"

using namespace fsseg;

namespace {

template <typename T>
nd::Tensor<T> rand_tensor(nd::Rng& rng, nd::Shape shape, double s = 1.0) {
  std::vector<T> v(nd::numel(shape));
  for (auto& e : v) e = T(rng.uniform(-s, s));
  return nd::Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <typename T>
DecoderInputs<T> rand_inputs(nd::Rng& rng, int64_t h, int64_t w, int64_t c) {
  DecoderInputs<T> in;
  in.image_embedding = rand_tensor<T>(rng, {h, w, c});
  in.sparse.values = rand_tensor<T>(rng, {1, c});
  std::vector<T> d(4 * h * 4 * w);
  for (auto& e : d) e = T(rng.uniform(0.05, 0.95));
  in.dense.values = nd::Tensor<T>::from_data({1, 4 * h, 4 * w}, std::move(d));
  return in;
}

template <typename T>
void zero_store(nd::ParamStore<T>& ps) {
  for (auto& [name, t] : ps.items()) {
    auto r = t.raw();
    std::fill(r.begin(), r.end(), T(0));
  }
}

// copy the kx=0 slab of a [kh,2,Ci,Co] kernel over kx=1 so the conv commutes
// with horizontal flips
template <typename T>
void symmetrize_kernel(nd::Tensor<T>& w) {
  const auto& s = w.shape();
  REQUIRE(s.size() == 4);
  if (s[1] != 2) return;
  auto r = w.raw();
  int64_t inner = s[2] * s[3];
  for (int64_t ky = 0; ky < s[0]; ++ky)
    for (int64_t i = 0; i < inner; ++i) r[(ky * 2 + 1) * inner + i] = r[(ky * 2) * inner + i];
}

DecoderConfig small_config() {
  DecoderConfig cfg;
  cfg.channels = 8;
  cfg.num_heads = 2;
  cfg.num_blocks = 2;
  cfg.ffn_hidden = 16;
  cfg.dense_hidden = 4;
  return cfg;
}

}  // namespace

TEST_CASE("all-zero parameters give a uniform 0.5 map") {
  auto params = make_decoder<double>(small_config(), 7);
  zero_store(params.store);
  nd::Rng rng(11);
  auto in = rand_inputs<double>(rng, 3, 5, 8);
  auto out = decode(in, params);
  REQUIRE(out.values.shape() == nd::Shape{12, 20});
  for (double v : out.values.values()) CHECK(v == 0.5);
}

TEST_CASE("output grid is exactly 4x the embedding grid") {
  DecoderConfig cfg;  // defaults: 32 channels
  auto params = make_decoder<float>(cfg, 21);
  nd::Rng rng(22);

  auto in = rand_inputs<float>(rng, 8, 8, 32);
  auto out = decode(in, params);
  CHECK(out.values.shape() == nd::Shape{32, 32});

  auto in2 = rand_inputs<float>(rng, 4, 6, 32);
  auto out2 = decode(in2, params);
  CHECK(out2.values.shape() == nd::Shape{16, 24});

  for (float v : out.values.values()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
}

TEST_CASE("same seed reproduces the decoder bit for bit") {
  auto a = make_decoder<float>(small_config(), 99);
  auto b = make_decoder<float>(small_config(), 99);
  auto c = make_decoder<float>(small_config(), 100);
  nd::Rng rng(5);
  auto in = rand_inputs<float>(rng, 4, 4, 8);
  auto oa = decode(in, a).values;
  auto ob = decode(in, b).values;
  auto oc = decode(in, c).values;
  bool identical = true, differs = false;
  for (size_t i = 0; i < oa.values().size(); ++i) {
    identical = identical && oa.values()[i] == ob.values()[i];
    differs = differs || oa.values()[i] != oc.values()[i];
  }
  CHECK(identical);
  CHECK(differs);
}

TEST_CASE("mismatched inputs are rejected") {
  auto params = make_decoder<float>(small_config(), 3);
  nd::Rng rng(4);
  auto good = rand_inputs<float>(rng, 4, 4, 8);
  CHECK_NOTHROW(decode(good, params));

  auto bad_dense = good;
  bad_dense.dense.values = rand_tensor<float>(rng, {1, 8, 16});
  CHECK_THROWS_AS(decode(bad_dense, params), ShapeMismatch);

  auto bad_sparse = good;
  bad_sparse.sparse.values = rand_tensor<float>(rng, {1, 16});
  CHECK_THROWS_AS(decode(bad_sparse, params), ShapeMismatch);

  auto bad_emb = good;
  bad_emb.image_embedding = rand_tensor<float>(rng, {4, 4, 16});
  CHECK_THROWS_AS(decode(bad_emb, params), ShapeMismatch);

  auto bad_rank = good;
  bad_rank.dense.values = rand_tensor<float>(rng, {16, 16});
  CHECK_THROWS_AS(decode(bad_rank, params), ShapeMismatch);
}

TEST_CASE("invalid configurations are rejected") {
  DecoderConfig cfg = small_config();
  cfg.num_heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(make_decoder<float>(cfg, 1), BadConfig);

  cfg = small_config();
  cfg.channels = 6;  // not divisible by 4
  cfg.num_heads = 2;
  CHECK_THROWS_AS(make_decoder<float>(cfg, 1), BadConfig);

  cfg = small_config();
  cfg.num_blocks = 0;
  CHECK_THROWS_AS(make_decoder<float>(cfg, 1), BadConfig);

  cfg = small_config();
  cfg.dense_hidden = 0;
  CHECK_THROWS_AS(make_decoder<float>(cfg, 1), BadConfig);
}

TEST_CASE("horizontal flip commutes through the decoder without position codes") {
  DecoderConfig cfg = small_config();
  cfg.position_codes = false;
  auto params = make_decoder<double>(cfg, 31);
  symmetrize_kernel(*params.store.find("dense1.w"));
  symmetrize_kernel(*params.store.find("dense2.w"));
  symmetrize_kernel(*params.store.find("up1.w"));
  symmetrize_kernel(*params.store.find("up2.w"));

  nd::Rng rng(32);
  auto in = rand_inputs<double>(rng, 4, 6, 8);
  DecoderInputs<double> flipped;
  flipped.image_embedding = nd::flip(in.image_embedding, 1);
  flipped.sparse = in.sparse;
  flipped.dense.values = nd::flip(in.dense.values, 2);

  auto base = decode(in, params).values;
  auto mirrored = decode(flipped, params).values;
  auto expect = nd::flip(base, 1);
  double max_diff = 0;
  for (size_t i = 0; i < expect.values().size(); ++i)
    max_diff = std::max(max_diff, std::abs(expect.values()[i] - mirrored.values()[i]));
  CHECK(max_diff < 1e-9);

  // with position codes on, pixels are no longer interchangeable and the
  // same relation breaks
  cfg.position_codes = true;
  auto coded = make_decoder<double>(cfg, 31);
  symmetrize_kernel(*coded.store.find("dense1.w"));
  symmetrize_kernel(*coded.store.find("dense2.w"));
  symmetrize_kernel(*coded.store.find("up1.w"));
  symmetrize_kernel(*coded.store.find("up2.w"));
  auto base_c = decode(in, coded).values;
  auto mirrored_c = decode(flipped, coded).values;
  auto expect_c = nd::flip(base_c, 1);
  double max_diff_c = 0;
  for (size_t i = 0; i < expect_c.values().size(); ++i)
    max_diff_c = std::max(max_diff_c, std::abs(expect_c.values()[i] - mirrored_c.values()[i]));
  CHECK(max_diff_c > 1e-6);
}

TEST_CASE("full decoder gradients pass at 1e-4") {
  auto params = make_decoder<double>(small_config(), 41);
  nd::Rng rng(42);
  auto in = rand_inputs<double>(rng, 2, 2, 8);
  in.image_embedding.set_requires_grad(true);
  in.sparse.values.set_requires_grad(true);
  in.dense.values.set_requires_grad(true);

  std::vector<double> tv(8 * 8);
  for (auto& e : tv) e = rng.uniform(0, 1) < 0.5 ? 0.0 : 1.0;
  auto target = nd::Tensor<double>::from_data({8, 8}, std::move(tv));

  auto inputs = params.store.tensors();
  inputs.push_back(in.image_embedding);
  inputs.push_back(in.sparse.values);
  inputs.push_back(in.dense.values);

  auto report = nd::grad_check(
      "decoder_bce",
      [&]() {
        auto pm = decode(in, params).values;
        auto pos = nd::mul(target, nd::log_(pm));
        auto neg = nd::mul(nd::add_scalar(nd::neg(target), 1.0),
                           nd::log_(nd::add_scalar(nd::neg(pm), 1.0)));
        return nd::neg(nd::mean_all(nd::add(pos, neg)));
      },
      inputs, 1e-4, 1e-4);  // smaller steps lose the ~1e-7 attention grads to noise
  INFO(report.op_name << " max_rel_error " << report.max_rel_error << " at "
                      << report.worst_input << "[" << report.worst_index << "]");
  CHECK(report.passed);
}

TEST_CASE("binarize applies the >= threshold rule") {
  MaskProbMap<double> uniform;
  uniform.values = nd::Tensor<double>::full({3, 4}, 0.5);
  auto mask = binarize(uniform, 0.5);
  for (double v : mask.values()) CHECK(v == 1.0);

  CHECK_THROWS_AS(binarize(uniform, 0.0), BadConfig);
  CHECK_THROWS_AS(binarize(uniform, 1.0), BadConfig);
}

TEST_CASE("binarize recovers a mask stored as confident probabilities") {
  nd::Rng rng(61);
  std::vector<double> truth(64), probs(64);
  for (size_t i = 0; i < 64; ++i) {
    truth[i] = rng.uniform(0, 1) < 0.4 ? 1.0 : 0.0;
    probs[i] = truth[i] == 1.0 ? 0.99 : 0.01;
  }
  MaskProbMap<double> m;
  m.values = nd::Tensor<double>::from_data({8, 8}, std::move(probs));
  auto mask = binarize(m, 0.5);
  for (size_t i = 0; i < 64; ++i) CHECK(mask.values()[i] == truth[i]);
}

TEST_CASE("binarizing the complement map flips the mask away from ties") {
  nd::Rng rng(62);
  std::vector<double> pv(100);
  for (auto& e : pv) e = rng.uniform(0.001, 0.999);
  pv[17] = 0.5;  // a deliberate tie
  MaskProbMap<double> m, comp;
  m.values = nd::Tensor<double>::from_data({10, 10}, std::vector<double>(pv));
  std::vector<double> cv(100);
  for (size_t i = 0; i < 100; ++i) cv[i] = 1.0 - pv[i];
  comp.values = nd::Tensor<double>::from_data({10, 10}, std::move(cv));

  auto a = binarize(m, 0.5);
  auto b = binarize(comp, 0.5);
  for (size_t i = 0; i < 100; ++i) {
    if (pv[i] == 0.5) {
      CHECK(a.values()[i] == 1.0);  // ties land on foreground in both maps
      CHECK(b.values()[i] == 1.0);
    } else {
      CHECK(a.values()[i] + b.values()[i] == 1.0);
    }
  }
}
