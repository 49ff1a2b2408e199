#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "fsseg/distill.hpp"
#include "fsseg/io.hpp"
#include "fsseg/nd/grad_check.hpp"

using namespace fsseg;
namespace fs = std::filesystem;

namespace {

EncoderConfig toy_encoder_cfg() {
  EncoderConfig cfg;
  cfg.num_layers = 6;
  cfg.embed_dim = 64;
  cfg.patch_size = 8;
  cfg.num_heads = 4;
  cfg.input_resolution = 64;
  cfg.seed = 11;
  return cfg;
}

AdapterConfig toy_adapter_cfg() {
  AdapterConfig cfg;
  cfg.in_channels = 64;
  cfg.mid_channels = 16;
  cfg.out_channels = 32;
  cfg.attn_ffn_dim = 32;
  cfg.num_attn_blocks = 2;
  cfg.num_heads = 4;
  return cfg;
}

double untrained_corpus_loss(const EncoderConfig& ecfg, int low_layer, TeacherSource& teacher,
                             const AdapterConfig& acfg, uint64_t adapter_seed,
                             const std::vector<nd::Tensor<float>>& corpus, int64_t res) {
  auto fresh = make_adapter<float>(acfg, adapter_seed);
  EncoderConfig cfg = ecfg;
  cfg.input_resolution = res;
  ToyEncoder enc(cfg);
  double total = 0;
  for (size_t i = 0; i < corpus.size(); ++i) {
    auto img = res == corpus[i].shape()[0] ? corpus[i] : nd::bilinear_upsample(corpus[i], res, res);
    auto fs = enc.encode(img);
    auto f_low = fs.layers[low_layer];
    auto tgt = teacher.target(img, f_low, res, int64_t(i));
    total += double(distill_loss(adapter_forward(f_low, fresh), tgt).item());
  }
  return total / double(corpus.size());
}

}  // namespace

TEST_CASE("stage plans must double in resolution within tolerance") {
  DistillStagePlan p;
  p.resolutions = {126, 252, 518};  // 518/252 = 2.056, inside the 5% band
  p.validate();
  p.resolutions = {16, 32, 64};
  p.validate();
  p.resolutions = {16, 48};
  CHECK_THROWS_AS(p.validate(), BadConfig);
  p.resolutions = {32, 16};
  CHECK_THROWS_AS(p.validate(), BadConfig);
  p.resolutions = {16, 35};  // ratio 2.19
  CHECK_THROWS_AS(p.validate(), BadConfig);
  p.resolutions = {};
  CHECK_THROWS_AS(p.validate(), BadConfig);
}

TEST_CASE("full-scale plan fields survive a round trip through the struct") {
  DistillStagePlan p;
  p.resolutions = {126, 252, 518};
  p.epochs_per_stage = 15;
  p.lr = 1e-3;
  p.weight_decay = 5e-4;
  p.batch_size = 8;
  p.validate();
  CHECK(p.resolutions == std::vector<int64_t>{126, 252, 518});
  CHECK(p.epochs_per_stage == 15);
  CHECK(p.lr == doctest::Approx(1e-3));
  CHECK(p.weight_decay == doctest::Approx(5e-4));
  CHECK(p.batch_size == 8);
}

TEST_CASE("distill loss semantics and loop oracle") {
  auto a = nd::Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(distill_loss(a, a).item() == 0.0);

  auto b = nd::Tensor<double>::from_data({2, 2}, {3, 4, 5, 6});
  CHECK(distill_loss(a, b).item() == doctest::Approx(4.0));

  nd::Rng rng(3);
  std::vector<double> x(2 * 4 * 4 * 8), y(2 * 4 * 4 * 8);
  for (auto& v : x) v = rng.uniform(-2, 2);
  for (auto& v : y) v = rng.uniform(-2, 2);
  auto tx = nd::Tensor<double>::from_data({2, 4, 4, 8}, x);
  auto ty = nd::Tensor<double>::from_data({2, 4, 4, 8}, y);
  double oracle = 0;
  for (size_t i = 0; i < x.size(); ++i) oracle += (x[i] - y[i]) * (x[i] - y[i]);
  oracle /= double(x.size());
  CHECK(std::abs(distill_loss(tx, ty).item() - oracle) < 1e-7);

  auto wrong = nd::Tensor<double>::zeros({2, 4, 4, 7});
  CHECK_THROWS_AS(distill_loss(tx, wrong), ShapeMismatch);
}

TEST_CASE("a student that equals its teacher starts and stays at zero loss") {
  auto ecfg = toy_encoder_cfg();
  auto acfg = toy_adapter_cfg();
  auto adapter = make_adapter<float>(acfg, 21);
  SelfTeacher teacher(acfg, 21);

  DistillStagePlan plan;
  plan.resolutions = {32};
  plan.epochs_per_stage = 2;
  plan.lr = 1e-3;
  plan.weight_decay = 0.0;  // teacher is frozen at init; decay alone would drift
  plan.batch_size = 8;

  auto corpus = make_distill_corpus(16, 64, 5);
  auto result = run_distillation(plan, ecfg, 2, teacher, adapter, corpus, 7);
  CHECK_FALSE(result.aborted);
  CHECK(result.stage_initial_loss[0] == 0.0);
  for (const auto& rec : result.history) CHECK(rec.loss <= 1e-10);
  CHECK(result.stage_final_loss[0] <= 1e-10);
}

TEST_CASE("a linear teacher is matched to under 1e-3 within 2000 steps") {
  auto ecfg = toy_encoder_cfg();
  AdapterConfig acfg = toy_adapter_cfg();
  auto adapter = make_adapter<float>(acfg, 23);
  LinearTeacher teacher(64, acfg.out_channels, 31);

  DistillStagePlan plan;
  plan.resolutions = {32};
  plan.epochs_per_stage = 500;  // 4 steps/epoch at this corpus and batch
  plan.lr = 3e-3;
  plan.weight_decay = 0;  // decay would bias the fit away from the exact solution
  plan.batch_size = 8;

  auto corpus = make_distill_corpus(32, 64, 9);
  auto result = run_distillation(plan, ecfg, 2, teacher, adapter, corpus, 13);
  CHECK_FALSE(result.aborted);
  CHECK(int64_t(result.history.size()) <= 2000);
  INFO("initial " << result.stage_initial_loss[0] << " final " << result.stage_final_loss[0]);
  CHECK(result.stage_final_loss[0] < 1e-3);
}

TEST_CASE("three coarse-to-fine stages beat the untrained adapter by 10x") {
  auto ecfg = toy_encoder_cfg();
  auto acfg = toy_adapter_cfg();
  const uint64_t adapter_seed = 25;
  auto adapter = make_adapter<float>(acfg, adapter_seed);
  AttentionTeacher teacher(8, 32, acfg.out_channels, 4, 33);

  DistillStagePlan plan;
  plan.resolutions = {16, 32, 64};
  plan.epochs_per_stage = 12;
  plan.lr = 1e-3;
  plan.weight_decay = 5e-4;
  plan.batch_size = 8;

  auto corpus = make_distill_corpus(48, 64, 17);
  auto result = run_distillation(plan, ecfg, 2, teacher, adapter, corpus, 19);
  CHECK_FALSE(result.aborted);
  REQUIRE(result.stage_final_loss.size() == 3);

  double untrained = untrained_corpus_loss(ecfg, 2, teacher, acfg, adapter_seed, corpus, 64);
  INFO("untrained " << untrained << " trained " << result.stage_final_loss[2]);
  CHECK(result.stage_final_loss[2] <= 0.1 * untrained);

  // encoder unchanged by the whole procedure
  ToyEncoder enc(ecfg);
  auto before = enc.encode(corpus[0]);
  auto after = enc.encode(corpus[0]);
  for (size_t l = 0; l < before.layers.size(); ++l)
    for (int64_t i = 0; i < before.layers[l].size(); ++i)
      CHECK(before.layers[l].values()[i] == after.layers[l].values()[i]);
}

TEST_CASE("distillation is deterministic for a fixed seed") {
  auto ecfg = toy_encoder_cfg();
  auto acfg = toy_adapter_cfg();
  DistillStagePlan plan;
  plan.resolutions = {16, 32};
  plan.epochs_per_stage = 2;
  plan.lr = 1e-3;
  plan.weight_decay = 5e-4;
  plan.batch_size = 8;
  auto corpus = make_distill_corpus(16, 32, 27);

  auto run = [&]() {
    auto adapter = make_adapter<float>(acfg, 29);
    LinearTeacher teacher(64, acfg.out_channels, 35);
    auto res = run_distillation(plan, ecfg, 2, teacher, adapter, corpus, 41);
    return std::pair{res, io::hash_params(adapter.store.items())};
  };
  auto [r1, h1] = run();
  auto [r2, h2] = run();
  CHECK(h1 == h2);
  REQUIRE(r1.history.size() == r2.history.size());
  for (size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].loss == r2.history[i].loss);
    CHECK(r1.history[i].stage == r2.history[i].stage);
  }
}

TEST_CASE("file-backed teachers must cover every stage resolution") {
  auto ecfg = toy_encoder_cfg();
  auto acfg = toy_adapter_cfg();
  auto adapter = make_adapter<float>(acfg, 43);
  auto corpus = make_distill_corpus(8, 32, 45);

  auto dir = fs::temp_directory_path() / "fsseg_test_distill_files";
  fs::create_directories(dir);

  // write teacher targets for resolution 16 only
  EncoderConfig e16 = ecfg;
  e16.input_resolution = 16;
  ToyEncoder enc16(e16);
  LinearTeacher generator(64, acfg.out_channels, 47);
  std::map<int64_t, std::vector<std::string>> manifests;
  for (size_t i = 0; i < corpus.size(); ++i) {
    auto img = nd::bilinear_upsample(corpus[i], 16, 16);
    auto f_low = enc16.encode(img).layers[2];
    FeatureStack one;
    one.resolution = 16;
    one.layers.push_back(generator.target(img, f_low, 16, int64_t(i)));
    std::string m = (dir / ("t16_" + std::to_string(i) + ".manifest")).string();
    save_feature_file(m, one);
    manifests[16].push_back(m);
  }
  FileTeacher teacher(std::move(manifests));

  DistillStagePlan plan;
  plan.resolutions = {16, 32};
  plan.epochs_per_stage = 1;
  plan.lr = 1e-3;
  plan.weight_decay = 5e-4;
  plan.batch_size = 8;
  CHECK_THROWS_AS(run_distillation(plan, ecfg, 2, teacher, adapter, corpus, 49),
                  MissingTeacherResolution);

  plan.resolutions = {16};
  auto result = run_distillation(plan, ecfg, 2, teacher, adapter, corpus, 49);
  CHECK_FALSE(result.aborted);
  CHECK(result.history.size() == 1);
}

TEST_CASE("a diverging run aborts and restores the last good parameters") {
  auto ecfg = toy_encoder_cfg();
  auto acfg = toy_adapter_cfg();
  auto adapter = make_adapter<float>(acfg, 51);
  LinearTeacher teacher(64, acfg.out_channels, 53);

  DistillStagePlan plan;
  plan.resolutions = {16};
  plan.epochs_per_stage = 4;
  plan.lr = 1e18;  // guaranteed blow-up after the first update
  plan.weight_decay = 0;
  plan.batch_size = 8;

  auto corpus = make_distill_corpus(8, 16, 55);
  auto result = run_distillation(plan, ecfg, 2, teacher, adapter, corpus, 57);
  CHECK(result.aborted);
  CHECK(result.history.size() < 4);
  for (const auto& [name, t] : adapter.store.items())
    nd::check_finite<float>(t.values(), "restored");
}

TEST_CASE("corpus must hold at least one batch") {
  auto ecfg = toy_encoder_cfg();
  auto acfg = toy_adapter_cfg();
  auto adapter = make_adapter<float>(acfg, 59);
  LinearTeacher teacher(64, acfg.out_channels, 61);
  DistillStagePlan plan;
  plan.resolutions = {16};
  plan.batch_size = 8;
  auto corpus = make_distill_corpus(4, 16, 63);
  CHECK_THROWS_AS(run_distillation(plan, ecfg, 2, teacher, adapter, corpus, 65),
                  InsufficientSamples);
}

TEST_CASE("history serializes as csv") {
  DistillResult r;
  r.history = {{0, 0, 0.5}, {1, 0, 0.25}, {2, 1, 0.125}};
  auto csv = distill_history_csv(r);
  CHECK(csv == "step,stage,loss\n0,0,0.5\n1,0,0.25\n2,1,0.125\n");
}
