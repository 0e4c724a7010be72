#include <gtest/gtest.h>

#include <set>

#include "s2i/core_ops.hpp"
#include "s2i/tom.hpp"
#include "s2i/toy.hpp"
#include "support/pipeline.hpp"

using namespace s2i;
using s2i::testing::TempDir;
namespace fs = std::filesystem;

namespace {

tom::TomConfig small_config(int64_t res = 32) {
  tom::TomConfig cfg;
  cfg.resolution = res;
  cfg.g_width = 16;
  cfg.d_hidden = 32;
  cfg.batch_size = 4;
  cfg.seed = 5;
  return cfg;
}

tom::SketchStyleBank toy_bank(const fs::path& dir, int64_t n, int64_t res) {
  toy::write_sketch_bank(dir, n, {res, 9});
  return tom::SketchStyleBank::load(dir, res);
}

torch::Tensor toy_rgb(const fs::path& dir, int64_t n, int64_t res) {
  toy::write_rgb_corpus(dir, n, {res, 4});
  return tom::load_rgb_set(dir, res);
}

// Population mean / std per channel, computed without the library helpers.
std::pair<torch::Tensor, torch::Tensor> stats_oracle(const torch::Tensor& f) {
  const auto flat = f.flatten(-2);
  const auto mean = flat.mean(-1);
  const auto var = (flat - mean.unsqueeze(-1)).pow(2).mean(-1);
  return {mean, var.sqrt()};
}

}  // namespace

TEST(MakeTarget, CarriesSketchStatsAndContentLayout) {
  torch::manual_seed(0);
  const auto content = torch::randn({2, 8, 6, 6}, torch::kFloat64) * 3 + 1;
  const auto sketch = torch::randn({2, 8, 6, 6}, torch::kFloat64) * 0.5 - 2;
  const auto target = tom::make_target(content, sketch);
  const auto [tm, ts] = stats_oracle(target);
  const auto [sm, ss] = stats_oracle(sketch);
  EXPECT_LE((tm - sm).abs().max().item<double>(), 1e-6);
  EXPECT_LE((ts - ss).abs().max().item<double>(), 1e-6);
  // Per element: (c - mu_c) / sigma_c * sigma_s + mu_s.
  const auto [cm, cs] = stats_oracle(content);
  const auto expect = (content - cm.unsqueeze(-1).unsqueeze(-1)) / cs.unsqueeze(-1).unsqueeze(-1) *
                          ss.unsqueeze(-1).unsqueeze(-1) +
                      sm.unsqueeze(-1).unsqueeze(-1);
  EXPECT_LE((target - expect).abs().max().item<double>(), 1e-9);
}

TEST(MakeTarget, SelfStatsReturnInput) {
  const auto f = torch::randn({4, 5, 5}, torch::kFloat64);
  EXPECT_LE((tom::make_target(f, f) - f).abs().max().item<double>(), 1e-9);
}

TEST(MakeTarget, ConstantSketchGivesNearConstantFiniteTarget) {
  const auto content = torch::randn({3, 4, 4}, torch::kFloat64);
  const auto target = tom::make_target(content, torch::full({3, 4, 4}, 2.5, torch::kFloat64));
  EXPECT_TRUE(torch::isfinite(target).all().item<bool>());
  // Channel std of the sketch is floored at sqrt(eps).
  const double spread = std::sqrt(ops::kInstanceNormEps) * 4.0;
  EXPECT_LE((target - 2.5).abs().max().item<double>(), spread);
}

TEST(MakeTarget, RejectsChannelMismatch) {
  EXPECT_THROW(tom::make_target(torch::zeros({3, 2, 2}), torch::zeros({4, 2, 2})), std::invalid_argument);
}

TEST(Extractor, ShapesAndGrayReplication) {
  tom::PerceptualExtractor e;
  const auto rgb = torch::rand({2, 3, 32, 32}) * 2 - 1;
  const auto f = e->forward(rgb);
  EXPECT_EQ(f.sizes(), (std::vector<int64_t>{2, e->tap_channels(), 8, 8}));
  const auto gray = torch::rand({1, 1, 32, 32});
  EXPECT_TRUE(torch::allclose(e->forward(gray), e->forward(gray.expand({1, 3, 32, 32}))));
  EXPECT_EQ(e->features(rgb).size(), 3u);
}

TEST(Extractor, SeededConstructionIsReproducible) {
  tom::PerceptualExtractor a, b;
  EXPECT_EQ(data::weights_digest(*a), data::weights_digest(*b));
  tom::ExtractorConfig other;
  other.seed = 8;
  EXPECT_NE(data::weights_digest(*a), data::weights_digest(*tom::PerceptualExtractor(other)));
}

TEST(Trainer, PairingRedrawnEveryStep) {
  TempDir tmp;
  const auto rgb = toy_rgb(tmp / "rgb", 8, 32);
  const auto bank = toy_bank(tmp / "bank", 5, 32);
  tom::TomTrainer t(small_config());
  std::set<std::vector<int64_t>> seen;
  for (int i = 0; i < 6; ++i) {
    const auto r = t.step(rgb.slice(0, 0, 4), bank);
    for (auto p : r.pairing) {
      EXPECT_GE(p, 0);
      EXPECT_LT(p, 5);
    }
    seen.insert(r.pairing);
  }
  EXPECT_GT(seen.size(), 1u);
}

TEST(Trainer, SingleSketchBankPairsEverythingWithIt) {
  TempDir tmp;
  const auto rgb = toy_rgb(tmp / "rgb", 4, 32);
  const auto bank = toy_bank(tmp / "bank", 1, 32);
  tom::TomTrainer t(small_config());
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(t.step(rgb, bank).pairing, (std::vector<int64_t>{0, 0, 0, 0}));
  }
}

TEST(Trainer, TargetCarriesSketchStatsOnLiveChannels) {
  // A channel that is constant over the image has nothing to rescale, and a
  // constant sketch channel reports the std floor; every other channel must
  // take on the sketch statistics.
  TempDir tmp;
  const auto rgb = toy_rgb(tmp / "rgb", 4, 32);
  const auto bank = toy_bank(tmp / "bank", 4, 32);
  tom::TomTrainer t(small_config());
  EXPECT_TRUE(torch::isfinite(t.step(rgb, bank).target_stats_error).item<bool>());
  torch::NoGradGuard g;
  const auto fc = t.extractor()->forward(rgb).to(torch::kFloat64);
  const auto fs_ = t.extractor()->forward(bank.sketches).to(torch::kFloat64);
  const auto target = tom::make_target(fc, fs_);
  const auto [tm, ts] = stats_oracle(target);
  const auto [sm, ss] = stats_oracle(fs_);
  const auto [cm, cs] = stats_oracle(fc);
  const auto live = (cs > 1e-2) & (ss > 1e-2);
  ASSERT_GT(live.sum().item<int64_t>(), 0);
  EXPECT_LE((tm - sm).abs().max().item<double>(), 1e-6);
  EXPECT_LE((ts - ss).abs().masked_select(live).max().item<double>(), 1e-6);
}

TEST(Trainer, ExtractorFrozenAcrossSteps) {
  TempDir tmp;
  const auto rgb = toy_rgb(tmp / "rgb", 4, 32);
  const auto bank = toy_bank(tmp / "bank", 2, 32);
  tom::TomTrainer t(small_config());
  const auto before = data::weights_digest(*t.extractor());
  const auto g_before = data::weights_digest(*t.generator());
  for (int i = 0; i < 5; ++i) t.step(rgb, bank);
  EXPECT_EQ(data::weights_digest(*t.extractor()), before);
  EXPECT_NE(data::weights_digest(*t.generator()), g_before);
}

TEST(Trainer, RejectsBadInputs) {
  TempDir tmp;
  const auto bank = toy_bank(tmp / "bank", 2, 32);
  tom::TomTrainer t(small_config());
  EXPECT_THROW(t.step(torch::zeros({0, 3, 32, 32}), bank), std::invalid_argument);
  EXPECT_THROW(t.step(torch::zeros({2, 3, 64, 64}), bank), std::invalid_argument);
  EXPECT_THROW(t.step(torch::zeros({2, 3, 32, 32}), tom::SketchStyleBank{}), std::invalid_argument);
  fs::create_directories(tmp / "empty");
  EXPECT_THROW(tom::SketchStyleBank::load(tmp / "empty", 32), std::invalid_argument);
  auto bad = small_config(30);
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Schedule, StepsFromWarmup) {
  EXPECT_EQ(tom::checkpoint_steps(500, 100, 10),
            (std::vector<int64_t>{500, 600, 700, 800, 900, 1000, 1100, 1200, 1300, 1400}));
  EXPECT_TRUE(tom::checkpoint_steps(10, 5, 0).empty());
  EXPECT_THROW(tom::checkpoint_steps(-1, 5, 2), std::invalid_argument);
  EXPECT_THROW(tom::checkpoint_steps(0, 0, 2), std::invalid_argument);
}

TEST(Train, HundredStepsFiniteWithDistinctCheckpoints) {
  TempDir tmp;
  const auto rgb = toy_rgb(tmp / "rgb", 16, 32);
  const auto bank = toy_bank(tmp / "bank", 4, 32);
  auto cfg = small_config();
  cfg.schedule = {50, 25, 3};
  const auto summary = tom::train(cfg, rgb, bank, data::RunLayout{tmp / "run"}, {100, 0});
  ASSERT_EQ(summary.history.size(), 100u);
  for (const auto& h : summary.history) {
    for (const auto& [k, v] : h) EXPECT_TRUE(std::isfinite(v)) << k;
  }
  ASSERT_EQ(summary.manifest.entries().size(), 3u);
  EXPECT_TRUE(summary.checkpoint_errors.empty());
  std::set<std::string> digests;
  for (const auto& e : summary.manifest.entries()) {
    digests.insert(data::file_sha256(summary.manifest.resolve(e)));
  }
  EXPECT_EQ(digests.size(), 3u);

  const auto model = tom::SketchModel::load(tmp / "run");
  EXPECT_EQ(model.num_checkpoints(), 3);
  EXPECT_EQ(model.checkpoint_steps(), (std::vector<int64_t>{50, 75, 100}));
  const auto img = rgb[0];
  const auto s0 = model.sketchify(img, 0), s2 = model.sketchify(img, 2);
  EXPECT_EQ(s0.sizes(), (std::vector<int64_t>{1, 1, 32, 32}));
  EXPECT_FALSE(torch::equal(s0, s2));
  EXPECT_GE(s0.min().item<float>(), -1.0f);
  EXPECT_LE(s0.max().item<float>(), 1.0f);
  EXPECT_THROW(model.sketchify(img, 3), std::out_of_range);
}

TEST(Train, ZeroSlotsWritesNoCheckpoints) {
  TempDir tmp;
  const auto rgb = toy_rgb(tmp / "rgb", 4, 32);
  const auto bank = toy_bank(tmp / "bank", 2, 32);
  auto cfg = small_config();
  cfg.schedule = {1, 1, 0};
  const auto summary = tom::train(cfg, rgb, bank, data::RunLayout{tmp / "run"}, {3, 0});
  EXPECT_TRUE(summary.manifest.empty());
  EXPECT_FALSE(fs::exists(tmp / "run" / "ckpt"));
}

class Generate : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    tmp_ = new TempDir("s2i_gen");
    s2i::testing::PipelineOptions o;
    o.images = 6;
    o.tom_steps = 30;
    o.ckpt_after = 10;
    o.ckpt_every = 10;
    o.ckpt_slots = 3;
    o.test_fraction = 0.5;
    pipe_ = new s2i::testing::Pipeline(s2i::testing::build_pipeline(tmp_->path(), o));
  }
  static void TearDownTestSuite() {
    delete pipe_;
    delete tmp_;
  }
  static TempDir* tmp_;
  static s2i::testing::Pipeline* pipe_;
};
TempDir* Generate::tmp_ = nullptr;
s2i::testing::Pipeline* Generate::pipe_ = nullptr;

TEST_F(Generate, OneFilePerImageAndCheckpoint) {
  int64_t pngs = 0;
  for (const auto& e : fs::directory_iterator(pipe_->sketch_dir)) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 6 * 3);
  EXPECT_EQ(pipe_->sketch_catalog.pairs.size(), 6u);
  EXPECT_EQ(pipe_->sketch_catalog.checkpoint_ids, (std::vector<int64_t>{10, 20, 30}));
  EXPECT_EQ(pipe_->catalog.config_hash, pipe_->sketch_catalog.config_hash);
  EXPECT_EQ(pipe_->catalog.in_split(data::Split::kTest).size(), 3u);
}

TEST_F(Generate, RerunIsByteIdentical) {
  const auto model = tom::SketchModel::load(pipe_->tom_run);
  const auto again = tom::generate_sketches(model, pipe_->rgb_dir, tmp_->path() / "again");
  ASSERT_EQ(again.pairs.size(), pipe_->sketch_catalog.pairs.size());
  for (size_t i = 0; i < again.pairs.size(); ++i) {
    for (size_t k = 0; k < again.pairs[i].sketches.size(); ++k) {
      EXPECT_EQ(data::file_sha256(again.resolve(again.pairs[i].sketches[k])),
                data::file_sha256(pipe_->sketch_catalog.resolve(pipe_->sketch_catalog.pairs[i].sketches[k])));
    }
  }
}

TEST_F(Generate, EmptyAndCorruptInputs) {
  const auto model = tom::SketchModel::load(pipe_->tom_run);
  fs::create_directories(tmp_->path() / "empty");
  EXPECT_TRUE(tom::generate_sketches(model, tmp_->path() / "empty", tmp_->path() / "out_empty").pairs.empty());
  fs::create_directories(tmp_->path() / "mixed");
  fs::copy_file(data::list_images(pipe_->rgb_dir).front(), tmp_->path() / "mixed" / "good.png");
  data::atomic_write(tmp_->path() / "mixed" / "bad.png", "garbage");
  const auto c = tom::generate_sketches(model, tmp_->path() / "mixed", tmp_->path() / "out_mixed");
  ASSERT_EQ(c.pairs.size(), 1u);
  EXPECT_EQ(c.pairs[0].stem, "good");
}

TEST(BackgroundFraction, KnownImages) {
  EXPECT_EQ(tom::background_fraction(torch::ones({1, 4, 4})), 1.0);
  EXPECT_EQ(tom::background_fraction(-torch::ones({1, 4, 4})), 0.0);
  auto half = torch::ones({1, 2, 2});
  half[0][0] = -1;
  EXPECT_EQ(tom::background_fraction(half), 0.5);
}
