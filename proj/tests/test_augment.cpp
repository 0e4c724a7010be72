#include <gtest/gtest.h>

#include "s2i/augment.hpp"

using namespace s2i::augment;

namespace {

torch::Tensor image(int64_t c = 3, int64_t h = 32, int64_t w = 32) {
  torch::manual_seed(1);
  return torch::rand({c, h, w}) * 2 - 1;
}

StyleAugmentConfig busy(uint64_t seed) {
  StyleAugmentConfig cfg;
  cfg.apply_prob = 1.0;
  cfg.hflip_prob = 0.5;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(TranslateStyle, IdentityConfigIsIdentity) {
  const auto img = image();
  EXPECT_TRUE(torch::equal(translate_style(img, StyleAugmentConfig::identity()), img));
  auto never = busy(3);
  never.apply_prob = 0;
  never.hflip_prob = 0;
  EXPECT_TRUE(torch::equal(translate_style(img, never), img));
}

TEST(TranslateStyle, FlipTwiceRecoversOriginal) {
  auto cfg = StyleAugmentConfig::identity();
  cfg.hflip_prob = 1.0;
  const auto img = image();
  const auto once = translate_style(img, cfg);
  EXPECT_FALSE(torch::equal(once, img));
  EXPECT_TRUE(torch::equal(translate_style(once, cfg), img));
}

TEST(TranslateStyle, SeededReplayIsByteIdentical) {
  const auto img = image();
  for (uint64_t seed : {0u, 1u, 99u}) {
    const auto a = translate_style(img, busy(seed));
    const auto b = translate_style(img, busy(seed));
    EXPECT_TRUE(torch::equal(a, b));
    EXPECT_FALSE(torch::equal(a, img));
  }
  EXPECT_FALSE(torch::equal(translate_style(img, busy(1)), translate_style(img, busy(2))));
}

TEST(TranslateStyle, KeepsShapeAndChannels) {
  for (int64_t c : {1, 3}) {
    const auto img = image(c, 24, 40);
    for (uint64_t seed = 0; seed < 10; ++seed) {
      EXPECT_EQ(translate_style(img, busy(seed)).sizes(), img.sizes());
    }
  }
}

TEST(TranslateStyle, ReplicateFillStaysInSourceRange) {
  const auto img = image();
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const auto out = translate_style(img, busy(seed));
    EXPECT_GE(out.min().item<float>(), img.min().item<float>() - 1e-5f);
    EXPECT_LE(out.max().item<float>(), img.max().item<float>() + 1e-5f);
  }
}

TEST(TranslateStyle, ConstantFillUsesFillValue) {
  auto cfg = StyleAugmentConfig::identity();
  cfg.rotate = {45, 45};
  cfg.apply_prob = 1.0;
  cfg.fill = FillMode::kConstant;
  cfg.fill_value = 1.0f;
  const auto out = translate_style(-torch::ones({1, 32, 32}), cfg);
  // Corners rotate in from outside the source.
  EXPECT_NEAR(out[0][0][0].item<float>(), 1.0f, 1e-5f);
  EXPECT_NEAR(out[0][16][16].item<float>(), -1.0f, 1e-5f);
}

TEST(TranslateStyle, SampledTransformsRespectRanges) {
  for (uint64_t seed = 0; seed < 200; ++seed) {
    const auto cfg = busy(seed);
    const auto t = sample_transform(cfg);
    EXPECT_GE(t.crop_fraction, cfg.crop.lo);
    EXPECT_LE(t.crop_fraction, cfg.crop.hi);
    EXPECT_GE(t.angle_deg, cfg.rotate.lo);
    EXPECT_LE(t.angle_deg, cfg.rotate.hi);
    EXPECT_GE(t.zoom, cfg.scale.lo);
    EXPECT_LE(t.zoom, cfg.scale.hi);
    const double side = std::sqrt(t.crop_fraction);
    EXPECT_LE(std::abs(t.crop_cx), 1 - side + 1e-12);
    EXPECT_LE(std::abs(t.crop_cy), 1 - side + 1e-12);
  }
}

TEST(TranslateStyle, EachTranslationAppliedAboutHalfTheTime) {
  StyleAugmentConfig cfg;
  int crops = 0, rots = 0, zooms = 0, flips = 0;
  const int n = 2000;
  for (int i = 0; i < n; ++i) {
    cfg.seed = derive_seed(5, 0, static_cast<uint64_t>(i));
    const auto t = sample_transform(cfg);
    crops += t.crop_fraction != 1.0;
    rots += t.angle_deg != 0.0;
    zooms += t.zoom != 1.0;
    flips += t.hflip;
  }
  for (int k : {crops, rots, zooms, flips}) {
    EXPECT_NEAR(k / static_cast<double>(n), 0.5, 0.05);
  }
}

TEST(TranslateStyle, RejectsBadConfigs) {
  auto cfg = StyleAugmentConfig::identity();
  cfg.crop = {0.5, 1.5};  // more than the whole image
  EXPECT_THROW(translate_style(image(), cfg), std::invalid_argument);
  cfg = StyleAugmentConfig::identity();
  cfg.hflip_prob = 1.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = StyleAugmentConfig::identity();
  cfg.rotate = {10, -10};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_THROW(translate_style(torch::zeros({32, 32}), StyleAugmentConfig::identity()), std::invalid_argument);
}

TEST(MaskSketch, ZeroRegionsIsIdentity) {
  const auto skt = image(1);
  SketchMaskConfig cfg;
  cfg.num_regions = 0;
  EXPECT_TRUE(torch::equal(mask_sketch(skt, cfg), skt));
}

TEST(MaskSketch, WholeImageRegionGivesConstant) {
  const auto skt = image(1, 16, 16);
  SketchMaskConfig cfg;
  cfg.num_regions = 1;
  cfg.region_size = {16, 16};
  cfg.fill_value = 1.0f;
  EXPECT_TRUE(torch::equal(mask_sketch(skt, cfg), torch::ones_like(skt)));
}

TEST(MaskSketch, SeededRegionsOnlyTouchSampledPixels) {
  const auto skt = -torch::ones({1, 64, 64});
  for (uint64_t seed = 0; seed < 30; ++seed) {
    const auto cfg = SketchMaskConfig::defaults_for(64, 6, seed);
    const auto a = mask_sketch(skt, cfg);
    EXPECT_TRUE(torch::equal(a, mask_sketch(skt, cfg)));
    const auto regions = sample_regions(64, 64, cfg);
    ASSERT_EQ(regions.size(), 6u);
    auto inside = torch::zeros({64, 64}, torch::kBool);
    int64_t area = 0;
    for (const auto& r : regions) {
      using torch::indexing::Slice;
      inside.index_put_({Slice(r.y, r.y + r.h), Slice(r.x, r.x + r.w)}, true);
      area += r.h * r.w;
    }
    const auto changed = (a != skt).squeeze(0);
    EXPECT_LE(changed.sum().item<int64_t>(), area);
    EXPECT_FALSE((changed & ~inside).any().item<bool>());
    EXPECT_TRUE(torch::equal(changed, inside));  // fill differs from every input pixel here
  }
}

TEST(MaskSketch, DefaultRegionSizesAreFourToTwelvePercent) {
  const auto cfg = SketchMaskConfig::defaults_for(64, 5, 0);
  EXPECT_EQ(cfg.region_size.lo, 3);
  EXPECT_EQ(cfg.region_size.hi, 8);
  for (const auto& r : sample_regions(64, 64, cfg)) {
    EXPECT_GE(r.h, 3);
    EXPECT_LE(r.w, 8);
    EXPECT_LE(r.y + r.h, 64);
    EXPECT_LE(r.x + r.w, 64);
  }
}

TEST(MaskSketch, RejectsOversizedRegions) {
  SketchMaskConfig cfg;
  cfg.region_size = {4, 40};
  EXPECT_THROW(mask_sketch(torch::zeros({1, 32, 32}), cfg), std::invalid_argument);
}

TEST(DeriveSeed, MatchesSplitmixReference) {
  // Reference values from an independent splitmix64 implementation.
  EXPECT_EQ(derive_seed(1, 2, 3), 15020427595393229491ULL);
  EXPECT_EQ(derive_seed(0, 0, 0), 2558736989570252433ULL);
  EXPECT_EQ(derive_seed(42, 7, 1000), 3454933611805402483ULL);
  EXPECT_NE(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
}
