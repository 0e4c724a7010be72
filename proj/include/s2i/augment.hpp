#pragma once

// Seeded augmentation pipelines: geometric translations of style images and
// random region masking of sketches. Same (input, config) => same output.

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace s2i::augment {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool degenerate() const { return lo == hi; }
};

enum class FillMode {
  kReplicate,  // edge replication (style images)
  kConstant,   // constant fill value (sketches: white)
};

struct StyleAugmentConfig {
  Interval crop{0.8, 1.0};      // fraction of area kept
  Interval rotate{-15.0, 15.0}; // degrees
  Interval scale{0.8, 1.2};     // zoom factor
  double hflip_prob = 0.5;
  // Each of crop / rotate / scale is applied independently with this probability.
  double apply_prob = 0.5;
  FillMode fill = FillMode::kReplicate;
  float fill_value = 1.0f;
  uint64_t seed = 0;

  static StyleAugmentConfig identity();
  void validate() const;
};

// The sampled geometry of one translation.
struct StyleTransform {
  double crop_fraction = 1.0;
  double crop_cx = 0.0;  // crop centre in normalized [-1,1] coordinates
  double crop_cy = 0.0;
  double angle_deg = 0.0;
  double zoom = 1.0;
  bool hflip = false;

  bool is_pure_flip() const;
};

StyleTransform sample_transform(const StyleAugmentConfig& cfg);

// img is (c,h,w); output has the same shape.
torch::Tensor translate_style(const torch::Tensor& img, const StyleAugmentConfig& cfg);
torch::Tensor apply_transform(const torch::Tensor& img, const StyleTransform& t,
                              FillMode fill, float fill_value);

struct IntInterval {
  int64_t lo = 0;
  int64_t hi = 0;
};

struct SketchMaskConfig {
  int64_t num_regions = 6;
  IntInterval region_size{3, 8};  // side length in pixels
  float fill_value = 1.0f;        // background level
  uint64_t seed = 0;

  // 4-12% of the sketch width per side.
  static SketchMaskConfig defaults_for(int64_t width, int64_t num_regions, uint64_t seed);
  void validate(int64_t h, int64_t w) const;
};

struct Region {
  int64_t y = 0;
  int64_t x = 0;
  int64_t h = 0;
  int64_t w = 0;
};

std::vector<Region> sample_regions(int64_t h, int64_t w, const SketchMaskConfig& cfg);

// skt is (c,h,w). Exactly num_regions rectangles (possibly overlapping) are
// set to fill_value; pixels outside them are untouched.
torch::Tensor mask_sketch(const torch::Tensor& skt, const SketchMaskConfig& cfg);

// Distinct stream per (seed, worker, step).
uint64_t derive_seed(uint64_t seed, uint64_t worker, uint64_t step);

}  // namespace s2i::augment
