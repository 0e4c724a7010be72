#include "s2i/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace s2i::augment {
namespace {

// Portable [0,1) draw; std::uniform_real_distribution is implementation-defined.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double draw(std::mt19937_64& rng, const Interval& iv) {
  const double u = unit(rng);
  return iv.degenerate() ? iv.lo : iv.lo + (iv.hi - iv.lo) * u;
}

int64_t draw_int(std::mt19937_64& rng, int64_t lo, int64_t hi) {
  const double u = unit(rng);
  return lo + std::min<int64_t>(hi - lo, static_cast<int64_t>(u * static_cast<double>(hi - lo + 1)));
}

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

void check_interval(const Interval& iv, const char* name) {
  if (!std::isfinite(iv.lo) || !std::isfinite(iv.hi) || iv.lo > iv.hi) {
    throw std::invalid_argument(std::string("StyleAugmentConfig: bad ") + name + " range");
  }
}

}  // namespace

StyleAugmentConfig StyleAugmentConfig::identity() {
  StyleAugmentConfig cfg;
  cfg.crop = {1.0, 1.0};
  cfg.rotate = {0.0, 0.0};
  cfg.scale = {1.0, 1.0};
  cfg.hflip_prob = 0.0;
  return cfg;
}

void StyleAugmentConfig::validate() const {
  check_interval(crop, "crop");
  check_interval(rotate, "rotate");
  check_interval(scale, "scale");
  if (crop.lo <= 0.0 || crop.hi > 1.0) {
    throw std::invalid_argument("StyleAugmentConfig: crop must keep a fraction in (0, 1] of the image");
  }
  if (scale.lo <= 0.0) {
    throw std::invalid_argument("StyleAugmentConfig: scale must be positive");
  }
  for (double p : {hflip_prob, apply_prob}) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument("StyleAugmentConfig: probabilities must lie in [0, 1]");
    }
  }
}

bool StyleTransform::is_pure_flip() const {
  return crop_fraction == 1.0 && angle_deg == 0.0 && zoom == 1.0;
}

StyleTransform sample_transform(const StyleAugmentConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  StyleTransform t;
  // Fixed draw order keeps the stream stable when probabilities change.
  const double u_crop = unit(rng), u_rot = unit(rng), u_scale = unit(rng), u_flip = unit(rng);
  const double crop = draw(rng, cfg.crop);
  const double cx = unit(rng), cy = unit(rng);
  const double angle = draw(rng, cfg.rotate);
  const double zoom = draw(rng, cfg.scale);
  if (u_crop < cfg.apply_prob) {
    t.crop_fraction = crop;
    const double side = std::sqrt(crop);
    t.crop_cx = (2.0 * cx - 1.0) * (1.0 - side);
    t.crop_cy = (2.0 * cy - 1.0) * (1.0 - side);
  }
  if (u_rot < cfg.apply_prob) t.angle_deg = angle;
  if (u_scale < cfg.apply_prob) t.zoom = zoom;
  t.hflip = u_flip < cfg.hflip_prob;
  return t;
}

torch::Tensor apply_transform(const torch::Tensor& img, const StyleTransform& t,
                              FillMode fill, float fill_value) {
  if (img.dim() != 3) {
    throw std::invalid_argument("translate_style: expected a (c,h,w) image");
  }
  if (t.is_pure_flip()) {
    return t.hflip ? img.flip({2}) : img.clone();
  }
  // Maps output coordinates to input coordinates: crop * zoom * rotate * flip.
  const double side = std::sqrt(t.crop_fraction);
  const double a = t.angle_deg * std::numbers::pi / 180.0;
  const Mat3 flip{{{t.hflip ? -1.0 : 1.0, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  const Mat3 rot{{{std::cos(a), -std::sin(a), 0}, {std::sin(a), std::cos(a), 0}, {0, 0, 1}}};
  const Mat3 zoom{{{1.0 / t.zoom, 0, 0}, {0, 1.0 / t.zoom, 0}, {0, 0, 1}}};
  const Mat3 crop{{{side, 0, t.crop_cx}, {0, side, t.crop_cy}, {0, 0, 1}}};
  const Mat3 m = mul(crop, mul(zoom, mul(rot, flip)));

  auto theta = torch::tensor({m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]},
                             torch::TensorOptions().dtype(img.scalar_type()))
                   .view({1, 2, 3});
  const auto batched = img.unsqueeze(0);
  auto grid = torch::nn::functional::affine_grid(theta, batched.sizes(), /*align_corners=*/false);
  namespace F = torch::nn::functional;
  if (fill == FillMode::kReplicate) {
    return F::grid_sample(batched, grid,
                          F::GridSampleFuncOptions()
                              .mode(torch::kBilinear)
                              .padding_mode(torch::kBorder)
                              .align_corners(false))
        .squeeze(0);
  }
  // Zero padding around (img - fill) yields `fill` outside the source.
  return (F::grid_sample(batched - fill_value, grid,
                         F::GridSampleFuncOptions()
                             .mode(torch::kBilinear)
                             .padding_mode(torch::kZeros)
                             .align_corners(false)) +
          fill_value)
      .squeeze(0);
}

torch::Tensor translate_style(const torch::Tensor& img, const StyleAugmentConfig& cfg) {
  return apply_transform(img, sample_transform(cfg), cfg.fill, cfg.fill_value);
}

SketchMaskConfig SketchMaskConfig::defaults_for(int64_t width, int64_t num_regions,
                                                uint64_t seed) {
  SketchMaskConfig cfg;
  cfg.num_regions = num_regions;
  cfg.region_size = {std::max<int64_t>(1, std::llround(0.04 * static_cast<double>(width))),
                     std::max<int64_t>(1, std::llround(0.12 * static_cast<double>(width)))};
  cfg.seed = seed;
  return cfg;
}

void SketchMaskConfig::validate(int64_t h, int64_t w) const {
  if (num_regions < 0) {
    throw std::invalid_argument("SketchMaskConfig: num_regions must be >= 0");
  }
  if (region_size.lo < 1 || region_size.lo > region_size.hi) {
    throw std::invalid_argument("SketchMaskConfig: bad region size range");
  }
  if (region_size.hi > std::min(h, w)) {
    throw std::invalid_argument("SketchMaskConfig: regions larger than the sketch");
  }
}

std::vector<Region> sample_regions(int64_t h, int64_t w, const SketchMaskConfig& cfg) {
  cfg.validate(h, w);
  std::mt19937_64 rng(cfg.seed);
  std::vector<Region> out;
  out.reserve(static_cast<size_t>(cfg.num_regions));
  for (int64_t i = 0; i < cfg.num_regions; ++i) {
    Region r;
    r.h = draw_int(rng, cfg.region_size.lo, cfg.region_size.hi);
    r.w = draw_int(rng, cfg.region_size.lo, cfg.region_size.hi);
    r.y = draw_int(rng, 0, h - r.h);
    r.x = draw_int(rng, 0, w - r.w);
    out.push_back(r);
  }
  return out;
}

torch::Tensor mask_sketch(const torch::Tensor& skt, const SketchMaskConfig& cfg) {
  if (skt.dim() != 3) {
    throw std::invalid_argument("mask_sketch: expected a (c,h,w) sketch");
  }
  auto out = skt.clone();
  using torch::indexing::Slice;
  for (const auto& r : sample_regions(skt.size(1), skt.size(2), cfg)) {
    out.index_put_({Slice(), Slice(r.y, r.y + r.h), Slice(r.x, r.x + r.w)}, cfg.fill_value);
  }
  return out;
}

uint64_t derive_seed(uint64_t seed, uint64_t worker, uint64_t step) {
  // splitmix64 over the combined key.
  auto mix = [](uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ worker) ^ step);
}

}  // namespace s2i::augment
