#pragma once

// Differentiable tensor primitives shared by every network in the pipeline.
//
// All functions accept either a single feature map (c,h,w) or a batch
// (n,c,h,w) and keep the batch dimension when present. They are pure: no
// hidden state, safe to call from any thread.

#include <torch/torch.h>

#include <string_view>

#include "s2i/image_tensor.hpp"

namespace s2i::ops {

inline constexpr double kInstanceNormEps = 1e-5;

struct GramMatrix {
  torch::Tensor data;      // (c, c) or (n, c, c)
  int64_t normalizer = 1;  // h * w
};

struct ChannelStats {
  torch::Tensor mean;  // (c) or (n, c)
  torch::Tensor std;   // sqrt(max(var, eps)), same shape as mean
};

// How a continuous content map becomes a binary contour/plain mask.
enum class MaskRule {
  // 1 where |x| exceeds the per-channel mean of |x|.
  kAboveMeanAbs,
  // 1 where x > 0.
  kPositive,
};

MaskRule parse_mask_rule(std::string_view name);
std::string_view to_string(MaskRule rule);

struct DmiParams {
  torch::Tensor edge_scale;
  torch::Tensor edge_shift;
  torch::Tensor plain_scale;
  torch::Tensor plain_shift;
  MaskRule rule = MaskRule::kAboveMeanAbs;

  // scale 1, shift 0 on both branches.
  static DmiParams identity(int64_t channels, torch::TensorOptions opts = {});
  int64_t channels() const { return edge_scale.size(0); }
  void validate() const;
};

// G = F F^T / (h w) with F the map flattened to (c, h*w).
torch::Tensor gram(const torch::Tensor& f);
GramMatrix gram_matrix(const ImageTensor& f);

// Per-channel spatial mean and std, with the variance floored at eps.
ChannelStats channel_stats(const torch::Tensor& f);

struct Normalized {
  torch::Tensor out;
  ChannelStats stats;
};

// Zero mean, unit std per channel; constant channels map to zeros.
Normalized instance_norm(const torch::Tensor& f);

// IN(content) * style.std + style.mean.
torch::Tensor adain(const torch::Tensor& content, const ChannelStats& style);

// out[i] = f[i] * style[i]. `style` is (c) or (n, c).
torch::Tensor channel_scale(const torch::Tensor& f, const torch::Tensor& style);

// Nearest-neighbour resize of the spatial extent.
torch::Tensor resample_nearest(const torch::Tensor& f, int64_t h, int64_t w);

// Resamples the channel axis to `channels` by averaging adjacent channels
// (or repeating them when upsampling). Identity when counts already match.
torch::Tensor match_channels(const torch::Tensor& f, int64_t channels);

// Binary (0/1) mask with the same shape as `content`.
torch::Tensor dmi_mask(const torch::Tensor& content, MaskRule rule);

// M*(edge_scale*f + edge_shift) + (1-M)*(plain_scale*f + plain_shift).
torch::Tensor apply_dmi(const torch::Tensor& f, const torch::Tensor& mask,
                        const DmiParams& params);

// Derives the mask from `content` (resampled to f's spatial size first) and
// applies the dual affine shift. Channel counts of f, content and params
// must agree.
torch::Tensor feature_dmi(const torch::Tensor& f, const torch::Tensor& content,
                          const DmiParams& params);

}  // namespace s2i::ops
