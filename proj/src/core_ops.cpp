#include "s2i/core_ops.hpp"

#include <stdexcept>
#include <string>

namespace s2i {

ImageTensor::ImageTensor(torch::Tensor data) : data_(std::move(data)) {
  if (!data_.defined() || data_.dim() != 3) {
    throw std::invalid_argument("ImageTensor: expected a (c,h,w) tensor");
  }
  if (data_.size(0) < 1 || data_.size(1) < 1 || data_.size(2) < 1) {
    throw std::invalid_argument("ImageTensor: every dimension must be >= 1");
  }
  require_finite(data_, "ImageTensor");
}

ImageTensor ImageTensor::zeros(int64_t c, int64_t h, int64_t w) {
  return ImageTensor(torch::zeros({c, h, w}));
}

void require_finite(const torch::Tensor& t, const std::string& what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw std::invalid_argument(what + ": input contains NaN or Inf");
  }
}

void require_feature_map(const torch::Tensor& t, const std::string& what) {
  if (!t.defined() || (t.dim() != 3 && t.dim() != 4)) {
    throw std::invalid_argument(what + ": expected (c,h,w) or (n,c,h,w)");
  }
}

}  // namespace s2i

namespace s2i::ops {
namespace {

int64_t channel_dim(const torch::Tensor& f) { return f.dim() - 3; }

// Reshapes a (c) / (n,c) per-channel vector so it broadcasts against f.
torch::Tensor as_channel_column(const torch::Tensor& v, const torch::Tensor& f,
                                const char* what) {
  const int64_t c = f.size(channel_dim(f));
  if (v.size(-1) != c) {
    throw std::invalid_argument(std::string(what) + ": expected " +
                                std::to_string(c) + " channels, got " +
                                std::to_string(v.size(-1)));
  }
  if (v.dim() == 1) {
    return v.view({c, 1, 1});
  }
  if (v.dim() == 2 && f.dim() == 4 && v.size(0) == f.size(0)) {
    return v.view({v.size(0), c, 1, 1});
  }
  throw std::invalid_argument(std::string(what) +
                              ": per-channel vector has incompatible shape");
}

}  // namespace

MaskRule parse_mask_rule(std::string_view name) {
  if (name == "above_mean_abs") return MaskRule::kAboveMeanAbs;
  if (name == "positive") return MaskRule::kPositive;
  throw std::invalid_argument("unknown DMI mask rule: " + std::string(name));
}

std::string_view to_string(MaskRule rule) {
  switch (rule) {
    case MaskRule::kAboveMeanAbs:
      return "above_mean_abs";
    case MaskRule::kPositive:
      return "positive";
  }
  return "?";
}

DmiParams DmiParams::identity(int64_t channels, torch::TensorOptions opts) {
  return DmiParams{torch::ones({channels}, opts), torch::zeros({channels}, opts),
                   torch::ones({channels}, opts), torch::zeros({channels}, opts),
                   MaskRule::kAboveMeanAbs};
}

void DmiParams::validate() const {
  if (!edge_scale.defined() || edge_scale.dim() != 1) {
    throw std::invalid_argument("DmiParams: edge_scale must be a vector");
  }
  const int64_t c = edge_scale.size(0);
  for (const auto* v : {&edge_shift, &plain_scale, &plain_shift}) {
    if (!v->defined() || v->dim() != 1 || v->size(0) != c) {
      throw std::invalid_argument("DmiParams: all four vectors must have the same length");
    }
  }
}

torch::Tensor gram(const torch::Tensor& f) {
  require_feature_map(f, "gram");
  require_finite(f, "gram");
  const int64_t cd = channel_dim(f);
  const int64_t c = f.size(cd);
  const int64_t hw = f.size(cd + 1) * f.size(cd + 2);
  auto flat = f.dim() == 4 ? f.reshape({f.size(0), c, hw}) : f.reshape({c, hw});
  return torch::matmul(flat, flat.transpose(-1, -2)) / static_cast<double>(hw);
}

GramMatrix gram_matrix(const ImageTensor& f) {
  return GramMatrix{gram(f.tensor()), f.height() * f.width()};
}

ChannelStats channel_stats(const torch::Tensor& f) {
  require_feature_map(f, "channel_stats");
  const auto mean = f.mean({-2, -1});
  const auto var = f.var({-2, -1}, /*unbiased=*/false);
  return ChannelStats{mean, torch::sqrt(torch::clamp_min(var, kInstanceNormEps))};
}

Normalized instance_norm(const torch::Tensor& f) {
  require_feature_map(f, "instance_norm");
  // A 1x1 map (or any constant channel) has zero variance; the eps floor turns it into zeros.
  auto stats = channel_stats(f);
  auto out = (f - stats.mean.unsqueeze(-1).unsqueeze(-1)) /
             stats.std.unsqueeze(-1).unsqueeze(-1);
  return Normalized{out, std::move(stats)};
}

torch::Tensor adain(const torch::Tensor& content, const ChannelStats& style) {
  require_feature_map(content, "adain");
  if (!style.mean.defined() || !style.std.defined() ||
      style.mean.sizes() != style.std.sizes()) {
    throw std::invalid_argument("adain: malformed style statistics");
  }
  const auto mean = as_channel_column(style.mean, content, "adain");
  const auto std = as_channel_column(style.std, content, "adain");
  return instance_norm(content).out * std + mean;
}

torch::Tensor channel_scale(const torch::Tensor& f, const torch::Tensor& style) {
  require_feature_map(f, "channel_scale");
  return f * as_channel_column(style, f, "channel_scale");
}

torch::Tensor resample_nearest(const torch::Tensor& f, int64_t h, int64_t w) {
  require_feature_map(f, "resample_nearest");
  if (f.size(-2) == h && f.size(-1) == w) {
    return f;
  }
  const bool single = f.dim() == 3;
  auto batched = single ? f.unsqueeze(0) : f;
  auto out = torch::nn::functional::interpolate(
      batched, torch::nn::functional::InterpolateFuncOptions()
                   .size(std::vector<int64_t>{h, w})
                   .mode(torch::kNearest));
  return single ? out.squeeze(0) : out;
}

torch::Tensor match_channels(const torch::Tensor& f, int64_t channels) {
  require_feature_map(f, "match_channels");
  const int64_t cd = channel_dim(f);
  const int64_t c = f.size(cd);
  if (c == channels) {
    return f;
  }
  // Move channels last, pool along them, move back.
  auto moved = f.movedim(cd, -1);
  auto shape = moved.sizes().vec();
  auto pooled = torch::adaptive_avg_pool1d(moved.reshape({-1, 1, c}), {channels});
  shape.back() = channels;
  return pooled.reshape(shape).movedim(-1, cd);
}

torch::Tensor dmi_mask(const torch::Tensor& content, MaskRule rule) {
  require_feature_map(content, "dmi_mask");
  torch::NoGradGuard no_grad;
  switch (rule) {
    case MaskRule::kAboveMeanAbs: {
      const auto mag = content.abs();
      const auto thresh = mag.mean({-2, -1}, /*keepdim=*/true);
      return (mag > thresh).to(content.scalar_type());
    }
    case MaskRule::kPositive:
      return (content > 0).to(content.scalar_type());
  }
  throw std::invalid_argument("dmi_mask: unknown rule");
}

torch::Tensor apply_dmi(const torch::Tensor& f, const torch::Tensor& mask,
                        const DmiParams& params) {
  require_feature_map(f, "feature_dmi");
  params.validate();
  if (mask.sizes() != f.sizes()) {
    throw std::invalid_argument("feature_dmi: mask shape must equal feature shape");
  }
  const auto es = as_channel_column(params.edge_scale, f, "feature_dmi");
  const auto eb = as_channel_column(params.edge_shift, f, "feature_dmi");
  const auto ps = as_channel_column(params.plain_scale, f, "feature_dmi");
  const auto pb = as_channel_column(params.plain_shift, f, "feature_dmi");
  return mask * (es * f + eb) + (1 - mask) * (ps * f + pb);
}

torch::Tensor feature_dmi(const torch::Tensor& f, const torch::Tensor& content,
                          const DmiParams& params) {
  require_feature_map(f, "feature_dmi");
  require_feature_map(content, "feature_dmi");
  params.validate();
  const int64_t cd = channel_dim(f);
  if (params.channels() != f.size(cd)) {
    throw std::invalid_argument("feature_dmi: params have " +
                                std::to_string(params.channels()) +
                                " channels, feature map has " +
                                std::to_string(f.size(cd)));
  }
  if (content.dim() != f.dim() || content.size(channel_dim(content)) != f.size(cd)) {
    throw std::invalid_argument("feature_dmi: content channels must match the feature map");
  }
  const auto resized = resample_nearest(content, f.size(-2), f.size(-1));
  auto mask = dmi_mask(resized, params.rule);
  if (f.dim() == 4 && mask.size(0) != f.size(0)) {
    mask = mask.expand_as(f);
  }
  return apply_dmi(f, mask, params);
}

}  // namespace s2i::ops
