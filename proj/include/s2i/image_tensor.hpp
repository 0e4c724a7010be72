#pragma once

#include <torch/torch.h>

#include <stdexcept>
#include <string>

namespace s2i {

// c x h x w real tensor, finite everywhere. Images live in [-1, 1]; feature
// maps are unbounded.
class ImageTensor {
 public:
  ImageTensor() = default;
  explicit ImageTensor(torch::Tensor data);

  static ImageTensor zeros(int64_t c, int64_t h, int64_t w);

  const torch::Tensor& tensor() const { return data_; }
  int64_t channels() const { return data_.size(0); }
  int64_t height() const { return data_.size(1); }
  int64_t width() const { return data_.size(2); }
  bool defined() const { return data_.defined(); }

  // (1, c, h, w) view for feeding networks.
  torch::Tensor batched() const { return data_.unsqueeze(0); }

 private:
  torch::Tensor data_;
};

// Throws std::invalid_argument naming `what` if `t` holds NaN or Inf.
void require_finite(const torch::Tensor& t, const std::string& what);

// Throws std::invalid_argument unless `t` is (c,h,w) or (n,c,h,w).
void require_feature_map(const torch::Tensor& t, const std::string& what);

}  // namespace s2i
