#pragma once

// Stage-2 refinement: an encoder-decoder G2 over the stage-1 output, trained
// with hinge adversarial losses plus a weighted reconstruction of the style
// image. The stage-1 auto-encoder stays frozen throughout.

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "s2i/datastore.hpp"
#include "s2i/model.hpp"
#include "s2i/objectives.hpp"

namespace s2i::refine {

namespace fs = std::filesystem;
using nlohmann::json;

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A sketch paired with a style image that is not its own source image.
class MismatchedPair : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct RefinerConfig {
  int64_t resolution = 64;
  int64_t style_dim = 128;
  int64_t width = 32;
  int64_t d_width = 32;
  bool use_style_skip = true;
  double noise_scale = 0.1;
  double lambda = 10.0;
  int64_t batch_size = 24;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  uint64_t seed = 1;
  std::string ae_config_hash;  // the frozen stage-1 model this refiner sits on

  // Matches resolution and style_dim to a stage-1 model.
  static RefinerConfig for_stage1(const ae::AeModel& ae, RefinerConfig base);
  void validate() const;
  json to_json() const;
  static RefinerConfig from_json(const json& j);
};

class RefinerGeneratorImpl : public torch::nn::Module {
 public:
  explicit RefinerGeneratorImpl(const RefinerConfig& cfg);
  // img (n,3,r,r); style (n, style_dim) or undefined; noise_seed drives z.
  torch::Tensor forward(const torch::Tensor& img, const torch::Tensor& style,
                        at::Generator& noise);

 private:
  RefinerConfig cfg_;
  torch::nn::Conv2d in_{nullptr}, down1_{nullptr}, down2_{nullptr}, mid_{nullptr};
  torch::nn::Conv2d up1_{nullptr}, up2_{nullptr}, out_{nullptr};
  torch::nn::ModuleList style_proj_{nullptr};  // style -> per-channel scale offset, per site
  torch::Tensor noise_gain_;  // one learnable gain per decoder site
};
TORCH_MODULE(RefinerGenerator);

// Strided conv stack to one unconditional score per image.
class RefinerDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit RefinerDiscriminatorImpl(const RefinerConfig& cfg);
  torch::Tensor forward(const torch::Tensor& img);

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(RefinerDiscriminator);

struct RefinerBatch {
  std::vector<int64_t> style_ids;   // dataset index of each style image
  std::vector<int64_t> sketch_ids;  // dataset index each sketch was made from
  torch::Tensor sketches;           // (n,1,r,r)
  torch::Tensor styles;             // (n,3,r,r)
};

// Paired batch: every sketch comes from its own style image.
RefinerBatch make_batch(const ae::AeDataset& data, const RefinerConfig& cfg, int64_t step);

struct RefinerStepResult {
  loss::LossReport d;  // d_real, d_fake
  loss::LossReport g;  // g_adv, g_rec_weighted
  double g_rec = 0;    // unweighted reconstruction mse

  std::map<std::string, double> values() const;
};

class RefinerTrainer {
 public:
  RefinerTrainer(const ae::AeModel& stage1, RefinerConfig cfg);

  RefinerStepResult step(const RefinerBatch& batch);

  RefinerGenerator& generator() { return g_; }
  RefinerDiscriminator& discriminator() { return d_; }
  const RefinerConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }

 private:
  const ae::AeModel& stage1_;
  RefinerConfig cfg_;
  RefinerGenerator g_{nullptr};
  RefinerDiscriminator d_{nullptr};
  std::unique_ptr<torch::optim::Adam> g_opt_, d_opt_;
  int64_t step_ = 0;
};

class RefinerModel {
 public:
  RefinerModel(RefinerConfig cfg, RefinerGenerator g);
  static RefinerModel load(const fs::path& run_or_manifest);

  // Deterministic given noise_seed. style may be undefined (no style skip).
  torch::Tensor refine(const torch::Tensor& img_ae, const torch::Tensor& style,
                       uint64_t noise_seed) const;

  const RefinerConfig& config() const { return cfg_; }
  const std::string& config_hash() const { return config_hash_; }
  int64_t step() const { return step_; }

  data::CheckpointEntry save(const data::RunLayout& run, int64_t step, const json& metrics);

 private:
  RefinerConfig cfg_;
  RefinerGenerator g_{nullptr};
  std::string config_hash_;
  int64_t step_ = 0;
};

struct RefinerTrainOptions {
  int64_t steps = 1000;
  int64_t log_every = 100;
};

struct RefinerTrainSummary {
  std::vector<std::map<std::string, double>> history;
  data::CheckpointEntry checkpoint;
};

RefinerTrainSummary train(const ae::AeModel& stage1, const RefinerConfig& cfg,
                          const ae::AeDataset& data, const data::RunLayout& run,
                          const RefinerTrainOptions& opts);

// Least-squares slope of ys against 0..n-1.
double trend_slope(const std::vector<double>& ys);

}  // namespace s2i::refine
