#pragma once

// Stage-1 auto-encoder: style encoder, content encoder, decoder G1 and the
// auxiliary style classifier trained on rotating class subsets.
//
// Style enters the decoder only by channel-wise multiplication; content
// enters through the stem and through a feature-space DMI at every decoder
// resolution.

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "s2i/augment.hpp"
#include "s2i/core_ops.hpp"
#include "s2i/datastore.hpp"
#include "s2i/objectives.hpp"

namespace s2i::ae {

namespace fs = std::filesystem;
using nlohmann::json;

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UntrainedModel : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inclusive bounds for the class-subset size given a dataset of n images.
// [500, 2000] from 15000 images up; proportionally smaller below that.
struct KBounds {
  int64_t lo = 0;
  int64_t hi = 0;
};
KBounds k_bounds(int64_t dataset_size);

struct AeConfig {
  int64_t resolution = 64;
  int64_t style_dim = 128;
  int64_t content_channels = 128;
  int64_t content_grid = 8;
  // Decoder width at the content grid; halves per upsampling (floor 16).
  int64_t decoder_width = 128;
  int64_t encoder_width = 32;
  ops::MaskRule mask_rule = ops::MaskRule::kAboveMeanAbs;

  loss::TripletMargins margins;
  loss::TripletOrientation orientation = loss::TripletOrientation::kConventional;
  loss::AeWeights weights;

  int64_t k = 8;  // class-subset size
  int64_t refresh_every = 2000;
  int64_t batch_size = 16;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  uint64_t seed = 1;

  augment::StyleAugmentConfig style_aug;
  int64_t mask_regions = 6;

  // Reconstruction only; the four self-supervision weights become zero.
  static AeConfig vanilla(AeConfig base);
  bool is_vanilla() const;

  // Number of 2x upsamplings from the content grid to the output.
  int64_t upsamplings() const;
  // Smallest decoder resolution that receives the style vector.
  int64_t style_min_resolution() const { return std::max<int64_t>(1, resolution / 16); }

  void validate() const;
  json to_json() const;
  static AeConfig from_json(const json& j);
};

class StyleEncoderImpl : public torch::nn::Module {
 public:
  explicit StyleEncoderImpl(const AeConfig& cfg);
  // (n, 3, res, res) -> (n, style_dim)
  torch::Tensor forward(const torch::Tensor& img);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(StyleEncoder);

class ContentEncoderImpl : public torch::nn::Module {
 public:
  explicit ContentEncoderImpl(const AeConfig& cfg);
  // (n, 1, res, res) -> (n, content_channels, grid, grid)
  torch::Tensor forward(const torch::Tensor& sketch);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ContentEncoder);

// Learnable dual affine shift of one decoder site.
class DmiSiteImpl : public torch::nn::Module {
 public:
  DmiSiteImpl(int64_t channels, ops::MaskRule rule);
  torch::Tensor forward(const torch::Tensor& f, const torch::Tensor& content);
  ops::DmiParams params() const;

 private:
  torch::Tensor edge_scale_, edge_shift_, plain_scale_, plain_shift_;
  ops::MaskRule rule_;
};
TORCH_MODULE(DmiSite);

class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const AeConfig& cfg);
  // style (n, style_dim), content (n, c, g, g) -> image (n, 3, res, res).
  torch::Tensor forward(const torch::Tensor& style, const torch::Tensor& content);

  struct Site {
    int64_t resolution;
    int64_t channels;
    bool styled;
  };
  const std::vector<Site>& sites() const { return sites_; }

 private:
  std::vector<Site> sites_;
  torch::nn::Conv2d stem_{nullptr};
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<DmiSite> dmi_;
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(Decoder);

// All stage-1 weights. The classifier head is a single linear layer on the
// style vector.
class AeNetImpl : public torch::nn::Module {
 public:
  explicit AeNetImpl(const AeConfig& cfg);

  StyleEncoder style_encoder{nullptr};
  ContentEncoder content_encoder{nullptr};
  Decoder decoder{nullptr};
  torch::nn::Linear head{nullptr};

  // Every parameter except the classifier head.
  std::vector<torch::Tensor> body_parameters();
  void reinit_head(uint64_t seed);
};
TORCH_MODULE(AeNet);

// Average-pooled content grid mapped to the head's input width.
torch::Tensor pool_content(const torch::Tensor& content, int64_t style_dim);

// Content de-classification through a detached copy of the head, so that
// only the content path receives its gradient.
torch::Tensor content_declass_term(const torch::nn::Linear& head, const torch::Tensor& content,
                                   int64_t style_dim);

class AeModel {
 public:
  explicit AeModel(AeConfig cfg);

  // The frozen model from the latest ae entry of a run manifest.
  static AeModel load(const fs::path& run_or_manifest);

  torch::Tensor encode_style(const torch::Tensor& img) const;
  torch::Tensor encode_content(const torch::Tensor& sketch) const;
  torch::Tensor decode(const torch::Tensor& style, const torch::Tensor& content) const;
  // decode(encode_style(style_img), encode_content(sketch)); accepts single
  // images or batches.
  torch::Tensor infer(const torch::Tensor& sketch, const torch::Tensor& style_img) const;

  const AeConfig& config() const { return cfg_; }
  AeNet& net() { return net_; }
  const AeNet& net() const { return net_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }
  const std::string& config_hash() const { return config_hash_; }
  int64_t step() const { return step_; }

  // Saves the weights under run/ckpt and registers them in the manifest.
  data::CheckpointEntry save(const data::RunLayout& run, int64_t step, const json& metrics);

 private:
  void require_trained(const char* what) const;
  void check_image(const torch::Tensor& x, int64_t channels, const char* what) const;

  AeConfig cfg_;
  AeNet net_{nullptr};
  bool trained_ = false;
  std::string config_hash_;
  int64_t step_ = 0;
};

// In-memory training corpus: every image with all of its sketches.
struct AeDataset {
  torch::Tensor images;    // (n, 3, res, res)
  torch::Tensor sketches;  // (n, s, 1, res, res), s >= 2
  std::vector<std::string> stems;

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  int64_t sketches_per_image() const { return sketches.defined() ? sketches.size(1) : 0; }

  static AeDataset from_catalog(const data::Catalog& catalog, data::Split split,
                                int64_t resolution);
};

struct MomentumClassSubset {
  std::vector<int64_t> image_ids;           // dataset indices, size k
  std::map<int64_t, int64_t> label_of;      // dataset index -> class
  uint64_t generation = 0;

  int64_t k() const { return static_cast<int64_t>(image_ids.size()); }
  std::optional<int64_t> label(int64_t image_id) const;
};

// Fresh uniform subset of k images out of dataset_size with fresh labels.
MomentumClassSubset next_class_subset(int64_t dataset_size, int64_t k, uint64_t seed,
                                      const MomentumClassSubset* prev = nullptr);

// One augmented training batch.
struct AeBatch {
  std::vector<int64_t> ids;  // dataset indices; all distinct
  torch::Tensor original;    // (n, 3, r, r) reconstruction target
  torch::Tensor translated;  // (n, 3, r, r) what the style encoder sees
  torch::Tensor sketch;      // (n, 1, r, r) masked sketch fed to the decoder path
  torch::Tensor sketch_pos;  // (n, 1, r, r) masked second sketch of the same image
};

AeBatch make_batch(const AeDataset& data, const AeConfig& cfg, int64_t step);

struct AeStepResult {
  loss::LossReport report;  // rec, c_tri, s_tri, s_cls, c_cls
  torch::Tensor recon;      // detached decoder output
  int64_t in_subset = 0;    // batch images that carried a class label
};

class AeTrainer {
 public:
  AeTrainer(AeModel& model, int64_t dataset_size);

  AeStepResult step(const AeBatch& batch);

  // Draws the next subset and re-initializes the head (and its optimizer).
  void refresh_subset();

  const MomentumClassSubset& subset() const { return subset_; }
  int64_t step_count() const { return step_; }

 private:
  AeModel& model_;
  int64_t dataset_size_;
  MomentumClassSubset subset_;
  std::unique_ptr<torch::optim::Adam> body_opt_;
  std::unique_ptr<torch::optim::Adam> head_opt_;
  int64_t step_ = 0;
};

struct AeTrainOptions {
  int64_t steps = 2000;
  int64_t log_every = 100;
};

struct AeTrainSummary {
  std::vector<std::map<std::string, double>> history;
  data::CheckpointEntry checkpoint;
};

// Trains `model` on `data` and saves the final weights into `run`.
AeTrainSummary train(AeModel& model, const AeDataset& data, const data::RunLayout& run,
                     const AeTrainOptions& opts);

}  // namespace s2i::ae
