#pragma once

// Train-once-get-multiple sketch synthesis.
//
// A frozen perceptual extractor E maps RGB images and real line sketches to
// feature maps. The generator G decodes E(rgb) into a one-channel sketch; it
// is trained against a Gram-matrix discriminator plus a feature match to an
// AdaIN target that carries the content of the RGB image and the statistics
// of a randomly paired real sketch. Snapshots of G taken at different SGD
// steps yield different sketch styles for the same image.

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "s2i/datastore.hpp"
#include "s2i/objectives.hpp"

namespace s2i::tom {

namespace fs = std::filesystem;
using nlohmann::json;

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExtractorConfig {
  // One conv block per entry, 2x max-pooling between blocks.
  std::vector<int64_t> widths{16, 32, 64};
  int64_t convs_per_block = 2;
  // Features are tapped after the last conv of this block, i.e. before the
  // (tap_block + 1)-th downsampling.
  int64_t tap_block = 2;
  uint64_t seed = 7;
  // Optional torch archive with pretrained weights; empty means the seeded
  // initialization is the backbone.
  std::string weights;

  std::string id() const;
  json to_json() const;
  static ExtractorConfig from_json(const json& j);
};

// Frozen VGG-style feature network. Weights never change after construction.
class PerceptualExtractorImpl : public torch::nn::Module {
 public:
  explicit PerceptualExtractorImpl(ExtractorConfig cfg = {});

  // Features at the tap layer. 1-channel inputs are replicated to RGB.
  torch::Tensor forward(const torch::Tensor& x);
  // Output of every block up to and including the tap block.
  std::vector<torch::Tensor> features(const torch::Tensor& x);

  int64_t tap_channels() const { return cfg_.widths.at(static_cast<size_t>(cfg_.tap_block)); }
  int64_t tap_stride() const { return int64_t{1} << cfg_.tap_block; }
  const ExtractorConfig& config() const { return cfg_; }

 private:
  ExtractorConfig cfg_;
  std::vector<torch::nn::Sequential> blocks_;
};
TORCH_MODULE(PerceptualExtractor);

class SketchGeneratorImpl : public torch::nn::Module {
 public:
  SketchGeneratorImpl(int64_t in_channels, int64_t width, int64_t upsamplings);
  // (n, c, h, w) features -> (n, 1, h * 2^up, w * 2^up) sketch in [-1, 1].
  torch::Tensor forward(const torch::Tensor& features);

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(SketchGenerator);

// MLP on the flattened (c x c) Gram matrix; returns logits.
class GramDiscriminatorImpl : public torch::nn::Module {
 public:
  GramDiscriminatorImpl(int64_t channels, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& grams);

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(GramDiscriminator);

struct CheckpointSchedule {
  int64_t after = 500;  // warmup steps
  int64_t every = 100;
  int64_t slots = 10;
  std::vector<int64_t> steps() const;
};

struct TomConfig {
  int64_t resolution = 64;
  ExtractorConfig extractor;
  int64_t g_width = 64;
  int64_t d_hidden = 256;
  int64_t batch_size = 8;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  uint64_t seed = 1;
  CheckpointSchedule schedule;

  int64_t upsamplings() const;
  void validate() const;
  json to_json() const;
  static TomConfig from_json(const json& j);
};

// Real line sketches used as the style source; (m, 1, res, res) in [-1, 1].
struct SketchStyleBank {
  torch::Tensor sketches;
  std::vector<std::string> ids;

  int64_t size() const { return sketches.defined() ? sketches.size(0) : 0; }
  static SketchStyleBank load(const fs::path& dir, int64_t resolution);
};

// AdaIN target: content of f_content with the channel statistics of f_sketch.
torch::Tensor make_target(const torch::Tensor& f_content, const torch::Tensor& f_sketch);

struct StepResult {
  loss::LossReport d;  // d_real, d_fake
  loss::LossReport g;  // adv, match
  std::vector<int64_t> pairing;  // bank index paired with each batch image
  torch::Tensor target_stats_error;  // max |stats(target) - stats(f_sketch)|

  loss::LossReport merged() const;
};

class TomTrainer {
 public:
  explicit TomTrainer(TomConfig cfg);

  // One D update followed by one G update on rgb_batch (n, 3, res, res).
  // Each image is paired with a freshly drawn bank sketch.
  StepResult step(const torch::Tensor& rgb_batch, const SketchStyleBank& bank);

  int64_t step_count() const { return step_; }
  const TomConfig& config() const { return cfg_; }
  PerceptualExtractor& extractor() { return extractor_; }
  SketchGenerator& generator() { return generator_; }
  GramDiscriminator& discriminator() { return discriminator_; }

  // Where a state dump goes if a step produces a non-finite loss.
  void set_dump_dir(fs::path dir) { dump_dir_ = std::move(dir); }

 private:
  void dump_and_abort(const std::string& why);

  TomConfig cfg_;
  PerceptualExtractor extractor_{nullptr};
  SketchGenerator generator_{nullptr};
  GramDiscriminator discriminator_{nullptr};
  std::unique_ptr<torch::optim::Adam> g_opt_;
  std::unique_ptr<torch::optim::Adam> d_opt_;
  std::mt19937_64 rng_;
  int64_t step_ = 0;
  fs::path dump_dir_;
};

// Steps at which a snapshot is taken: after, after+every, ... (slots of them).
std::vector<int64_t> checkpoint_steps(int64_t after, int64_t every, int64_t slots);

// Snapshots G weights on schedule and keeps the run manifest current. Disk
// failures are logged and collected; training is not interrupted.
class CheckpointSampler {
 public:
  CheckpointSampler(const TomConfig& cfg, data::RunLayout run);

  std::optional<data::CheckpointEntry> on_step(int64_t step, SketchGenerator& generator);

  const data::CheckpointManifest& manifest() const { return manifest_; }
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<int64_t> schedule_;
  data::RunLayout run_;
  data::CheckpointManifest manifest_;
  std::string config_hash_;
  std::vector<std::string> errors_;
};

struct TrainOptions {
  int64_t steps = 1000;
  int64_t log_every = 100;
};

struct TrainSummary {
  std::vector<std::map<std::string, double>> history;  // one entry per step
  data::CheckpointManifest manifest;
  std::vector<std::string> checkpoint_errors;
};

// Every readable image of dir resized to res, stacked (n, 3, res, res).
// Unreadable files are skipped with a warning; an empty result throws.
torch::Tensor load_rgb_set(const fs::path& dir, int64_t res);

// Full training loop over an in-memory RGB set (n, 3, res, res).
TrainSummary train(const TomConfig& cfg, const torch::Tensor& rgb, const SketchStyleBank& bank,
                   const data::RunLayout& run, const TrainOptions& opts);

// Frozen extractor plus one generator per sampled checkpoint.
class SketchModel {
 public:
  static SketchModel load(const fs::path& run_or_manifest);

  int64_t num_checkpoints() const { return static_cast<int64_t>(generators_.size()); }
  int64_t resolution() const { return cfg_.resolution; }
  const TomConfig& config() const { return cfg_; }
  const std::string& config_hash() const { return config_hash_; }
  const std::vector<int64_t>& checkpoint_steps() const { return steps_; }

  // rgb (3, res, res) or (n, 3, res, res) -> sketch (1|n, 1, res, res).
  torch::Tensor sketchify(const torch::Tensor& rgb, int64_t index) const;
  PerceptualExtractor extractor() const { return extractor_; }

 private:
  TomConfig cfg_;
  std::string config_hash_;
  PerceptualExtractor extractor_{nullptr};
  std::vector<SketchGenerator> generators_;
  std::vector<int64_t> steps_;
};

// Writes <stem>.skt<k>.png for every readable image and every checkpoint,
// plus out_dir/catalog.json. Unreadable images are skipped with a warning.
data::Catalog generate_sketches(const SketchModel& model, const fs::path& rgb_dir,
                                const fs::path& out_dir);

// Fraction of pixels brighter than 0.8 on a [0,1] scale.
double background_fraction(const torch::Tensor& sketch);

}  // namespace s2i::tom
