#include "s2i/tom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "s2i/augment.hpp"
#include "s2i/core_ops.hpp"
#include "s2i/log.hpp"

namespace s2i::tom {

namespace nn = torch::nn;

// ---------------------------------------------------------------- configs

std::string ExtractorConfig::id() const {
  std::string s = weights.empty() ? "seeded-vgg" : "pretrained-vgg";
  for (auto w : widths) s += "-" + std::to_string(w);
  s += "-tap" + std::to_string(tap_block);
  s += weights.empty() ? "-s" + std::to_string(seed) : "";
  return s;
}

json ExtractorConfig::to_json() const {
  return json{{"widths", widths},
              {"convs_per_block", convs_per_block},
              {"tap_block", tap_block},
              {"seed", seed},
              {"weights", weights}};
}

ExtractorConfig ExtractorConfig::from_json(const json& j) {
  ExtractorConfig c;
  c.widths = j.value("widths", c.widths);
  c.convs_per_block = j.value("convs_per_block", c.convs_per_block);
  c.tap_block = j.value("tap_block", c.tap_block);
  c.seed = j.value("seed", c.seed);
  c.weights = j.value("weights", c.weights);
  return c;
}

std::vector<int64_t> CheckpointSchedule::steps() const {
  return checkpoint_steps(after, every, slots);
}

int64_t TomConfig::upsamplings() const { return extractor.tap_block; }

void TomConfig::validate() const {
  if (extractor.tap_block < 0 || extractor.tap_block >= static_cast<int64_t>(extractor.widths.size())) {
    throw std::invalid_argument("TomConfig: tap_block outside the extractor");
  }
  const int64_t stride = int64_t{1} << extractor.tap_block;
  if (resolution < stride || resolution % stride != 0) {
    throw std::invalid_argument("TomConfig: resolution must be a multiple of the tap stride");
  }
  if (batch_size < 1 || lr <= 0) {
    throw std::invalid_argument("TomConfig: batch_size and lr must be positive");
  }
}

json TomConfig::to_json() const {
  return json{{"resolution", resolution},
              {"extractor", extractor.to_json()},
              {"g_width", g_width},
              {"d_hidden", d_hidden},
              {"batch_size", batch_size},
              {"lr", lr},
              {"beta1", beta1},
              {"beta2", beta2},
              {"seed", seed},
              {"ckpt_after", schedule.after},
              {"ckpt_every", schedule.every},
              {"ckpt_slots", schedule.slots}};
}

TomConfig TomConfig::from_json(const json& j) {
  TomConfig c;
  c.resolution = j.value("resolution", c.resolution);
  if (j.contains("extractor")) c.extractor = ExtractorConfig::from_json(j.at("extractor"));
  c.g_width = j.value("g_width", c.g_width);
  c.d_hidden = j.value("d_hidden", c.d_hidden);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.seed = j.value("seed", c.seed);
  c.schedule.after = j.value("ckpt_after", c.schedule.after);
  c.schedule.every = j.value("ckpt_every", c.schedule.every);
  c.schedule.slots = j.value("ckpt_slots", c.schedule.slots);
  return c;
}

// ---------------------------------------------------------------- networks

PerceptualExtractorImpl::PerceptualExtractorImpl(ExtractorConfig cfg) : cfg_(std::move(cfg)) {
  int64_t in = 3;
  for (size_t b = 0; b < cfg_.widths.size(); ++b) {
    nn::Sequential block;
    for (int64_t i = 0; i < cfg_.convs_per_block; ++i) {
      block->push_back(nn::Conv2d(nn::Conv2dOptions(in, cfg_.widths[b], 3).padding(1)));
      block->push_back(nn::ReLU());
      in = cfg_.widths[b];
    }
    blocks_.push_back(register_module("block" + std::to_string(b), block));
    if (static_cast<int64_t>(b) == cfg_.tap_block) break;
  }

  if (!cfg_.weights.empty()) {
    torch::serialize::InputArchive archive;
    archive.load_from(cfg_.weights);
    load(archive);
  } else {
    torch::NoGradGuard no_grad;
    auto gen = at::detail::createCPUGenerator(cfg_.seed);
    for (auto& p : named_parameters()) {
      if (p.key().ends_with("weight")) {
        const auto fan_in = static_cast<double>(p.value().numel() / p.value().size(0));
        p.value().normal_(0.0, std::sqrt(2.0 / fan_in), gen);
      } else {
        p.value().zero_();
      }
    }
  }
  for (auto& p : parameters()) p.set_requires_grad(false);
  eval();
}

std::vector<torch::Tensor> PerceptualExtractorImpl::features(const torch::Tensor& x) {
  auto h = x.size(1) == 1 ? x.expand({x.size(0), 3, x.size(2), x.size(3)}) : x;
  std::vector<torch::Tensor> out;
  for (size_t b = 0; b < blocks_.size(); ++b) {
    if (b > 0) h = torch::max_pool2d(h, 2);
    h = blocks_[b]->forward(h);
    out.push_back(h);
  }
  return out;
}

torch::Tensor PerceptualExtractorImpl::forward(const torch::Tensor& x) { return features(x).back(); }

SketchGeneratorImpl::SketchGeneratorImpl(int64_t in_channels, int64_t width, int64_t upsamplings) {
  nn::Sequential net;
  net->push_back(nn::Conv2d(nn::Conv2dOptions(in_channels, width, 3).padding(1)));
  net->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(width).affine(true)));
  net->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  int64_t ch = width;
  for (int64_t i = 0; i < upsamplings; ++i) {
    const int64_t next = std::max<int64_t>(16, ch / 2);
    net->push_back(nn::Upsample(nn::UpsampleOptions()
                                    .scale_factor(std::vector<double>{2.0, 2.0})
                                    .mode(torch::kNearest)));
    net->push_back(nn::Conv2d(nn::Conv2dOptions(ch, next, 3).padding(1)));
    net->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(next).affine(true)));
    net->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    ch = next;
  }
  net->push_back(nn::Conv2d(nn::Conv2dOptions(ch, 1, 3).padding(1)));
  net->push_back(nn::Tanh());
  net_ = register_module("net", net);
}

torch::Tensor SketchGeneratorImpl::forward(const torch::Tensor& features) {
  return net_->forward(features);
}

GramDiscriminatorImpl::GramDiscriminatorImpl(int64_t channels, int64_t hidden) {
  net_ = register_module(
      "net", nn::Sequential(nn::Flatten(), nn::Linear(channels * channels, hidden),
                            nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                            nn::Linear(hidden, std::max<int64_t>(1, hidden / 4)),
                            nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                            nn::Linear(std::max<int64_t>(1, hidden / 4), 1)));
}

torch::Tensor GramDiscriminatorImpl::forward(const torch::Tensor& grams) {
  return net_->forward(grams).squeeze(-1);
}

// ---------------------------------------------------------------- bank

SketchStyleBank SketchStyleBank::load(const fs::path& dir, int64_t resolution) {
  SketchStyleBank bank;
  std::vector<torch::Tensor> imgs;
  for (const auto& p : data::list_images(dir)) {
    try {
      imgs.push_back(data::resize(data::load_image(p, 1), resolution, resolution));
      bank.ids.push_back(p.stem().string());
    } catch (const data::ImageDecodeError& e) {
      log::warn("sketch bank: skipping ", p.string(), ": ", e.what());
    }
  }
  if (imgs.empty()) {
    throw std::invalid_argument("sketch bank " + dir.string() + " holds no readable images");
  }
  bank.sketches = torch::stack(imgs);
  return bank;
}

// ---------------------------------------------------------------- training

torch::Tensor make_target(const torch::Tensor& f_content, const torch::Tensor& f_sketch) {
  if (f_content.dim() != f_sketch.dim() ||
      f_content.size(-3) != f_sketch.size(-3)) {
    throw std::invalid_argument("make_target: content and sketch features need equal channel counts");
  }
  return ops::adain(f_content, ops::channel_stats(f_sketch));
}

loss::LossReport StepResult::merged() const {
  loss::LossReport r;
  for (const auto* part : {&d, &g}) {
    for (const auto& n : part->names()) r.add(n, part->term(n));
  }
  return r;
}

TomTrainer::TomTrainer(TomConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
  cfg_.validate();
  torch::manual_seed(static_cast<int64_t>(cfg_.seed));
  extractor_ = PerceptualExtractor(cfg_.extractor);
  generator_ = SketchGenerator(extractor_->tap_channels(), cfg_.g_width, cfg_.upsamplings());
  discriminator_ = GramDiscriminator(extractor_->tap_channels(), cfg_.d_hidden);
  const auto adam = torch::optim::AdamOptions(cfg_.lr).betas({cfg_.beta1, cfg_.beta2});
  g_opt_ = std::make_unique<torch::optim::Adam>(generator_->parameters(), adam);
  d_opt_ = std::make_unique<torch::optim::Adam>(discriminator_->parameters(), adam);
}

StepResult TomTrainer::step(const torch::Tensor& rgb_batch, const SketchStyleBank& bank) {
  if (rgb_batch.dim() != 4 || rgb_batch.size(0) == 0 || rgb_batch.size(1) != 3) {
    throw std::invalid_argument("tom step: expected a non-empty (n,3,h,w) batch");
  }
  if (bank.size() == 0) {
    throw std::invalid_argument("tom step: empty sketch bank");
  }
  if (rgb_batch.size(2) != cfg_.resolution || rgb_batch.size(3) != cfg_.resolution ||
      bank.sketches.size(2) != cfg_.resolution || bank.sketches.size(3) != cfg_.resolution) {
    throw std::invalid_argument("tom step: inputs must be at the configured resolution");
  }

  const int64_t n = rgb_batch.size(0);
  StepResult result;
  result.pairing.resize(static_cast<size_t>(n));
  for (auto& p : result.pairing) {
    p = static_cast<int64_t>(rng_() % static_cast<uint64_t>(bank.size()));
  }
  const auto idx = torch::tensor(result.pairing, torch::kLong);
  const auto sketches = bank.sketches.index_select(0, idx);

  torch::Tensor f_content, f_sketch, target;
  {
    torch::NoGradGuard no_grad;
    f_content = extractor_->forward(rgb_batch);
    f_sketch = extractor_->forward(sketches);
    target = make_target(f_content, f_sketch);
    const auto ts = ops::channel_stats(target);
    const auto ss = ops::channel_stats(f_sketch);
    result.target_stats_error =
        torch::max((ts.mean - ss.mean).abs().max(), (ts.std - ss.std).abs().max());
  }

  generator_->train();
  const auto fake = generator_->forward(f_content);
  const auto f_hat = extractor_->forward(fake);

  // Discriminator: real sketch statistics vs generated ones.
  const auto real_p = torch::sigmoid(discriminator_->forward(ops::gram(f_sketch)));
  const auto fake_p = torch::sigmoid(discriminator_->forward(ops::gram(f_hat.detach())));
  result.d = loss::tom_d_loss(real_p, fake_p);
  d_opt_->zero_grad();
  result.d.total().backward();
  d_opt_->step();

  // Generator: fool D on Gram statistics, match the AdaIN target.
  const auto fake_p_g = torch::sigmoid(discriminator_->forward(ops::gram(f_hat)));
  result.g = loss::tom_g_loss(fake_p_g, target, f_hat);
  g_opt_->zero_grad();
  result.g.total().backward();
  g_opt_->step();

  ++step_;
  const double d_total = result.d.total_value();
  const double g_total = result.g.total_value();
  if (!std::isfinite(d_total) || !std::isfinite(g_total)) {
    dump_and_abort("non-finite loss at step " + std::to_string(step_));
  }
  return result;
}

void TomTrainer::dump_and_abort(const std::string& why) {
  if (!dump_dir_.empty()) {
    try {
      fs::create_directories(dump_dir_);
      const auto tag = std::to_string(step_);
      torch::save(generator_, (dump_dir_ / ("diverged_g_" + tag + ".pt")).string());
      torch::save(discriminator_, (dump_dir_ / ("diverged_d_" + tag + ".pt")).string());
      log::error("sketch generator diverged; state dumped to ", dump_dir_.string());
    } catch (const std::exception& e) {
      log::error("state dump failed: ", e.what());
    }
  }
  throw TrainingDiverged(why);
}

std::vector<int64_t> checkpoint_steps(int64_t after, int64_t every, int64_t slots) {
  if (after < 0 || slots < 0 || (slots > 1 && every < 1)) {
    throw std::invalid_argument("checkpoint schedule: after/slots must be >= 0, every >= 1");
  }
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(slots));
  for (int64_t i = 0; i < slots; ++i) out.push_back(after + i * every);
  return out;
}

CheckpointSampler::CheckpointSampler(const TomConfig& cfg, data::RunLayout run)
    : schedule_(cfg.schedule.steps()), run_(std::move(run)), manifest_(run_.dir) {
  config_hash_ = manifest_.register_config(cfg.to_json());
}

std::optional<data::CheckpointEntry> CheckpointSampler::on_step(int64_t step,
                                                                SketchGenerator& generator) {
  if (std::find(schedule_.begin(), schedule_.end(), step) == schedule_.end()) {
    return std::nullopt;
  }
  char name[32];
  std::snprintf(name, sizeof(name), "tom_%07lld.pt", static_cast<long long>(step));
  data::CheckpointEntry entry{data::Role::kTom, step, (fs::path("ckpt") / name).generic_string(),
                              config_hash_, json::object()};
  try {
    fs::create_directories(run_.ckpt_dir());
    torch::save(generator, (run_.ckpt_dir() / name).string());
    manifest_.add(entry);
    manifest_.save(run_.manifest());
  } catch (const std::exception& e) {
    const auto msg = "checkpoint at step " + std::to_string(step) + " failed: " + e.what();
    log::warn(msg);
    errors_.push_back(msg);
    return std::nullopt;
  }
  return entry;
}

torch::Tensor load_rgb_set(const fs::path& dir, int64_t res) {
  std::vector<torch::Tensor> imgs;
  for (const auto& p : data::list_images(dir)) {
    try {
      imgs.push_back(data::resize(data::load_image(p, 3), res, res));
    } catch (const data::ImageDecodeError& e) {
      log::warn("skipping ", p.string(), ": ", e.what());
    }
  }
  if (imgs.empty()) throw std::invalid_argument("no readable images in " + dir.string());
  return torch::stack(imgs);
}

TrainSummary train(const TomConfig& cfg, const torch::Tensor& rgb, const SketchStyleBank& bank,
                   const data::RunLayout& run, const TrainOptions& opts) {
  if (rgb.dim() != 4 || rgb.size(0) == 0) {
    throw std::invalid_argument("tom train: empty RGB set");
  }
  TomTrainer trainer(cfg);
  trainer.set_dump_dir(run.dir / "dump");
  CheckpointSampler sampler(cfg, run);
  TrainSummary summary;
  const int64_t n = rgb.size(0);
  const int64_t b = std::min(cfg.batch_size, n);
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t s = 0; s < opts.steps; ++s) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(augment::derive_seed(cfg.seed, 0, static_cast<uint64_t>(s)));
    for (int64_t i = 0; i < b; ++i) {
      const auto j = i + static_cast<int64_t>(rng() % static_cast<uint64_t>(n - i));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    const auto idx = torch::tensor(std::vector<int64_t>(order.begin(), order.begin() + b), torch::kLong);
    auto res = trainer.step(rgb.index_select(0, idx), bank);
    auto values = res.merged().values();
    values["target_stats_error"] = res.target_stats_error.item<double>();
    summary.history.push_back(values);
    if (opts.log_every > 0 && trainer.step_count() % opts.log_every == 0) {
      log::info("tom step ", trainer.step_count(), ": d_real ", values["d_real"], " d_fake ",
                values["d_fake"], " adv ", values["adv"], " match ", values["match"]);
    }
    sampler.on_step(trainer.step_count(), trainer.generator());
  }
  summary.manifest = sampler.manifest();
  summary.checkpoint_errors = sampler.errors();
  return summary;
}

// ---------------------------------------------------------------- inference

SketchModel SketchModel::load(const fs::path& run_or_manifest) {
  const auto manifest = data::CheckpointManifest::load(data::manifest_path(run_or_manifest));
  auto entries = manifest.by_role(data::Role::kTom);
  if (entries.empty()) {
    throw std::runtime_error("no sketch-generator checkpoints in " + run_or_manifest.string());
  }
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.step < b.step; });
  SketchModel m;
  m.cfg_ = TomConfig::from_json(manifest.config_for(entries.front()));
  m.config_hash_ = entries.front().config_hash;
  m.extractor_ = PerceptualExtractor(m.cfg_.extractor);
  for (const auto& e : entries) {
    manifest.verify(e, m.cfg_.to_json());
    SketchGenerator g(m.extractor_->tap_channels(), m.cfg_.g_width, m.cfg_.upsamplings());
    torch::load(g, manifest.resolve(e).string());
    g->eval();
    for (auto& p : g->parameters()) p.set_requires_grad(false);
    m.generators_.push_back(g);
    m.steps_.push_back(e.step);
  }
  return m;
}

torch::Tensor SketchModel::sketchify(const torch::Tensor& rgb, int64_t index) const {
  if (index < 0 || index >= num_checkpoints()) {
    throw std::out_of_range("sketchify: checkpoint index " + std::to_string(index) +
                            " out of range");
  }
  const auto batch = rgb.dim() == 3 ? rgb.unsqueeze(0) : rgb;
  if (batch.dim() != 4 || batch.size(1) != 3 || batch.size(2) != cfg_.resolution ||
      batch.size(3) != cfg_.resolution) {
    throw std::invalid_argument("sketchify: expected RGB input at the model resolution");
  }
  torch::NoGradGuard no_grad;
  auto ext = extractor_;
  auto gen = generators_[static_cast<size_t>(index)];
  return gen->forward(ext->forward(batch));
}

data::Catalog generate_sketches(const SketchModel& model, const fs::path& rgb_dir,
                                const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto images = data::list_images(rgb_dir);
  if (images.empty()) {
    log::warn("generate: no images in ", rgb_dir.string());
  }
  for (const auto& path : images) {
    torch::Tensor img;
    try {
      img = data::load_image(path, 3);
    } catch (const data::ImageDecodeError& e) {
      log::warn("generate: skipping ", path.string(), ": ", e.what());
      continue;
    }
    img = data::resize(img, model.resolution(), model.resolution());
    const auto stem = path.stem().string();
    for (int64_t k = 0; k < model.num_checkpoints(); ++k) {
      const auto sketch = model.sketchify(img, k).squeeze(0);
      data::save_png(sketch, out_dir / data::sketch_file_name(stem, k));
    }
  }
  auto catalog = data::build_catalog(rgb_dir, out_dir, out_dir);
  catalog.config_hash = model.config_hash();
  catalog.checkpoint_ids = model.checkpoint_steps();
  data::save_catalog(catalog, out_dir / "catalog.json");
  return catalog;
}

double background_fraction(const torch::Tensor& sketch) {
  return ((sketch + 1.0) * 0.5 > 0.8).to(torch::kFloat64).mean().item<double>();
}

}  // namespace s2i::tom
