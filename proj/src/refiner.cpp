#include "s2i/refiner.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "s2i/augment.hpp"
#include "s2i/core_ops.hpp"
#include "s2i/log.hpp"

namespace s2i::refine {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

torch::Tensor lrelu(const torch::Tensor& x) {
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
}

torch::Tensor up2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kNearest));
}

}  // namespace

// ---------------------------------------------------------------- config

RefinerConfig RefinerConfig::for_stage1(const ae::AeModel& ae, RefinerConfig base) {
  base.resolution = ae.config().resolution;
  base.style_dim = ae.config().style_dim;
  base.ae_config_hash = ae.config_hash();
  return base;
}

void RefinerConfig::validate() const {
  if (resolution < 8 || resolution % 4 != 0) {
    throw std::invalid_argument("RefinerConfig: resolution must be a multiple of 4, >= 8");
  }
  if (width < 1 || d_width < 1 || batch_size < 1 || lr <= 0) {
    throw std::invalid_argument("RefinerConfig: widths, batch_size and lr must be positive");
  }
  if (style_dim < 1) throw std::invalid_argument("RefinerConfig: style_dim must be positive");
  if (!(noise_scale >= 0) || !(lambda >= 0)) {
    throw std::invalid_argument("RefinerConfig: noise_scale and lambda must be >= 0");
  }
}

json RefinerConfig::to_json() const {
  return json{{"resolution", resolution}, {"style_dim", style_dim},
              {"width", width},           {"d_width", d_width},
              {"use_style_skip", use_style_skip},
              {"noise_scale", noise_scale}, {"lambda", lambda},
              {"batch_size", batch_size}, {"lr", lr},
              {"beta1", beta1},           {"beta2", beta2},
              {"seed", seed},             {"ae_config_hash", ae_config_hash}};
}

RefinerConfig RefinerConfig::from_json(const json& j) {
  RefinerConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.style_dim = j.value("style_dim", c.style_dim);
  c.width = j.value("width", c.width);
  c.d_width = j.value("d_width", c.d_width);
  c.use_style_skip = j.value("use_style_skip", c.use_style_skip);
  c.noise_scale = j.value("noise_scale", c.noise_scale);
  c.lambda = j.value("lambda", c.lambda);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.seed = j.value("seed", c.seed);
  c.ae_config_hash = j.value("ae_config_hash", c.ae_config_hash);
  return c;
}

// ---------------------------------------------------------------- networks

RefinerGeneratorImpl::RefinerGeneratorImpl(const RefinerConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int64_t w = cfg_.width;
  in_ = register_module("stem", nn::Conv2d(nn::Conv2dOptions(3, w, 3).padding(1)));
  down1_ = register_module("down1", nn::Conv2d(nn::Conv2dOptions(w, 2 * w, 4).stride(2).padding(1)));
  down2_ = register_module("down2",
                           nn::Conv2d(nn::Conv2dOptions(2 * w, 4 * w, 4).stride(2).padding(1)));
  mid_ = register_module("mid", nn::Conv2d(nn::Conv2dOptions(4 * w, 4 * w, 3).padding(1)));
  up1_ = register_module("up1", nn::Conv2d(nn::Conv2dOptions(6 * w, 2 * w, 3).padding(1)));
  up2_ = register_module("up2", nn::Conv2d(nn::Conv2dOptions(3 * w, w, 3).padding(1)));
  out_ = register_module("out", nn::Conv2d(nn::Conv2dOptions(w, 3, 3).padding(1)));
  noise_gain_ = register_parameter("noise_gain", torch::ones({3}));
  // Zero init: training starts from unit scales.
  style_proj_ = register_module("style_proj", nn::ModuleList());
  for (int64_t ch : {4 * w, 2 * w, w}) {
    nn::Linear proj(cfg_.style_dim, ch);
    torch::nn::init::zeros_(proj->weight);
    torch::nn::init::zeros_(proj->bias);
    style_proj_->push_back(proj);
  }
}

torch::Tensor RefinerGeneratorImpl::forward(const torch::Tensor& img, const torch::Tensor& style,
                                            at::Generator& noise) {
  auto site = [&](torch::Tensor h, int64_t i) {
    if (cfg_.noise_scale > 0) {
      const auto z = torch::randn({h.size(0), 1, h.size(2), h.size(3)}, noise, h.options());
      h = h + cfg_.noise_scale * noise_gain_[i] * z;
    }
    if (cfg_.use_style_skip && style.defined()) {
      h = ops::channel_scale(h, 1 + style_proj_[i]->as<nn::Linear>()->forward(style));
    }
    return lrelu(h);
  };
  const auto e0 = lrelu(in_->forward(img));
  const auto e1 = lrelu(down1_->forward(e0));
  const auto e2 = lrelu(down2_->forward(e1));
  auto h = site(mid_->forward(e2), 0);
  h = site(up1_->forward(torch::cat({up2(h), e1}, 1)), 1);
  h = site(up2_->forward(torch::cat({up2(h), e0}, 1)), 2);
  return torch::tanh(out_->forward(h));
}

RefinerDiscriminatorImpl::RefinerDiscriminatorImpl(const RefinerConfig& cfg) {
  const int64_t w = cfg.d_width;
  nn::Sequential net;
  int64_t ch = 3, next = w, res = cfg.resolution;
  while (res > 8) {
    net->push_back(nn::Conv2d(nn::Conv2dOptions(ch, next, 4).stride(2).padding(1)));
    net->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    ch = next;
    next = std::min<int64_t>(next * 2, 256);
    res /= 2;
  }
  net->push_back(nn::Conv2d(nn::Conv2dOptions(ch, 1, 3).padding(1)));
  net_ = register_module("net", net);
}

torch::Tensor RefinerDiscriminatorImpl::forward(const torch::Tensor& img) {
  return net_->forward(img).mean({1, 2, 3});
}

// ---------------------------------------------------------------- training

RefinerBatch make_batch(const ae::AeDataset& data, const RefinerConfig& cfg, int64_t step) {
  const int64_t n = data.size();
  if (n < 1) throw std::invalid_argument("refiner batch: empty dataset");
  const int64_t b = std::min(cfg.batch_size, n);
  std::mt19937_64 rng(augment::derive_seed(cfg.seed, 20, static_cast<uint64_t>(step)));
  std::vector<int64_t> pool(static_cast<size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  for (int64_t i = 0; i < b; ++i) {
    const auto j = i + static_cast<int64_t>(rng() % static_cast<uint64_t>(n - i));
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  RefinerBatch batch;
  std::vector<torch::Tensor> sk, st;
  for (int64_t i = 0; i < b; ++i) {
    const int64_t id = pool[static_cast<size_t>(i)];
    const auto k = static_cast<int64_t>(rng() % static_cast<uint64_t>(data.sketches_per_image()));
    batch.style_ids.push_back(id);
    batch.sketch_ids.push_back(id);
    sk.push_back(data.sketches[id][k]);
    st.push_back(data.images[id]);
  }
  batch.sketches = torch::stack(sk);
  batch.styles = torch::stack(st);
  return batch;
}

std::map<std::string, double> RefinerStepResult::values() const {
  auto v = d.values();
  for (const auto& [k, x] : g.values()) v[k] = x;
  v["g_rec"] = g_rec;
  return v;
}

RefinerTrainer::RefinerTrainer(const ae::AeModel& stage1, RefinerConfig cfg)
    : stage1_(stage1), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (!stage1_.trained()) {
    throw ae::UntrainedModel("refiner: the stage-1 model must be trained first");
  }
  if (cfg_.resolution != stage1_.config().resolution ||
      cfg_.style_dim != stage1_.config().style_dim) {
    throw std::invalid_argument("refiner: resolution/style_dim differ from the stage-1 model");
  }
  torch::manual_seed(static_cast<int64_t>(cfg_.seed));
  g_ = RefinerGenerator(cfg_);
  d_ = RefinerDiscriminator(cfg_);
  const auto adam = torch::optim::AdamOptions(cfg_.lr).betas({cfg_.beta1, cfg_.beta2});
  g_opt_ = std::make_unique<torch::optim::Adam>(g_->parameters(), adam);
  d_opt_ = std::make_unique<torch::optim::Adam>(d_->parameters(), adam);
}

RefinerStepResult RefinerTrainer::step(const RefinerBatch& batch) {
  if (batch.style_ids.size() != batch.sketch_ids.size() ||
      static_cast<int64_t>(batch.style_ids.size()) != batch.styles.size(0)) {
    throw std::invalid_argument("refiner step: batch bookkeeping is inconsistent");
  }
  for (size_t i = 0; i < batch.style_ids.size(); ++i) {
    if (batch.style_ids[i] != batch.sketch_ids[i]) {
      throw MismatchedPair("refiner step: sketch of image " + std::to_string(batch.sketch_ids[i]) +
                           " paired with style image " + std::to_string(batch.style_ids[i]));
    }
  }
  const auto img_ae = stage1_.infer(batch.sketches, batch.styles);
  const auto code = cfg_.use_style_skip ? stage1_.encode_style(batch.styles) : torch::Tensor();
  auto gen = at::detail::createCPUGenerator(
      augment::derive_seed(cfg_.seed, 21, static_cast<uint64_t>(step_)));

  g_->train();
  d_->train();
  const auto fake = g_->forward(img_ae, code, gen);

  RefinerStepResult r;
  const auto real_s = d_->forward(batch.styles);
  const auto fake_s = d_->forward(fake.detach());
  const auto d_loss = loss::refiner_d_loss(real_s, fake_s);
  d_opt_->zero_grad();
  d_loss.backward();
  d_opt_->step();
  r.d.add("d_real", torch::relu(1 - real_s).mean().detach());
  r.d.add("d_fake", torch::relu(1 + fake_s).mean().detach());

  r.g = loss::refiner_g_loss(d_->forward(fake), fake, batch.styles, cfg_.lambda);
  g_opt_->zero_grad();
  r.g.total().backward();
  g_opt_->step();
  r.g_rec = loss::mse(fake.detach(), batch.styles, "refiner g_rec").item<double>();

  ++step_;
  if (!std::isfinite(d_loss.item<double>()) || !std::isfinite(r.g.total_value())) {
    std::string diag;
    for (const auto& [k, v] : r.values()) diag += " " + k + "=" + std::to_string(v);
    throw TrainingDiverged("refiner step " + std::to_string(step_) + ": non-finite loss;" + diag);
  }
  return r;
}

// ---------------------------------------------------------------- model

RefinerModel::RefinerModel(RefinerConfig cfg, RefinerGenerator g)
    : cfg_(std::move(cfg)), g_(std::move(g)) {
  cfg_.validate();
  config_hash_ = data::config_hash(cfg_.to_json());
  for (auto& p : g_->parameters()) p.set_requires_grad(false);
  g_->eval();
}

RefinerModel RefinerModel::load(const fs::path& run_or_manifest) {
  const auto manifest = data::CheckpointManifest::load(data::manifest_path(run_or_manifest));
  const auto& entry = manifest.latest(data::Role::kGan);
  auto cfg = RefinerConfig::from_json(manifest.config_for(entry));
  manifest.verify(entry, cfg.to_json());
  RefinerGenerator g(cfg);
  torch::load(g, manifest.resolve(entry).string());
  RefinerModel m(cfg, g);
  m.step_ = entry.step;
  return m;
}

torch::Tensor RefinerModel::refine(const torch::Tensor& img_ae, const torch::Tensor& style,
                                   uint64_t noise_seed) const {
  const bool single = img_ae.dim() == 3;
  const auto x = single ? img_ae.unsqueeze(0) : img_ae;
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != cfg_.resolution ||
      x.size(3) != cfg_.resolution) {
    throw std::invalid_argument("refine: expected 3 x " + std::to_string(cfg_.resolution) +
                                " x " + std::to_string(cfg_.resolution) + " input");
  }
  require_finite(x, "refine");
  torch::Tensor s;
  if (style.defined()) {
    s = style.dim() == 1 ? style.unsqueeze(0) : style;
    if (s.size(0) != x.size(0) || s.size(1) != cfg_.style_dim) {
      throw std::invalid_argument("refine: style code does not match the input batch");
    }
  }
  torch::NoGradGuard no_grad;
  auto gen = at::detail::createCPUGenerator(noise_seed);
  auto g = g_;
  const auto out = g->forward(x, s, gen);
  return single ? out.squeeze(0) : out;
}

data::CheckpointEntry RefinerModel::save(const data::RunLayout& run, int64_t step,
                                         const json& metrics) {
  auto manifest = fs::exists(run.manifest()) ? data::CheckpointManifest::load(run.manifest())
                                             : data::CheckpointManifest(run.dir);
  config_hash_ = manifest.register_config(cfg_.to_json());
  const auto name = "gan_" + std::to_string(step) + ".pt";
  fs::create_directories(run.ckpt_dir());
  torch::save(g_, (run.ckpt_dir() / name).string());
  data::CheckpointEntry entry{data::Role::kGan, step, (fs::path("ckpt") / name).generic_string(),
                              config_hash_, metrics};
  manifest.add(entry);
  manifest.save(run.manifest());
  step_ = step;
  return entry;
}

RefinerTrainSummary train(const ae::AeModel& stage1, const RefinerConfig& cfg,
                          const ae::AeDataset& data, const data::RunLayout& run,
                          const RefinerTrainOptions& opts) {
  RefinerTrainer trainer(stage1, cfg);
  RefinerTrainSummary summary;
  for (int64_t s = 0; s < opts.steps; ++s) {
    const auto r = trainer.step(make_batch(data, cfg, s));
    summary.history.push_back(r.values());
    if (opts.log_every > 0 && trainer.step_count() % opts.log_every == 0) {
      const auto& v = summary.history.back();
      log::info("refiner step ", trainer.step_count(), ": d_real=", v.at("d_real"),
                " d_fake=", v.at("d_fake"), " g_adv=", v.at("g_adv"), " g_rec=", v.at("g_rec"));
    }
  }
  RefinerModel model(trainer.config(), trainer.generator());
  json metrics = json::object();
  if (!summary.history.empty()) {
    for (const auto& [k, v] : summary.history.back()) metrics[k] = v;
  }
  summary.checkpoint = model.save(run, trainer.step_count(), metrics);
  return summary;
}

double trend_slope(const std::vector<double>& ys) {
  const auto n = static_cast<double>(ys.size());
  if (ys.size() < 2) throw std::invalid_argument("trend_slope: need at least two points");
  const double mx = (n - 1) / 2.0;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0, sxx = 0;
  for (size_t i = 0; i < ys.size(); ++i) {
    const double dx = static_cast<double>(i) - mx;
    sxy += dx * (ys[i] - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace s2i::refine
