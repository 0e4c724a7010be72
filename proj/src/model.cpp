#include "s2i/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "s2i/log.hpp"

namespace s2i::ae {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

constexpr int64_t kFullDatasetSize = 15000;
constexpr int64_t kFullKLo = 500;
constexpr int64_t kFullKHi = 2000;

int64_t log2_exact(int64_t ratio, const char* what) {
  int64_t n = 0;
  while ((int64_t{1} << n) < ratio) ++n;
  if ((int64_t{1} << n) != ratio) {
    throw std::invalid_argument(std::string(what) + " must be a power of two");
  }
  return n;
}

nn::LeakyReLU lrelu() { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); }

std::string orientation_name(loss::TripletOrientation o) {
  return o == loss::TripletOrientation::kConventional ? "conventional" : "as_printed";
}

loss::TripletOrientation parse_orientation(const std::string& s) {
  if (s == "conventional") return loss::TripletOrientation::kConventional;
  if (s == "as_printed") return loss::TripletOrientation::kAsPrinted;
  throw std::invalid_argument("unknown triplet orientation '" + s + "'");
}

json interval_json(const augment::Interval& iv) { return json::array({iv.lo, iv.hi}); }

augment::Interval interval_from(const json& j, augment::Interval fallback) {
  if (!j.is_array() || j.size() != 2) return fallback;
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

KBounds k_bounds(int64_t n) {
  if (n < 2) {
    throw std::invalid_argument("k_bounds: a class subset needs at least 2 images");
  }
  if (n >= kFullDatasetSize) return {kFullKLo, kFullKHi};
  const int64_t lo = std::max<int64_t>(2, kFullKLo * n / kFullDatasetSize);
  const int64_t hi_raw = (kFullKHi * n + kFullDatasetSize - 1) / kFullDatasetSize;
  const int64_t hi = std::max(lo, std::min(n, hi_raw));
  return {lo, hi};
}

// ---------------------------------------------------------------- config

AeConfig AeConfig::vanilla(AeConfig base) {
  base.weights.c_tri = 0;
  base.weights.s_tri = 0;
  base.weights.s_cls = 0;
  base.weights.c_cls = 0;
  return base;
}

bool AeConfig::is_vanilla() const {
  return weights.c_tri == 0 && weights.s_tri == 0 && weights.s_cls == 0 && weights.c_cls == 0;
}

int64_t AeConfig::upsamplings() const {
  if (content_grid < 1 || resolution % content_grid != 0) {
    throw std::invalid_argument("AeConfig: resolution must be a multiple of content_grid");
  }
  return log2_exact(resolution / content_grid, "resolution / content_grid");
}

void AeConfig::validate() const {
  upsamplings();
  if (style_dim < 1 || content_channels < 1 || decoder_width < 1 || encoder_width < 1) {
    throw std::invalid_argument("AeConfig: widths must be positive");
  }
  if (decoder_width > style_dim) {
    throw std::invalid_argument("AeConfig: decoder_width may not exceed style_dim");
  }
  if (k < 2) throw std::invalid_argument("AeConfig: k must be >= 2");
  if (batch_size < 2) throw std::invalid_argument("AeConfig: batch_size must be >= 2");
  if (refresh_every < 0 || mask_regions < 0 || lr <= 0) {
    throw std::invalid_argument("AeConfig: refresh_every, mask_regions and lr out of range");
  }
  margins.validate();
  style_aug.validate();
}

json AeConfig::to_json() const {
  return json{
      {"resolution", resolution},
      {"style_dim", style_dim},
      {"content_channels", content_channels},
      {"content_grid", content_grid},
      {"decoder_width", decoder_width},
      {"encoder_width", encoder_width},
      {"mask_rule", std::string(ops::to_string(mask_rule))},
      {"margins", {{"alpha", margins.alpha}, {"beta", margins.beta}}},
      {"orientation", orientation_name(orientation)},
      {"weights",
       {{"rec", weights.rec},
        {"c_tri", weights.c_tri},
        {"s_tri", weights.s_tri},
        {"s_cls", weights.s_cls},
        {"c_cls", weights.c_cls}}},
      {"k", k},
      {"refresh_every", refresh_every},
      {"batch_size", batch_size},
      {"lr", lr},
      {"beta1", beta1},
      {"beta2", beta2},
      {"seed", seed},
      {"style_aug",
       {{"crop", interval_json(style_aug.crop)},
        {"rotate", interval_json(style_aug.rotate)},
        {"scale", interval_json(style_aug.scale)},
        {"hflip_prob", style_aug.hflip_prob},
        {"apply_prob", style_aug.apply_prob}}},
      {"mask_regions", mask_regions},
  };
}

AeConfig AeConfig::from_json(const json& j) {
  AeConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.style_dim = j.value("style_dim", c.style_dim);
  c.content_channels = j.value("content_channels", c.content_channels);
  c.content_grid = j.value("content_grid", c.content_grid);
  c.decoder_width = j.value("decoder_width", c.decoder_width);
  c.encoder_width = j.value("encoder_width", c.encoder_width);
  if (j.contains("mask_rule")) c.mask_rule = ops::parse_mask_rule(j.at("mask_rule").get<std::string>());
  if (j.contains("margins")) {
    c.margins.alpha = j.at("margins").value("alpha", c.margins.alpha);
    c.margins.beta = j.at("margins").value("beta", c.margins.beta);
  }
  if (j.contains("orientation")) c.orientation = parse_orientation(j.at("orientation"));
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.rec = w.value("rec", c.weights.rec);
    c.weights.c_tri = w.value("c_tri", c.weights.c_tri);
    c.weights.s_tri = w.value("s_tri", c.weights.s_tri);
    c.weights.s_cls = w.value("s_cls", c.weights.s_cls);
    c.weights.c_cls = w.value("c_cls", c.weights.c_cls);
  }
  c.k = j.value("k", c.k);
  c.refresh_every = j.value("refresh_every", c.refresh_every);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.seed = j.value("seed", c.seed);
  if (j.contains("style_aug")) {
    const auto& a = j.at("style_aug");
    c.style_aug.crop = interval_from(a.value("crop", json()), c.style_aug.crop);
    c.style_aug.rotate = interval_from(a.value("rotate", json()), c.style_aug.rotate);
    c.style_aug.scale = interval_from(a.value("scale", json()), c.style_aug.scale);
    c.style_aug.hflip_prob = a.value("hflip_prob", c.style_aug.hflip_prob);
    c.style_aug.apply_prob = a.value("apply_prob", c.style_aug.apply_prob);
  }
  c.mask_regions = j.value("mask_regions", c.mask_regions);
  return c;
}

// ---------------------------------------------------------------- networks

StyleEncoderImpl::StyleEncoderImpl(const AeConfig& cfg) {
  nn::Sequential body;
  int64_t ch = cfg.encoder_width;
  body->push_back(nn::Conv2d(nn::Conv2dOptions(3, ch, 3).padding(1)));
  body->push_back(lrelu());
  for (int64_t i = 0; i < cfg.upsamplings(); ++i) {
    const int64_t next = std::min<int64_t>(ch * 2, 256);
    body->push_back(nn::Conv2d(nn::Conv2dOptions(ch, next, 4).stride(2).padding(1)));
    body->push_back(lrelu());
    ch = next;
  }
  body_ = register_module("body", body);
  proj_ = register_module("proj", nn::Linear(ch, cfg.style_dim));
  // Codes start near 1, where channel-wise multiplication is the identity.
  torch::NoGradGuard no_grad;
  proj_->bias.fill_(1.0);
}

torch::Tensor StyleEncoderImpl::forward(const torch::Tensor& img) {
  return proj_->forward(body_->forward(img).mean({2, 3}));
}

ContentEncoderImpl::ContentEncoderImpl(const AeConfig& cfg) {
  nn::Sequential body;
  int64_t ch = cfg.encoder_width;
  body->push_back(nn::Conv2d(nn::Conv2dOptions(1, ch, 3).padding(1)));
  body->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(ch).affine(true)));
  body->push_back(lrelu());
  for (int64_t i = 0; i < cfg.upsamplings(); ++i) {
    const int64_t next = std::min<int64_t>(ch * 2, 256);
    body->push_back(nn::Conv2d(nn::Conv2dOptions(ch, next, 4).stride(2).padding(1)));
    body->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(next).affine(true)));
    body->push_back(lrelu());
    ch = next;
  }
  body->push_back(nn::Conv2d(nn::Conv2dOptions(ch, cfg.content_channels, 3).padding(1)));
  body_ = register_module("body", body);
}

torch::Tensor ContentEncoderImpl::forward(const torch::Tensor& sketch) {
  return body_->forward(sketch);
}

DmiSiteImpl::DmiSiteImpl(int64_t channels, ops::MaskRule rule) : rule_(rule) {
  const auto id = ops::DmiParams::identity(channels);
  edge_scale_ = register_parameter("edge_scale", id.edge_scale.clone());
  edge_shift_ = register_parameter("edge_shift", id.edge_shift.clone());
  plain_scale_ = register_parameter("plain_scale", id.plain_scale.clone());
  plain_shift_ = register_parameter("plain_shift", id.plain_shift.clone());
}

ops::DmiParams DmiSiteImpl::params() const {
  return {edge_scale_, edge_shift_, plain_scale_, plain_shift_, rule_};
}

torch::Tensor DmiSiteImpl::forward(const torch::Tensor& f, const torch::Tensor& content) {
  return ops::feature_dmi(f, ops::match_channels(content, f.size(1)), params());
}

DecoderImpl::DecoderImpl(const AeConfig& cfg) {
  cfg.validate();
  const int64_t ups = cfg.upsamplings();
  for (int64_t i = 0; i <= ups; ++i) {
    const int64_t res = cfg.content_grid << i;
    const int64_t ch = std::max<int64_t>(16, cfg.decoder_width >> std::max<int64_t>(0, i - 1));
    sites_.push_back({res, ch, res >= cfg.style_min_resolution()});
  }
  stem_ = register_module(
      "stem", nn::Conv2d(nn::Conv2dOptions(cfg.content_channels, sites_[0].channels, 3).padding(1)));
  int64_t prev = sites_[0].channels;
  for (size_t i = 0; i < sites_.size(); ++i) {
    const auto& s = sites_[i];
    convs_.push_back(register_module("conv" + std::to_string(i),
                                     nn::Conv2d(nn::Conv2dOptions(prev, s.channels, 3).padding(1))));
    dmi_.push_back(register_module("dmi" + std::to_string(i), DmiSite(s.channels, cfg.mask_rule)));
    prev = s.channels;
  }
  out_ = register_module("out", nn::Conv2d(nn::Conv2dOptions(prev, 3, 3).padding(1)));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& style, const torch::Tensor& content) {
  using torch::indexing::Slice;
  auto h = F::leaky_relu(stem_->forward(content), F::LeakyReLUFuncOptions().negative_slope(0.2));
  for (size_t i = 0; i < sites_.size(); ++i) {
    const auto& s = sites_[i];
    if (i > 0) {
      h = F::interpolate(h, F::InterpolateFuncOptions()
                                .scale_factor(std::vector<double>{2.0, 2.0})
                                .mode(torch::kNearest));
    }
    h = convs_[i]->forward(h);
    h = dmi_[i]->forward(h, content);
    if (s.styled) h = ops::channel_scale(h, style.index({Slice(), Slice(0, s.channels)}));
    h = F::leaky_relu(h, F::LeakyReLUFuncOptions().negative_slope(0.2));
  }
  return torch::tanh(out_->forward(h));
}

AeNetImpl::AeNetImpl(const AeConfig& cfg) {
  cfg.validate();
  style_encoder = register_module("style_encoder", StyleEncoder(cfg));
  content_encoder = register_module("content_encoder", ContentEncoder(cfg));
  decoder = register_module("decoder", Decoder(cfg));
  head = register_module("head", nn::Linear(cfg.style_dim, cfg.k));
}

std::vector<torch::Tensor> AeNetImpl::body_parameters() {
  std::vector<torch::Tensor> out;
  for (auto* m : std::initializer_list<nn::Module*>{style_encoder.get(), content_encoder.get(),
                                                    decoder.get()}) {
    for (auto& p : m->parameters()) out.push_back(p);
  }
  return out;
}

void AeNetImpl::reinit_head(uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = at::detail::createCPUGenerator(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(head->weight.size(1)));
  head->weight.uniform_(-bound, bound, gen);
  head->bias.uniform_(-bound, bound, gen);
}

torch::Tensor pool_content(const torch::Tensor& content, int64_t style_dim) {
  const auto pooled = content.mean({2, 3}, /*keepdim=*/true);
  return ops::match_channels(pooled, style_dim).flatten(1);
}

torch::Tensor content_declass_term(const nn::Linear& head, const torch::Tensor& content,
                                   int64_t style_dim) {
  const auto logits =
      F::linear(pool_content(content, style_dim), head->weight.detach(), head->bias.detach());
  return loss::content_declass_loss(logits, loss::UniformTarget(head->weight.size(0)));
}

// ---------------------------------------------------------------- model

AeModel::AeModel(AeConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  torch::manual_seed(static_cast<int64_t>(cfg_.seed));
  net_ = AeNet(cfg_);
  config_hash_ = data::config_hash(cfg_.to_json());
}

AeModel AeModel::load(const fs::path& run_or_manifest) {
  const auto manifest = data::CheckpointManifest::load(data::manifest_path(run_or_manifest));
  const auto& entry = manifest.latest(data::Role::kAe);
  AeModel m(AeConfig::from_json(manifest.config_for(entry)));
  manifest.verify(entry, m.cfg_.to_json());
  torch::load(m.net_, manifest.resolve(entry).string());
  for (auto& p : m.net_->parameters()) p.set_requires_grad(false);
  m.net_->eval();
  m.trained_ = true;
  m.step_ = entry.step;
  return m;
}

void AeModel::require_trained(const char* what) const {
  if (!trained_) {
    throw UntrainedModel(std::string(what) + ": model has no trained weights");
  }
}

void AeModel::check_image(const torch::Tensor& x, int64_t channels, const char* what) const {
  const bool ok = (x.dim() == 4 || x.dim() == 3) && x.size(-3) == channels &&
                  x.size(-2) == cfg_.resolution && x.size(-1) == cfg_.resolution;
  if (!ok) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(channels) +
                                " x " + std::to_string(cfg_.resolution) + " x " +
                                std::to_string(cfg_.resolution) + " input");
  }
  require_finite(x, what);
}

torch::Tensor AeModel::encode_style(const torch::Tensor& img) const {
  check_image(img, 3, "encode_style");
  torch::NoGradGuard no_grad;
  auto net = net_;
  const auto out = net->style_encoder->forward(img.dim() == 3 ? img.unsqueeze(0) : img);
  return img.dim() == 3 ? out.squeeze(0) : out;
}

torch::Tensor AeModel::encode_content(const torch::Tensor& sketch) const {
  check_image(sketch, 1, "encode_content");
  torch::NoGradGuard no_grad;
  auto net = net_;
  const auto out = net->content_encoder->forward(sketch.dim() == 3 ? sketch.unsqueeze(0) : sketch);
  return sketch.dim() == 3 ? out.squeeze(0) : out;
}

torch::Tensor AeModel::decode(const torch::Tensor& style, const torch::Tensor& content) const {
  const bool single = style.dim() == 1;
  const auto s = single ? style.unsqueeze(0) : style;
  const auto c = content.dim() == 3 ? content.unsqueeze(0) : content;
  if (s.dim() != 2 || s.size(1) != cfg_.style_dim) {
    throw std::invalid_argument("decode: style must have " + std::to_string(cfg_.style_dim) +
                                " entries");
  }
  if (c.dim() != 4 || c.size(1) != cfg_.content_channels || c.size(2) != cfg_.content_grid ||
      c.size(3) != cfg_.content_grid || c.size(0) != s.size(0)) {
    throw std::invalid_argument("decode: content grid does not match the configuration");
  }
  torch::NoGradGuard no_grad;
  auto net = net_;
  const auto out = net->decoder->forward(s, c);
  return single ? out.squeeze(0) : out;
}

torch::Tensor AeModel::infer(const torch::Tensor& sketch, const torch::Tensor& style_img) const {
  require_trained("infer_ae");
  return decode(encode_style(style_img), encode_content(sketch));
}

data::CheckpointEntry AeModel::save(const data::RunLayout& run, int64_t step, const json& metrics) {
  auto manifest = fs::exists(run.manifest()) ? data::CheckpointManifest::load(run.manifest())
                                             : data::CheckpointManifest(run.dir);
  config_hash_ = manifest.register_config(cfg_.to_json());
  const auto name = "ae_" + std::to_string(step) + ".pt";
  fs::create_directories(run.ckpt_dir());
  torch::save(net_, (run.ckpt_dir() / name).string());
  data::CheckpointEntry entry{data::Role::kAe, step, (fs::path("ckpt") / name).generic_string(),
                              config_hash_, metrics};
  manifest.add(entry);
  manifest.save(run.manifest());
  step_ = step;
  return entry;
}

// ---------------------------------------------------------------- data

AeDataset AeDataset::from_catalog(const data::Catalog& catalog, data::Split split,
                                  int64_t resolution) {
  const auto pairs = catalog.in_split(split);
  if (pairs.empty()) {
    throw std::invalid_argument("AeDataset: the " + data::to_string(split) + " split is empty");
  }
  size_t s = SIZE_MAX;
  for (const auto* p : pairs) s = std::min(s, p->sketches.size());
  if (s < 2) {
    throw std::invalid_argument("AeDataset: every image needs at least two sketches");
  }
  AeDataset d;
  std::vector<torch::Tensor> imgs, skts;
  for (const auto* p : pairs) {
    imgs.push_back(data::resize(data::load_image(catalog.resolve(p->image), 3), resolution,
                                resolution));
    std::vector<torch::Tensor> mine;
    for (size_t k = 0; k < s; ++k) {
      mine.push_back(data::resize(data::load_image(catalog.resolve(p->sketches[k]), 1),
                                  resolution, resolution));
    }
    skts.push_back(torch::stack(mine));
    d.stems.push_back(p->stem);
  }
  d.images = torch::stack(imgs);
  d.sketches = torch::stack(skts);
  return d;
}

std::optional<int64_t> MomentumClassSubset::label(int64_t image_id) const {
  const auto it = label_of.find(image_id);
  if (it == label_of.end()) return std::nullopt;
  return it->second;
}

MomentumClassSubset next_class_subset(int64_t dataset_size, int64_t k, uint64_t seed,
                                      const MomentumClassSubset* prev) {
  if (k < 1 || k > dataset_size) {
    throw std::invalid_argument("next_class_subset: k=" + std::to_string(k) +
                                " does not fit a dataset of " + std::to_string(dataset_size));
  }
  std::vector<int64_t> pool(static_cast<size_t>(dataset_size));
  std::iota(pool.begin(), pool.end(), 0);
  std::mt19937_64 rng(seed);
  for (int64_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<int64_t>(rng() % static_cast<uint64_t>(dataset_size - i));
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  MomentumClassSubset s;
  s.image_ids.assign(pool.begin(), pool.begin() + k);
  for (int64_t i = 0; i < k; ++i) s.label_of[s.image_ids[static_cast<size_t>(i)]] = i;
  s.generation = prev ? prev->generation + 1 : 0;
  return s;
}

AeBatch make_batch(const AeDataset& data, const AeConfig& cfg, int64_t step) {
  const int64_t n = data.size();
  const int64_t b = std::min(cfg.batch_size, n);
  if (b < 2) throw std::invalid_argument("make_batch: need at least two images");
  if (data.sketches_per_image() < 2) {
    throw std::invalid_argument("make_batch: need at least two sketches per image");
  }
  const auto ustep = static_cast<uint64_t>(step);
  std::mt19937_64 rng(augment::derive_seed(cfg.seed, 0, ustep));

  std::vector<int64_t> pool(static_cast<size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  for (int64_t i = 0; i < b; ++i) {
    const auto j = i + static_cast<int64_t>(rng() % static_cast<uint64_t>(n - i));
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }

  AeBatch batch;
  batch.ids.assign(pool.begin(), pool.begin() + b);
  std::vector<torch::Tensor> orig, trans, sa, sb;
  const auto s = static_cast<uint64_t>(data.sketches_per_image());
  for (int64_t i = 0; i < b; ++i) {
    const int64_t id = batch.ids[static_cast<size_t>(i)];
    const auto img = data.images[id];
    auto aug = cfg.style_aug;
    aug.seed = augment::derive_seed(cfg.seed, 1 + 3 * static_cast<uint64_t>(i), ustep);
    const auto ka = static_cast<int64_t>(rng() % s);
    const auto kb = static_cast<int64_t>((static_cast<uint64_t>(ka) + 1 + rng() % (s - 1)) % s);
    const auto ma = augment::SketchMaskConfig::defaults_for(
        cfg.resolution, cfg.mask_regions,
        augment::derive_seed(cfg.seed, 2 + 3 * static_cast<uint64_t>(i), ustep));
    const auto mb = augment::SketchMaskConfig::defaults_for(
        cfg.resolution, cfg.mask_regions,
        augment::derive_seed(cfg.seed, 3 + 3 * static_cast<uint64_t>(i), ustep));
    orig.push_back(img);
    trans.push_back(augment::translate_style(img, aug));
    sa.push_back(augment::mask_sketch(data.sketches[id][ka], ma));
    sb.push_back(augment::mask_sketch(data.sketches[id][kb], mb));
  }
  batch.original = torch::stack(orig);
  batch.translated = torch::stack(trans);
  batch.sketch = torch::stack(sa);
  batch.sketch_pos = torch::stack(sb);
  return batch;
}

// ---------------------------------------------------------------- training

AeTrainer::AeTrainer(AeModel& model, int64_t dataset_size)
    : model_(model), dataset_size_(dataset_size) {
  const auto& cfg = model_.config();
  const auto kb = k_bounds(dataset_size);
  if (cfg.k < kb.lo || cfg.k > kb.hi) {
    throw std::invalid_argument("AeTrainer: k=" + std::to_string(cfg.k) + " outside [" +
                                std::to_string(kb.lo) + ", " + std::to_string(kb.hi) +
                                "] for " + std::to_string(dataset_size) + " images");
  }
  const auto adam = torch::optim::AdamOptions(cfg.lr).betas({cfg.beta1, cfg.beta2});
  body_opt_ = std::make_unique<torch::optim::Adam>(model_.net()->body_parameters(), adam);
  subset_ = next_class_subset(dataset_size_, cfg.k, augment::derive_seed(cfg.seed, 7, 0));
  model_.net()->reinit_head(augment::derive_seed(cfg.seed, 8, 0));
  head_opt_ = std::make_unique<torch::optim::Adam>(model_.net()->head->parameters(), adam);
}

void AeTrainer::refresh_subset() {
  const auto& cfg = model_.config();
  const auto gen = subset_.generation + 1;
  subset_ = next_class_subset(dataset_size_, cfg.k, augment::derive_seed(cfg.seed, 7, gen),
                              &subset_);
  model_.net()->reinit_head(augment::derive_seed(cfg.seed, 8, gen));
  const auto adam = torch::optim::AdamOptions(cfg.lr).betas({cfg.beta1, cfg.beta2});
  head_opt_ = std::make_unique<torch::optim::Adam>(model_.net()->head->parameters(), adam);
}

AeStepResult AeTrainer::step(const AeBatch& batch) {
  const auto& cfg = model_.config();
  auto& net = model_.net();
  const int64_t n = batch.original.size(0);
  if (n < 2 || static_cast<int64_t>(batch.ids.size()) != n) {
    throw std::invalid_argument("ae step: a batch needs at least two labelled images");
  }
  net->train();

  const auto f_t = net->style_encoder->forward(batch.translated);
  const auto c_t = net->content_encoder->forward(batch.sketch);
  const auto recon = net->decoder->forward(f_t, c_t);

  AeStepResult result;
  loss::LossReport parts;
  const auto& w = cfg.weights;
  if (w.c_tri != 0) {
    const auto c_pos = net->content_encoder->forward(batch.sketch_pos);
    parts.add("c_tri", loss::content_triplet(c_t, c_pos, c_t.roll(1, 0), cfg.margins));
  }
  if (w.s_tri != 0) {
    const auto f_org = net->style_encoder->forward(batch.original);
    parts.add("s_tri",
              loss::style_triplet(f_t, f_org, f_org.roll(1, 0), cfg.margins, cfg.orientation));
  }
  if (w.s_cls != 0) {
    std::vector<int64_t> rows, labels;
    for (int64_t i = 0; i < n; ++i) {
      if (const auto l = subset_.label(batch.ids[static_cast<size_t>(i)])) {
        rows.push_back(i);
        labels.push_back(*l);
      }
    }
    result.in_subset = static_cast<int64_t>(rows.size());
    if (rows.empty()) {
      parts.add("s_cls", torch::zeros({}, f_t.options()));
    } else {
      const auto logits = net->head->forward(f_t.index_select(0, torch::tensor(rows)));
      parts.add("s_cls", loss::style_class_loss(logits, torch::tensor(labels)));
    }
  }
  if (w.c_cls != 0) {
    parts.add("c_cls", content_declass_term(net->head, c_t, cfg.style_dim));
  }
  result.report = loss::ae_total(recon, batch.original, parts, w);

  body_opt_->zero_grad();
  head_opt_->zero_grad();
  const auto total = result.report.total();
  if (!std::isfinite(total.item<double>())) {
    std::string diag;
    for (const auto& [k, v] : result.report.values()) diag += " " + k + "=" + std::to_string(v);
    throw TrainingDiverged("ae step " + std::to_string(step_ + 1) + ": non-finite loss;" + diag);
  }
  total.backward();
  body_opt_->step();
  head_opt_->step();
  result.recon = recon.detach();

  ++step_;
  if (cfg.refresh_every > 0 && step_ % cfg.refresh_every == 0) refresh_subset();
  return result;
}

AeTrainSummary train(AeModel& model, const AeDataset& data, const data::RunLayout& run,
                     const AeTrainOptions& opts) {
  AeTrainer trainer(model, data.size());
  AeTrainSummary summary;
  for (int64_t s = 0; s < opts.steps; ++s) {
    const auto batch = make_batch(data, model.config(), s);
    auto res = trainer.step(batch);
    auto values = res.report.values();
    values["total"] = res.report.total_value();
    summary.history.push_back(values);
    if (opts.log_every > 0 && trainer.step_count() % opts.log_every == 0) {
      std::string line;
      for (const auto& [k, v] : values) line += " " + k + "=" + std::to_string(v);
      log::info("ae step ", trainer.step_count(), ":", line);
    }
  }
  model.mark_trained();
  json metrics = json::object();
  if (!summary.history.empty()) {
    for (const auto& [k, v] : summary.history.back()) metrics[k] = v;
  }
  summary.checkpoint = model.save(run, trainer.step_count(), metrics);
  for (auto& p : model.net()->parameters()) p.set_requires_grad(false);
  model.net()->eval();
  return summary;
}

}  // namespace s2i::ae
