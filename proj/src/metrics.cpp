#include "s2i/metrics.hpp"

#include <sstream>

namespace s2i::metrics {

namespace {

torch::Tensor batched(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

torch::Tensor to_unit(const torch::Tensor& x) { return (x.to(torch::kFloat64) + 1.0) * 0.5; }

torch::Tensor fit(const torch::Tensor& img, int64_t res) {
  return img.size(-1) == res && img.size(-2) == res ? img : data::resize(img, res, res);
}

}  // namespace

double skt_rec(const torch::Tensor& input_sketch, const torch::Tensor& generated,
               const SketchReference& ref) {
  if (ref.model == nullptr) {
    throw std::invalid_argument("skt_rec: no reference sketch-generator checkpoint");
  }
  if (input_sketch.dim() != 3 || input_sketch.size(0) != 1 || generated.dim() != 3 ||
      generated.size(0) != 3) {
    throw std::invalid_argument("skt_rec: expected a (1,h,w) sketch and a (3,h,w) image");
  }
  const int64_t res = ref.model->resolution();
  const auto extracted = ref.model->sketchify(fit(generated, res), ref.index).squeeze(0);
  const auto target = fit(input_sketch, res);
  return (to_unit(extracted) - to_unit(target)).pow(2).mean().item<double>();
}

double sty_rec(const torch::Tensor& style_img, const torch::Tensor& generated,
               const ae::AeModel& ae) {
  if (!ae.trained()) {
    throw ae::UntrainedModel("sty_rec: the style encoder is untrained");
  }
  const auto a = ae.encode_style(style_img).to(torch::kFloat64).flatten();
  const auto b = ae.encode_style(generated).to(torch::kFloat64).flatten();
  const double na = a.norm().item<double>(), nb = b.norm().item<double>();
  if (na == 0 || nb == 0) {
    throw std::invalid_argument("sty_rec: zero style code");
  }
  return std::clamp(a.dot(b).item<double>() / (na * nb), -1.0, 1.0);
}

double perceptual_distance(const torch::Tensor& a, const torch::Tensor& b,
                           tom::PerceptualExtractor extractor) {
  if (a.sizes() != b.sizes()) {
    throw std::invalid_argument("perceptual_distance: inputs differ in shape");
  }
  if (!extractor) throw std::invalid_argument("perceptual_distance: no extractor");
  torch::NoGradGuard no_grad;
  const auto fa = extractor->features(batched(a));
  const auto fb = extractor->features(batched(b));
  double total = 0;
  for (size_t i = 0; i < fa.size(); ++i) {
    total += (fa[i].to(torch::kFloat64) - fb[i].to(torch::kFloat64)).pow(2).mean().item<double>();
  }
  return total / static_cast<double>(fa.size());
}

std::vector<Metric> parse_metrics(const std::string& csv) {
  std::vector<Metric> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "skt_rec") out.push_back(Metric::kSktRec);
    else if (tok == "sty_rec") out.push_back(Metric::kStyRec);
    else if (tok == "percep") out.push_back(Metric::kPercep);
    else if (!tok.empty()) throw std::invalid_argument("unknown metric '" + tok + "'");
  }
  if (out.empty()) throw std::invalid_argument("no metrics requested");
  return out;
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::kSktRec: return "skt_rec";
    case Metric::kStyRec: return "sty_rec";
    case Metric::kPercep: return "percep";
  }
  return "?";
}

json evaluate(const data::Catalog& catalog, const EvalInputs& in, const EvalOptions& opts) {
  if (in.ae == nullptr) throw std::invalid_argument("evaluate: an auto-encoder is required");
  const auto has = [&](Metric m) {
    return std::find(opts.metrics.begin(), opts.metrics.end(), m) != opts.metrics.end();
  };
  if (has(Metric::kSktRec) && in.tom.model == nullptr) {
    throw std::invalid_argument("evaluate: skt_rec needs a pinned sketch-generator checkpoint");
  }
  if (has(Metric::kPercep) && !in.extractor) {
    throw std::invalid_argument("evaluate: percep needs an extractor");
  }
  const auto pairs = catalog.in_split(opts.split);
  if (pairs.size() < 2) {
    throw std::invalid_argument("evaluate: need at least two pairs in the split");
  }
  const int64_t res = in.ae->config().resolution;

  std::vector<torch::Tensor> images, sketches;
  for (const auto* p : pairs) {
    if (opts.sketch_index < 0 ||
        opts.sketch_index >= static_cast<int64_t>(p->sketches.size())) {
      throw std::invalid_argument("evaluate: pair " + p->stem + " has no sketch " +
                                  std::to_string(opts.sketch_index));
    }
    images.push_back(fit(data::load_image(catalog.resolve(p->image), 3), res));
    sketches.push_back(fit(
        data::load_image(catalog.resolve(p->sketches[static_cast<size_t>(opts.sketch_index)]), 1),
        res));
  }

  const size_t n = pairs.size();
  json samples = json::array();
  std::map<std::string, double> sum_paired, sum_unpaired;
  for (size_t i = 0; i < n; ++i) {
    const size_t j = (i + 1) % n;
    auto gen = in.ae->infer(sketches[i], images[i]);
    if (in.gan != nullptr) {
      const auto code = in.gan->config().use_style_skip ? in.ae->encode_style(images[i])
                                                        : torch::Tensor();
      gen = in.gan->refine(gen, code, opts.seed);
    }
    json paired = json::object(), unpaired = json::object();
    for (auto m : opts.metrics) {
      double pv = 0, uv = 0;
      switch (m) {
        case Metric::kSktRec:
          pv = skt_rec(sketches[i], gen, in.tom);
          uv = skt_rec(sketches[j], gen, in.tom);
          break;
        case Metric::kStyRec:
          pv = sty_rec(images[i], gen, *in.ae);
          uv = sty_rec(images[j], gen, *in.ae);
          break;
        case Metric::kPercep:
          pv = perceptual_distance(gen, images[i], in.extractor);
          uv = perceptual_distance(gen, images[j], in.extractor);
          break;
      }
      paired[to_string(m)] = pv;
      unpaired[to_string(m)] = uv;
      sum_paired[to_string(m)] += pv;
      sum_unpaired[to_string(m)] += uv;
    }
    samples.push_back({{"stem", pairs[i]->stem},
                       {"unpaired_with", pairs[j]->stem},
                       {"paired", paired},
                       {"unpaired", unpaired}});
  }

  json mean_p = json::object(), mean_u = json::object();
  for (const auto& [k, v] : sum_paired) mean_p[k] = v / static_cast<double>(n);
  for (const auto& [k, v] : sum_unpaired) mean_u[k] = v / static_cast<double>(n);

  json metric_names = json::array();
  for (auto m : opts.metrics) metric_names.push_back(to_string(m));

  json report{
      {"metrics", metric_names},
      {"split", data::to_string(opts.split)},
      {"samples_count", n},
      {"sketch_index", opts.sketch_index},
      {"stage", in.gan != nullptr ? "gan" : "ae"},
      {"range_convention",
       {{"skt_rec", kSktRecRange},
        {"sty_rec", "cosine similarity in [-1,1]"},
        {"percep", "mean over extractor blocks of the mean squared feature difference"}}},
      {"extractor_id", in.extractor ? in.extractor->config().id() : ""},
      {"config_hash",
       {{"ae", in.ae->config_hash()},
        {"gan", in.gan != nullptr ? in.gan->config_hash() : ""},
        {"tom", in.tom.model != nullptr ? in.tom.model->config_hash() : ""},
        {"catalog", catalog.config_hash}}},
      {"checkpoint_ids",
       {{"ae_step", in.ae->step()},
        {"gan_step", in.gan != nullptr ? in.gan->step() : -1},
        {"tom_index", in.tom.model != nullptr ? in.tom.index : -1},
        {"tom_step", in.tom.model != nullptr
                         ? in.tom.model->checkpoint_steps().at(static_cast<size_t>(in.tom.index))
                         : -1}}},
      {"samples", samples},
      {"mean", {{"paired", mean_p}, {"unpaired", mean_u}}},
  };
  return report;
}

}  // namespace s2i::metrics
