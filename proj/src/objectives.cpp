#include "s2i/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace s2i::loss {
namespace {

torch::Tensor clamped_log(const torch::Tensor& p) {
  return torch::log(p.clamp(kProbClamp, 1.0 - kProbClamp));
}

void require_nonempty(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.numel() == 0) {
    throw std::invalid_argument(std::string(what) + ": empty batch");
  }
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }
}

torch::Tensor as_rows(const torch::Tensor& v) { return v.dim() == 1 ? v.unsqueeze(0) : v; }

}  // namespace

void LossReport::add(const std::string& name, torch::Tensor term) {
  if (has(name)) {
    throw std::invalid_argument("LossReport: duplicate term " + name);
  }
  if (term.numel() != 1) {
    throw std::invalid_argument("LossReport: term " + name + " is not a scalar");
  }
  terms_.emplace_back(name, term.reshape({}));
}

bool LossReport::has(const std::string& name) const {
  return std::any_of(terms_.begin(), terms_.end(),
                     [&](const auto& kv) { return kv.first == name; });
}

const torch::Tensor& LossReport::term(const std::string& name) const {
  for (const auto& [n, t] : terms_) {
    if (n == name) return t;
  }
  throw std::invalid_argument("LossReport: missing term " + name);
}

double LossReport::value(const std::string& name) const { return term(name).item<double>(); }

torch::Tensor LossReport::total() const {
  if (terms_.empty()) {
    return torch::zeros({});
  }
  torch::Tensor sum = terms_.front().second;
  for (size_t i = 1; i < terms_.size(); ++i) {
    sum = sum + terms_[i].second;
  }
  return sum;
}

double LossReport::total_value() const { return total().item<double>(); }

std::vector<std::string> LossReport::names() const {
  std::vector<std::string> out;
  out.reserve(terms_.size());
  for (const auto& kv : terms_) out.push_back(kv.first);
  return out;
}

std::map<std::string, double> LossReport::values() const {
  std::map<std::string, double> out;
  for (const auto& [n, t] : terms_) out[n] = t.item<double>();
  return out;
}

void TripletMargins::validate() const {
  if (!std::isfinite(alpha) || !std::isfinite(beta) || alpha < 0 || beta < 0) {
    throw std::invalid_argument("TripletMargins: margins must be finite and >= 0");
  }
}

UniformTarget::UniformTarget(int64_t classes) : k(classes) {
  if (classes < 2) {
    throw std::invalid_argument("UniformTarget: need at least 2 classes");
  }
}

torch::Tensor UniformTarget::vector(torch::TensorOptions opts) const {
  return torch::full({k}, 1.0 / static_cast<double>(k), opts);
}

torch::Tensor mse(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  require_same_shape(a, b, what);
  return (a - b).pow(2).mean();
}

LossReport tom_d_loss(const torch::Tensor& real_probs, const torch::Tensor& fake_probs) {
  require_nonempty(real_probs, "tom_d_loss");
  require_nonempty(fake_probs, "tom_d_loss");
  LossReport r;
  r.add("d_real", -clamped_log(real_probs).mean());
  r.add("d_fake", -clamped_log(1.0 - fake_probs).mean());
  return r;
}

LossReport tom_d_loss(std::span<const ops::GramMatrix> real,
                      std::span<const ops::GramMatrix> fake, const GramScorer& d_probs) {
  if (real.empty() || fake.empty()) {
    throw std::invalid_argument("tom_d_loss: empty batch");
  }
  auto stack = [](std::span<const ops::GramMatrix> grams) {
    std::vector<torch::Tensor> ts;
    ts.reserve(grams.size());
    for (const auto& g : grams) ts.push_back(g.data);
    return torch::stack(ts);
  };
  return tom_d_loss(d_probs(stack(real)), d_probs(stack(fake)));
}

LossReport tom_g_loss(const torch::Tensor& fake_probs, const torch::Tensor& f_target,
                      const torch::Tensor& f_hat_sketch) {
  require_nonempty(fake_probs, "tom_g_loss");
  LossReport r;
  r.add("adv", -clamped_log(fake_probs).mean());
  r.add("match", mse(f_target, f_hat_sketch, "tom_g_loss"));
  return r;
}

torch::Tensor style_triplet(const torch::Tensor& f_t, const torch::Tensor& f_org,
                            const torch::Tensor& f_neg, const TripletMargins& margins,
                            TripletOrientation orientation) {
  margins.validate();
  require_same_shape(f_t, f_org, "style_triplet");
  require_same_shape(f_t, f_neg, "style_triplet");
  const auto t = as_rows(f_t);
  const auto org = as_rows(f_org);
  const auto neg = as_rows(f_neg);
  for (const auto* v : {&t, &org, &neg}) {
    if ((v->norm(2, -1) == 0).any().item<bool>()) {
      throw std::invalid_argument("style_triplet: zero-norm style vector");
    }
  }
  auto cosine = [](const torch::Tensor& a, const torch::Tensor& b) {
    return (a * b).sum(-1) / (a.norm(2, -1) * b.norm(2, -1));
  };
  const auto cos_pos = cosine(t, org);
  const auto cos_neg = cosine(t, neg);
  const auto gap = orientation == TripletOrientation::kConventional ? cos_neg - cos_pos
                                                                     : cos_pos - cos_neg;
  return torch::clamp_min(gap + margins.alpha, 0.0).mean();
}

torch::Tensor content_triplet(const torch::Tensor& f_t, const torch::Tensor& f_pos,
                              const torch::Tensor& f_neg, const TripletMargins& margins) {
  margins.validate();
  require_same_shape(f_t, f_pos, "content_triplet");
  require_same_shape(f_t, f_neg, "content_triplet");
  require_feature_map(f_t, "content_triplet");
  auto dist = [](const torch::Tensor& a, const torch::Tensor& b) {
    return (a - b).pow(2).mean({-3, -2, -1});
  };
  return torch::clamp_min(dist(f_t, f_pos) - dist(f_t, f_neg) + margins.beta, 0.0).mean();
}

torch::Tensor style_class_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  require_nonempty(logits, "style_class_loss");
  const auto rows = as_rows(logits);
  const auto lab = labels.reshape({-1}).to(torch::kLong);
  if (lab.size(0) != rows.size(0)) {
    throw std::invalid_argument("style_class_loss: one label per logit row required");
  }
  const int64_t k = rows.size(1);
  if ((lab < 0).any().item<bool>() || (lab >= k).any().item<bool>()) {
    throw std::invalid_argument("style_class_loss: label out of range");
  }
  const auto logp = torch::log_softmax(rows, -1);
  return -logp.gather(1, lab.unsqueeze(1)).mean();
}

torch::Tensor style_class_loss(const torch::Tensor& logits, int64_t label) {
  return style_class_loss(logits, torch::tensor({label}, torch::kLong));
}

torch::Tensor content_declass_loss(const torch::Tensor& logits, const UniformTarget& target) {
  require_nonempty(logits, "content_declass_loss");
  const auto rows = as_rows(logits);
  if (rows.size(1) != target.k) {
    throw std::invalid_argument("content_declass_loss: logits length != class count");
  }
  const auto v = target.vector(rows.options());
  return (torch::softmax(rows, -1) - v).pow(2).sum(-1).mean();
}

LossReport ae_total(const torch::Tensor& recon, const torch::Tensor& target,
                    const LossReport& parts, const AeWeights& weights) {
  LossReport r;
  r.add("rec", weights.rec * mse(recon, target, "ae_total"));
  const std::pair<const char*, double> terms[] = {{"c_tri", weights.c_tri},
                                                  {"s_tri", weights.s_tri},
                                                  {"s_cls", weights.s_cls},
                                                  {"c_cls", weights.c_cls}};
  for (const auto& [name, w] : terms) {
    if (w == 0.0) continue;
    if (!parts.has(name)) {
      throw std::invalid_argument(std::string("ae_total: missing term ") + name);
    }
    r.add(name, w * parts.term(name));
  }
  return r;
}

torch::Tensor refiner_d_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores) {
  require_nonempty(real_scores, "refiner_d_loss");
  require_nonempty(fake_scores, "refiner_d_loss");
  return -torch::clamp_max(real_scores - 1.0, 0.0).mean() -
         torch::clamp_max(-fake_scores - 1.0, 0.0).mean();
}

LossReport refiner_g_loss(const torch::Tensor& fake_scores, const torch::Tensor& g_out,
                          const torch::Tensor& style_img, double lambda) {
  require_nonempty(fake_scores, "refiner_g_loss");
  if (!std::isfinite(lambda) || lambda < 0) {
    throw std::invalid_argument("refiner_g_loss: lambda must be finite and >= 0");
  }
  LossReport r;
  r.add("g_adv", -fake_scores.mean());
  r.add("g_rec_weighted", lambda * mse(g_out, style_img, "refiner_g_loss"));
  return r;
}

}  // namespace s2i::loss
