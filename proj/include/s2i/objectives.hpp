#pragma once

// Training objectives for the sketch generator, the auto-encoder and the
// refiner. Every loss is a scalar tensor that keeps the autograd graph.
//
// Sign conventions: all terms are >= 0 except the adversarial generator
// terms of the refiner (g_adv = -mean D(fake)), which is unbounded below.

#include <torch/torch.h>

#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "s2i/core_ops.hpp"

namespace s2i::loss {

// Sigmoid outputs are clamped to [kProbClamp, 1 - kProbClamp] before log.
inline constexpr double kProbClamp = 1e-7;

// Named scalar terms; total() is always their sum.
class LossReport {
 public:
  void add(const std::string& name, torch::Tensor term);

  bool has(const std::string& name) const;
  const torch::Tensor& term(const std::string& name) const;
  double value(const std::string& name) const;

  torch::Tensor total() const;
  double total_value() const;

  std::vector<std::string> names() const;
  std::map<std::string, double> values() const;
  size_t size() const { return terms_.size(); }

 private:
  std::vector<std::pair<std::string, torch::Tensor>> terms_;
};

struct TripletMargins {
  double alpha = 0.3;  // style
  double beta = 0.5;   // content
  void validate() const;
};

// Orientation of the cosine style triplet. kConventional pulls translations
// of the same image together; kAsPrinted keeps the literal operand order
// max(cos(t,org) - cos(t,neg) + alpha, 0).
enum class TripletOrientation { kConventional, kAsPrinted };

struct UniformTarget {
  int64_t k = 2;
  explicit UniformTarget(int64_t classes);
  torch::Tensor vector(torch::TensorOptions opts = {}) const;
};

// Relative weights of the summed auto-encoder objective.
struct AeWeights {
  double rec = 1.0;
  double c_tri = 1.0;
  double s_tri = 1.0;
  double s_cls = 1.0;
  double c_cls = 1.0;
};

inline const std::vector<std::string> kAeSelfSupervisionTerms = {"c_tri", "s_tri", "s_cls",
                                                                 "c_cls"};

// --- sketch generator (adversarial Gram matching) ---

// -mean log D(real) - mean log(1 - D(fake)); inputs are sigmoid outputs.
LossReport tom_d_loss(const torch::Tensor& real_probs, const torch::Tensor& fake_probs);

using GramScorer = std::function<torch::Tensor(const torch::Tensor&)>;

// Same loss, scoring each Gram matrix with `d_probs`.
LossReport tom_d_loss(std::span<const ops::GramMatrix> real,
                      std::span<const ops::GramMatrix> fake, const GramScorer& d_probs);

// terms {adv: -mean log D(fake), match: mean squared feature residual}.
LossReport tom_g_loss(const torch::Tensor& fake_probs, const torch::Tensor& f_target,
                      const torch::Tensor& f_hat_sketch);

// --- auto-encoder self-supervision ---

// Vectors are (d) or batches (n, d); batches are averaged.
torch::Tensor style_triplet(const torch::Tensor& f_t, const torch::Tensor& f_org,
                            const torch::Tensor& f_neg, const TripletMargins& margins,
                            TripletOrientation orientation = TripletOrientation::kConventional);

// Mean-squared distance per sample; grids are (c,h,w) or (n,c,h,w).
torch::Tensor content_triplet(const torch::Tensor& f_t, const torch::Tensor& f_pos,
                              const torch::Tensor& f_neg, const TripletMargins& margins);

// -log softmax(logits)[label]. logits (k) with a scalar label or (n,k) with
// (n) labels; batches are averaged.
torch::Tensor style_class_loss(const torch::Tensor& logits, const torch::Tensor& labels);
torch::Tensor style_class_loss(const torch::Tensor& logits, int64_t label);

// ||softmax(logits) - v||^2 against the uniform vector; batches averaged.
torch::Tensor content_declass_loss(const torch::Tensor& logits, const UniformTarget& target);

// rec = mse(recon, target) plus the four self-supervision terms in `parts`.
// Terms whose weight is zero are left out of the report.
LossReport ae_total(const torch::Tensor& recon, const torch::Tensor& target,
                    const LossReport& parts, const AeWeights& weights = {});

// --- refiner (hinge) ---

torch::Tensor refiner_d_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores);

// terms {g_adv: -mean(fake), g_rec_weighted: lambda * mse(g_out, style_img)}.
LossReport refiner_g_loss(const torch::Tensor& fake_scores, const torch::Tensor& g_out,
                          const torch::Tensor& style_img, double lambda = 10.0);

// Shared helpers.
torch::Tensor mse(const torch::Tensor& a, const torch::Tensor& b, const char* what);

}  // namespace s2i::loss
