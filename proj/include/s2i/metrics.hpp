#pragma once

// Ablation metrics and the evaluation harness.
//
//   skt_rec  mean squared distance between an input sketch and the sketch a
//            pinned sketch-generator checkpoint extracts from the generated
//            image; both on the [0,1] pixel range. Lower is better.
//   sty_rec  cosine between the style codes of the style image and of the
//            generated image. Higher is better.
//   percep   feature-space L2 proxy for a perceptual distance.

#include <torch/torch.h>

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "s2i/datastore.hpp"
#include "s2i/model.hpp"
#include "s2i/refiner.hpp"
#include "s2i/tom.hpp"

namespace s2i::metrics {

using nlohmann::json;

inline constexpr const char* kSktRecRange =
    "mean squared error over pixels rescaled to [0,1], at the model resolution";

// A sketch-generator checkpoint pinned as the skt_rec reference.
struct SketchReference {
  const tom::SketchModel* model = nullptr;
  int64_t index = 0;
};

double skt_rec(const torch::Tensor& input_sketch, const torch::Tensor& generated,
               const SketchReference& ref);

double sty_rec(const torch::Tensor& style_img, const torch::Tensor& generated,
               const ae::AeModel& ae);

// Mean over extractor blocks of the mean squared feature difference.
double perceptual_distance(const torch::Tensor& a, const torch::Tensor& b,
                           tom::PerceptualExtractor extractor);

enum class Metric { kSktRec, kStyRec, kPercep };
std::vector<Metric> parse_metrics(const std::string& csv);
std::string to_string(Metric m);

struct EvalOptions {
  std::vector<Metric> metrics{Metric::kSktRec, Metric::kStyRec, Metric::kPercep};
  data::Split split = data::Split::kTest;
  // Which sketch of each pair feeds the generator.
  int64_t sketch_index = 0;
  uint64_t seed = 0;  // refiner noise
};

struct EvalInputs {
  const ae::AeModel* ae = nullptr;
  const refine::RefinerModel* gan = nullptr;  // optional
  SketchReference tom;                          // required for skt_rec
  tom::PerceptualExtractor extractor{nullptr};  // required for percep
};

// For every pair i in the split: generated_i = synth(sketch_i, image_i).
// Paired scores compare generated_i with pair i; unpaired scores compare it
// with pair (i+1) mod n. The report carries per-sample values and means.
json evaluate(const data::Catalog& catalog, const EvalInputs& in, const EvalOptions& opts);

}  // namespace s2i::metrics
