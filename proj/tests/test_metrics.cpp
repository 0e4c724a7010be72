#include <gtest/gtest.h>

#include "s2i/metrics.hpp"
#include "support/pipeline.hpp"

using namespace s2i;
using s2i::testing::TempDir;
namespace fs = std::filesystem;

class Metrics : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    tmp_ = new TempDir("s2i_metrics");
    s2i::testing::PipelineOptions o;
    o.images = 12;
    o.test_fraction = 0.25;
    pipe_ = new s2i::testing::Pipeline(s2i::testing::build_pipeline(tmp_->path(), o));
    const auto train = ae::AeDataset::from_catalog(pipe_->catalog, data::Split::kTrain, 32);
    ae_ = new ae::AeModel(s2i::testing::small_ae_config(32, train.size()));
    ae::train(*ae_, train, data::RunLayout{tmp_->path() / "runs" / "ae"}, {30, 0});
    tom_ = new tom::SketchModel(tom::SketchModel::load(pipe_->tom_run));
  }
  static void TearDownTestSuite() {
    delete tom_;
    delete ae_;
    delete pipe_;
    delete tmp_;
  }

  static torch::Tensor image(size_t i) {
    return data::load_image(pipe_->catalog.resolve(pipe_->catalog.pairs[i].image), 3);
  }

  static TempDir* tmp_;
  static s2i::testing::Pipeline* pipe_;
  static ae::AeModel* ae_;
  static tom::SketchModel* tom_;
};
TempDir* Metrics::tmp_ = nullptr;
s2i::testing::Pipeline* Metrics::pipe_ = nullptr;
ae::AeModel* Metrics::ae_ = nullptr;
tom::SketchModel* Metrics::tom_ = nullptr;

TEST_F(Metrics, StyRecSelfIsOneAndSymmetric) {
  for (size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(metrics::sty_rec(image(i), image(i), *ae_), 1.0, 1e-9);
    const double ab = metrics::sty_rec(image(i), image(i + 1), *ae_);
    EXPECT_NEAR(ab, metrics::sty_rec(image(i + 1), image(i), *ae_), 1e-12);
    EXPECT_LE(ab, 1.0);
    EXPECT_GE(ab, -1.0);
  }
  ae::AeModel untrained(ae_->config());
  EXPECT_THROW(metrics::sty_rec(image(0), image(0), untrained), ae::UntrainedModel);
}

TEST_F(Metrics, SktRecRoundTripIsZero) {
  const metrics::SketchReference ref{tom_, 1};
  for (size_t i = 0; i < 3; ++i) {
    const auto img = image(i);
    const auto sketch = tom_->sketchify(img, 1).squeeze(0);
    EXPECT_NEAR(metrics::skt_rec(sketch, img, ref), 0.0, 1e-12);
    // Through a PNG write, the difference is quantization only.
    data::save_png(sketch, tmp_->path() / "rt.png");
    const auto stored = data::load_image(tmp_->path() / "rt.png", 1);
    EXPECT_LE(metrics::skt_rec(stored, img, ref), std::pow(0.5 / 255.0, 2) + 1e-12);
  }
}

TEST_F(Metrics, SktRecUsesUnitRange) {
  // All-white input against an all-black extraction would be 1 on [0,1].
  const metrics::SketchReference ref{tom_, 0};
  const auto img = image(0);
  const auto extracted = tom_->sketchify(img, 0).squeeze(0).to(torch::kFloat64);
  const auto white = torch::ones({1, 32, 32});
  const double oracle = ((extracted + 1) / 2 - 1).pow(2).mean().item<double>();
  EXPECT_NEAR(metrics::skt_rec(white, img, ref), oracle, 1e-9);
  EXPECT_THROW(metrics::skt_rec(white, img, {}), std::invalid_argument);
  EXPECT_THROW(metrics::skt_rec(img, img, ref), std::invalid_argument);
}

TEST_F(Metrics, PerceptualDistanceProperties) {
  const auto ext = tom_->extractor();
  const auto a = image(0), b = image(1);
  EXPECT_EQ(metrics::perceptual_distance(a, a, ext), 0.0);
  EXPECT_NEAR(metrics::perceptual_distance(a, b, ext), metrics::perceptual_distance(b, a, ext), 1e-12);
  EXPECT_GT(metrics::perceptual_distance(a, b, ext), 0.0);
  torch::manual_seed(4);
  const auto noise = torch::randn_like(a);
  double prev = 0;
  for (double amp : {0.05, 0.2, 0.8}) {
    const double d = metrics::perceptual_distance(a, a + amp * noise, ext);
    EXPECT_GT(d, prev);
    prev = d;
  }
  EXPECT_THROW(metrics::perceptual_distance(a, torch::zeros({3, 16, 16}), ext), std::invalid_argument);
}

TEST_F(Metrics, EvaluateReportLayout) {
  metrics::EvalInputs in;
  in.ae = ae_;
  in.tom = {tom_, 2};
  in.extractor = tom_->extractor();
  const auto report = metrics::evaluate(pipe_->catalog, in, {});
  const auto tests = pipe_->catalog.in_split(data::Split::kTest);
  ASSERT_EQ(report.at("samples_count").get<size_t>(), tests.size());
  EXPECT_EQ(report.at("stage"), "ae");
  EXPECT_EQ(report.at("split"), "test");
  EXPECT_EQ(report.at("checkpoint_ids").at("tom_step"), tom_->checkpoint_steps()[2]);
  EXPECT_EQ(report.at("config_hash").at("ae"), ae_->config_hash());
  const auto& samples = report.at("samples");
  double sum = 0;
  for (size_t i = 0; i < tests.size(); ++i) {
    EXPECT_EQ(samples[i].at("stem"), tests[i]->stem);
    EXPECT_EQ(samples[i].at("unpaired_with"), tests[(i + 1) % tests.size()]->stem);
    for (const auto* m : {"skt_rec", "sty_rec", "percep"}) {
      EXPECT_TRUE(samples[i].at("paired").contains(m));
      EXPECT_TRUE(samples[i].at("unpaired").contains(m));
    }
    sum += samples[i].at("paired").at("percep").get<double>();
  }
  EXPECT_NEAR(report.at("mean").at("paired").at("percep").get<double>(), sum / tests.size(), 1e-12);

  // Same inputs, same report.
  EXPECT_EQ(metrics::evaluate(pipe_->catalog, in, {}), report);
}

TEST_F(Metrics, EvaluateRequiresReferences) {
  metrics::EvalInputs in;
  in.ae = ae_;
  in.extractor = tom_->extractor();
  EXPECT_THROW(metrics::evaluate(pipe_->catalog, in, {}), std::invalid_argument);
  metrics::EvalOptions only;
  only.metrics = {metrics::Metric::kStyRec};
  EXPECT_NO_THROW(metrics::evaluate(pipe_->catalog, in, only));
  only.sketch_index = 9;
  EXPECT_THROW(metrics::evaluate(pipe_->catalog, in, only), std::invalid_argument);
  EXPECT_THROW(metrics::evaluate(pipe_->catalog, {}, only), std::invalid_argument);
}

TEST(MetricNames, ParseCsv) {
  EXPECT_EQ(metrics::parse_metrics("sty_rec,percep"),
            (std::vector<metrics::Metric>{metrics::Metric::kStyRec, metrics::Metric::kPercep}));
  EXPECT_THROW(metrics::parse_metrics("fid"), std::invalid_argument);
  EXPECT_THROW(metrics::parse_metrics(""), std::invalid_argument);
}
