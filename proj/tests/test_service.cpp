#include <gtest/gtest.h>

#include <httplib.h>

#include <cstdlib>
#include <future>

#include "s2i/service.hpp"
#include "support/pipeline.hpp"

using namespace s2i;
using s2i::testing::TempDir;
namespace fs = std::filesystem;
using Items = httplib::MultipartFormDataItems;

namespace {

std::string png_of(int64_t c, int64_t h, int64_t w, float value = 0.0f) {
  torch::manual_seed(h * 1000 + w);
  return data::encode_png((torch::rand({c, h, w}) * 2 - 1).clamp(-1, 1) * (1 - value) + value);
}

httplib::MultipartFormData file(const std::string& name, const std::string& bytes) {
  return {name, bytes, name + ".png", "image/png"};
}

httplib::MultipartFormData text(const std::string& name, const std::string& value) {
  return {name, value, "", ""};
}

service::ServiceConfig test_config(const fs::path& run_dir) {
  service::ServiceConfig c;
  c.port = 0;
  c.run_dir = run_dir;
  c.max_side = 100;
  c.queue_capacity = 2;
  return c;
}

}  // namespace

class Serve : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    tmp_ = new TempDir("s2i_service");
    s2i::testing::PipelineOptions o;
    o.images = 12;
    pipe_ = new s2i::testing::Pipeline(s2i::testing::build_pipeline(tmp_->path() / "work", o));
    s2i::testing::build_serve_dir(*pipe_, tmp_->path() / "serve", 20, 10);
    svc_ = new service::Service(test_config(tmp_->path() / "serve"));
    svc_->start();
    svc_->begin_load();
    svc_->wait_loaded();
  }
  static void TearDownTestSuite() {
    delete svc_;
    delete pipe_;
    delete tmp_;
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", svc_->port());
    c.set_read_timeout(60, 0);
    return c;
  }

  static TempDir* tmp_;
  static s2i::testing::Pipeline* pipe_;
  static service::Service* svc_;
};
TempDir* Serve::tmp_ = nullptr;
s2i::testing::Pipeline* Serve::pipe_ = nullptr;
service::Service* Serve::svc_ = nullptr;

TEST_F(Serve, HealthReportsLoadedCheckpoints) {
  auto res = client().Get("/health");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto j = nlohmann::json::parse(res->body);
  EXPECT_EQ(j.at("status"), "ok");
  EXPECT_EQ(j.at("resolution"), 32);
  EXPECT_EQ(j.at("version"), service::kVersion);
  EXPECT_EQ(j.at("loaded_checkpoints").at("tom").size(), 3u);
  EXPECT_EQ(j.at("loaded_checkpoints").at("ae"), 20);
  EXPECT_EQ(j.at("loaded_checkpoints").at("gan"), 10);
  EXPECT_EQ(res->get_header_value(service::kResolutionHeader), "32");
}

TEST_F(Serve, SketchifyKeepsInputSizeAndIsDeterministic) {
  const auto img = png_of(3, 40, 56);
  auto c = client();
  auto a = c.Post("/sketchify", Items{file("image", img), text("checkpoint_index", "2")});
  auto b = c.Post("/sketchify", Items{file("image", img), text("checkpoint_index", "2")});
  ASSERT_TRUE(a && b);
  ASSERT_EQ(a->status, 200) << a->body;
  EXPECT_EQ(a->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(a->get_header_value(service::kResolutionHeader), "32");
  EXPECT_EQ(a->body, b->body);
  const auto out = data::decode_image(a->body, 1);
  EXPECT_EQ(out.size(1), 40);
  EXPECT_EQ(out.size(2), 56);
  auto other = c.Post("/sketchify", Items{file("image", img), text("checkpoint_index", "0")});
  ASSERT_TRUE(other);
  EXPECT_NE(other->body, a->body);
}

TEST_F(Serve, SketchifyErrorMatrix) {
  auto c = client();
  const auto img = png_of(3, 32, 32);
  EXPECT_EQ(c.Post("/sketchify", Items{file("image", img), text("checkpoint_index", "3")})->status, 404);
  EXPECT_EQ(c.Post("/sketchify", Items{file("image", img), text("checkpoint_index", "-1")})->status, 404);
  EXPECT_EQ(c.Post("/sketchify", Items{file("image", img), text("checkpoint_index", "x")})->status, 400);
  EXPECT_EQ(c.Post("/sketchify", Items{text("checkpoint_index", "0")})->status, 400);
  EXPECT_EQ(c.Post("/sketchify", Items{file("image", "not a png")})->status, 400);
  EXPECT_EQ(c.Post("/sketchify", Items{file("image", png_of(3, 8, 40))})->status, 422);
  EXPECT_EQ(c.Post("/sketchify", Items{file("image", png_of(3, 32, 101))})->status, 422);
  const auto body = nlohmann::json::parse(c.Post("/sketchify", Items{file("image", png_of(3, 8, 40))})->body);
  EXPECT_EQ(body.at("status"), 422);
  EXPECT_TRUE(body.contains("error"));
}

TEST_F(Serve, SynthesizeBothStagesDeterministic) {
  auto c = client();
  const auto sketch = png_of(1, 48, 36, 0.5f), style = png_of(3, 30, 30);
  for (const auto* stage : {"ae", "gan"}) {
    httplib::MultipartFormDataItems items{file("sketch", sketch), file("style", style),
                                          text("stage", stage), text("seed", "5")};
    auto a = c.Post("/synthesize", items), b = c.Post("/synthesize", items);
    ASSERT_TRUE(a && b);
    ASSERT_EQ(a->status, 200) << a->body;
    EXPECT_EQ(a->body, b->body);
    const auto out = data::decode_image(a->body, 3);
    EXPECT_EQ(out.size(1), 48);
    EXPECT_EQ(out.size(2), 36);
  }
  auto s5 = c.Post("/synthesize", Items{file("sketch", sketch), file("style", style), text("stage", "gan"),
                                   text("seed", "5")});
  auto s6 = c.Post("/synthesize", Items{file("sketch", sketch), file("style", style), text("stage", "gan"),
                                   text("seed", "6")});
  EXPECT_NE(s5->body, s6->body);
  auto by_id = c.Post("/synthesize", Items{file("sketch", sketch), text("style_id", "style_1")});
  ASSERT_EQ(by_id->status, 200) << by_id->body;
}

TEST_F(Serve, SynthesizeErrorMatrix) {
  auto c = client();
  const auto sketch = png_of(1, 32, 32), style = png_of(3, 32, 32);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", sketch), text("style_id", "nope")})->status, 404);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", sketch), text("style_id", "../etc")})->status, 404);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", sketch)})->status, 400);
  EXPECT_EQ(c.Post("/synthesize", Items{file("style", style)})->status, 400);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", sketch), file("style", style), text("stage", "vae")})->status,
            400);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", sketch), file("style", style), text("seed", "-3")})->status,
            400);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", "xx"), file("style", style)})->status, 400);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", png_of(1, 10, 10)), file("style", style)})->status, 422);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", sketch), file("style", png_of(3, 200, 20))})->status, 422);
}

TEST_F(Serve, FullQueueGives429ThenRecovers) {
  std::vector<service::InferenceGate::Slot> held;
  while (auto s = svc_->gate().reserve()) held.push_back(std::move(*s));
  EXPECT_EQ(held.size(), svc_->gate().capacity());
  auto c = client();
  const auto img = png_of(3, 32, 32);
  EXPECT_EQ(c.Post("/sketchify", Items{file("image", img)})->status, 429);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", png_of(1, 32, 32)), file("style", img)})->status, 429);
  EXPECT_EQ(c.Get("/health")->status, 200);
  held.clear();
  EXPECT_EQ(svc_->gate().in_use(), 0u);
  EXPECT_EQ(c.Post("/sketchify", Items{file("image", img)})->status, 200);
}

TEST_F(Serve, StylesListingAndImages) {
  auto c = client();
  auto res = c.Get("/styles");
  ASSERT_EQ(res->status, 200);
  auto list = nlohmann::json::parse(res->body);
  ASSERT_EQ(list.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(list[i].at("id"), "style_" + std::to_string(i));
    EXPECT_EQ(list[i].at("thumbnail_url"), "/styles/style_" + std::to_string(i));
  }
  EXPECT_EQ(c.Get("/styles")->body, res->body);
  auto img = c.Get("/styles/style_2");
  ASSERT_EQ(img->status, 200);
  EXPECT_EQ(img->body, data::read_file(tmp_->path() / "serve" / "gallery" / "style_2.png"));
  EXPECT_EQ(c.Get("/styles/missing")->status, 404);

  const auto moved = tmp_->path() / "style_2.png";
  fs::rename(tmp_->path() / "serve" / "gallery" / "style_2.png", moved);
  EXPECT_EQ(nlohmann::json::parse(c.Get("/styles")->body).size(), 2u);
  EXPECT_EQ(c.Get("/styles/style_2")->status, 404);
  fs::rename(moved, tmp_->path() / "serve" / "gallery" / "style_2.png");
}

TEST_F(Serve, LoadingStateGives503) {
  std::promise<void> release;
  auto gate = release.get_future().share();
  service::Service svc(test_config(tmp_->path() / "serve"));
  svc.start();
  svc.begin_load([gate] { gate.wait(); });
  httplib::Client c("127.0.0.1", svc.port());
  c.set_read_timeout(60, 0);
  auto health = c.Get("/health");
  EXPECT_EQ(health->status, 503);
  EXPECT_EQ(nlohmann::json::parse(health->body).at("status"), "loading");
  EXPECT_EQ(c.Post("/sketchify", Items{file("image", png_of(3, 32, 32))})->status, 503);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", png_of(1, 32, 32)), file("style", png_of(3, 32, 32))})->status,
            503);
  release.set_value();
  svc.wait_loaded();
  EXPECT_EQ(c.Get("/health")->status, 200);
}

TEST_F(Serve, MissingRefinerGives503ForGanOnly) {
  const auto dir = tmp_->path() / "no_gan";
  fs::create_directories(dir);
  fs::copy(tmp_->path() / "serve" / "tom", dir / "tom", fs::copy_options::recursive);
  fs::copy(tmp_->path() / "serve" / "ae", dir / "ae", fs::copy_options::recursive);
  service::Service svc(test_config(dir));
  svc.start();
  svc.begin_load();
  svc.wait_loaded();
  httplib::Client c("127.0.0.1", svc.port());
  c.set_read_timeout(60, 0);
  const auto sketch = png_of(1, 32, 32), style = png_of(3, 32, 32);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", sketch), file("style", style), text("stage", "gan")})->status,
            503);
  EXPECT_EQ(c.Post("/synthesize", Items{file("sketch", sketch), file("style", style), text("stage", "ae")})->status,
            200);
  EXPECT_TRUE(nlohmann::json::parse(c.Get("/health")->body).at("loaded_checkpoints").at("gan").is_null());
}

TEST_F(Serve, RefinerFromAnotherStage1IsRejected) {
  const auto dir = tmp_->path() / "foreign_gan";
  fs::create_directories(dir);
  fs::copy(tmp_->path() / "serve" / "gan", dir / "gan", fs::copy_options::recursive);
  const auto train = ae::AeDataset::from_catalog(pipe_->catalog, data::Split::kTrain, 32);
  auto cfg = s2i::testing::small_ae_config(32, train.size());
  cfg.seed = 99;
  ae::AeModel other(cfg);
  ae::train(other, train, data::RunLayout{dir / "ae"}, {1, 0});
  const auto models = service::load_models(test_config(dir));
  EXPECT_TRUE(models.ae.has_value());
  EXPECT_FALSE(models.gan.has_value());
}

TEST(ServiceConfig, EnvOverridesAndValidation) {
  service::ServiceConfig c;
  ::setenv("S2I_PORT", "9123", 1);
  ::setenv("S2I_RUN_DIR", "/tmp/elsewhere", 1);
  service::apply_env_overrides(c);
  EXPECT_EQ(c.port, 9123);
  EXPECT_EQ(c.run_dir, "/tmp/elsewhere");
  ::setenv("S2I_PORT", "http", 1);
  EXPECT_THROW(service::apply_env_overrides(c), std::invalid_argument);
  ::unsetenv("S2I_PORT");
  ::unsetenv("S2I_RUN_DIR");
  EXPECT_THROW(service::ServiceConfig::from_json({{"min_side", 64}, {"max_side", 32}}), std::invalid_argument);
  EXPECT_EQ(service::ServiceConfig::from_json({{"port", 1}}).port, 1);
  EXPECT_EQ(service::ServiceConfig::from_file({}).port, 8080);
}

TEST(InferenceGateTest, CapacityIsEnforced) {
  service::InferenceGate g(2);
  auto a = g.reserve(), b = g.reserve();
  EXPECT_TRUE(a && b);
  EXPECT_FALSE(g.reserve());
  a.reset();
  EXPECT_EQ(g.in_use(), 1u);
  EXPECT_TRUE(g.reserve());
  EXPECT_EQ(g.run([] { return 7; }), 7);
}
