// s2i: toy data, catalogs, auto-encoder / refiner training, evaluation and
// the inference service.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "s2i/datastore.hpp"
#include "s2i/log.hpp"
#include "s2i/metrics.hpp"
#include "s2i/model.hpp"
#include "s2i/refiner.hpp"
#include "s2i/service.hpp"
#include "s2i/tom.hpp"
#include "s2i/toy.hpp"

namespace {

using namespace s2i;
namespace fs = std::filesystem;

data::Catalog load_catalog_checked(const std::string& path) { return data::load_catalog(path, true); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exemplar-based sketch-to-image toolkit"};
  app.require_subcommand(1);
  std::string level = "info";
  app.add_option("--log-level", level, "debug|info|warn|error|off");

  // make-toy
  std::string toy_out;
  int64_t toy_images = 32, toy_bank = 10;
  toy::ToyOptions toy_opts;
  auto* make_toy = app.add_subcommand("make-toy", "Write a procedural toy corpus");
  make_toy->add_option("--out", toy_out, "Output directory (gets rgb/ and bank/)")->required();
  make_toy->add_option("--images", toy_images, "RGB images");
  make_toy->add_option("--bank", toy_bank, "Bank sketches");
  make_toy->add_option("--res", toy_opts.resolution, "Image side");
  make_toy->add_option("--seed", toy_opts.seed, "Seed");

  // catalog
  std::string cat_rgb, cat_sketch, cat_out;
  double test_fraction = 0.2;
  uint64_t split_seed = 0;
  auto* catalog = app.add_subcommand("catalog", "Build and split a sketch-pair catalog");
  catalog->add_option("--rgb-dir", cat_rgb, "RGB images")->required();
  catalog->add_option("--sketch-dir", cat_sketch, "Sketches named <stem>.skt<k>.png")->required();
  catalog->add_option("--out", cat_out, "catalog.json path")->required();
  catalog->add_option("--test-fraction", test_fraction, "Held-out fraction (0 disables the split)");
  catalog->add_option("--seed", split_seed, "Split seed");

  // train-ae
  ae::AeConfig ae_cfg;
  std::string ae_catalog, ae_out, ae_rgb;
  bool vanilla = false;
  ae::AeTrainOptions ae_opts;
  auto* train_ae = app.add_subcommand("train-ae", "Train the stage-1 auto-encoder");
  train_ae->add_option("--catalog", ae_catalog, "catalog.json")->required();
  train_ae->add_option("--rgb-dir", ae_rgb, "Informational; images resolve through the catalog");
  train_ae->add_option("--res", ae_cfg.resolution, "Resolution");
  train_ae->add_option("--steps", ae_opts.steps, "Training steps");
  train_ae->add_option("--k", ae_cfg.k, "Class-subset size");
  train_ae->add_option("--refresh-every", ae_cfg.refresh_every, "Steps between subset refreshes");
  train_ae->add_option("--batch", ae_cfg.batch_size, "Batch size");
  train_ae->add_option("--alpha", ae_cfg.margins.alpha, "Style triplet margin");
  train_ae->add_option("--beta", ae_cfg.margins.beta, "Content triplet margin");
  train_ae->add_option("--style-dim", ae_cfg.style_dim, "Style vector length");
  train_ae->add_option("--content-channels", ae_cfg.content_channels, "Content grid channels");
  train_ae->add_option("--seed", ae_cfg.seed, "Seed");
  train_ae->add_flag("--vanilla", vanilla, "Reconstruction loss only");
  train_ae->add_option("--log-every", ae_opts.log_every, "Steps between log lines");
  train_ae->add_option("--out", ae_out, "Run directory")->required();

  // train-gan
  refine::RefinerConfig gan_cfg;
  std::string gan_ae, gan_catalog, gan_out;
  refine::RefinerTrainOptions gan_opts;
  auto* train_gan = app.add_subcommand("train-gan", "Train the stage-2 refiner");
  train_gan->add_option("--ae-ckpt", gan_ae, "Stage-1 run directory or manifest")->required();
  train_gan->add_option("--catalog", gan_catalog, "catalog.json")->required();
  train_gan->add_option("--steps", gan_opts.steps, "Training steps");
  train_gan->add_option("--lambda", gan_cfg.lambda, "Reconstruction weight");
  train_gan->add_option("--batch", gan_cfg.batch_size, "Batch size");
  train_gan->add_option("--noise-scale", gan_cfg.noise_scale, "Noise injection scale");
  train_gan->add_option("--seed", gan_cfg.seed, "Seed");
  train_gan->add_option("--log-every", gan_opts.log_every, "Steps between log lines");
  train_gan->add_option("--out", gan_out, "Run directory")->required();

  // eval
  std::string ev_ae, ev_gan, ev_catalog, ev_tom, ev_out, ev_metrics = "skt_rec,sty_rec,percep";
  std::string ev_split = "test";
  int64_t ev_tom_index = 0;
  metrics::EvalOptions ev_opts;
  auto* eval = app.add_subcommand("eval", "Score a stage-1 (and optional stage-2) model");
  eval->add_option("--ae", ev_ae, "Stage-1 run directory or manifest")->required();
  eval->add_option("--gan", ev_gan, "Stage-2 run directory or manifest");
  eval->add_option("--catalog", ev_catalog, "catalog.json")->required();
  eval->add_option("--metrics", ev_metrics, "Comma-separated: skt_rec,sty_rec,percep");
  eval->add_option("--tom", ev_tom, "Sketch-generator run (skt_rec reference and extractor)");
  eval->add_option("--tom-index", ev_tom_index, "Pinned sketch-generator checkpoint index");
  eval->add_option("--sketch-index", ev_opts.sketch_index, "Which catalog sketch feeds the model");
  eval->add_option("--split", ev_split, "train|test");
  eval->add_option("--seed", ev_opts.seed, "Refiner noise seed");
  eval->add_option("--out", ev_out, "report.json")->required();

  // serve
  std::string serve_config;
  auto* serve = app.add_subcommand("serve", "Run the HTTP inference service");
  serve->add_option("--config", serve_config, "Service config JSON");

  CLI11_PARSE(app, argc, argv);
  try {
    log::set_level(log::parse_level(level));
    if (*make_toy) {
      toy::write_rgb_corpus(fs::path(toy_out) / "rgb", toy_images, toy_opts);
      toy::write_sketch_bank(fs::path(toy_out) / "bank", toy_bank, toy_opts);
      std::cout << "wrote " << toy_images << " images and " << toy_bank << " bank sketches\n";
    } else if (*catalog) {
      const fs::path out(cat_out);
      const auto c = data::build_split_catalog(
          cat_rgb, cat_sketch, out.parent_path().empty() ? "." : out.parent_path(), test_fraction,
          split_seed);
      data::save_catalog(c, out);
      std::cout << "pairs: " << c.pairs.size() << " (test "
                << c.in_split(data::Split::kTest).size() << ") orphans: " << c.orphans.size()
                << "\n";
    } else if (*train_ae) {
      if (vanilla) ae_cfg = ae::AeConfig::vanilla(ae_cfg);
      const auto c = load_catalog_checked(ae_catalog);
      const auto ds = ae::AeDataset::from_catalog(c, data::Split::kTrain, ae_cfg.resolution);
      ae::AeModel model(ae_cfg);
      const auto summary = ae::train(model, ds, data::RunLayout{ae_out}, ae_opts);
      std::cout << "saved " << summary.checkpoint.path << " (config " << model.config_hash()
                << ")\n";
    } else if (*train_gan) {
      const auto stage1 = ae::AeModel::load(gan_ae);
      const auto c = load_catalog_checked(gan_catalog);
      const auto ds = ae::AeDataset::from_catalog(c, data::Split::kTrain, stage1.config().resolution);
      const auto cfg = refine::RefinerConfig::for_stage1(stage1, gan_cfg);
      const auto summary = refine::train(stage1, cfg, ds, data::RunLayout{gan_out}, gan_opts);
      std::cout << "saved " << summary.checkpoint.path << "\n";
    } else if (*eval) {
      ev_opts.metrics = metrics::parse_metrics(ev_metrics);
      ev_opts.split = data::parse_split(ev_split);
      const auto c = load_catalog_checked(ev_catalog);
      const auto stage1 = ae::AeModel::load(ev_ae);
      std::optional<refine::RefinerModel> gan;
      if (!ev_gan.empty()) {
        gan = refine::RefinerModel::load(ev_gan);
        if (gan->config().ae_config_hash != stage1.config_hash()) {
          throw data::ConfigMismatch("refiner was trained on a different stage-1 model");
        }
      }
      std::optional<tom::SketchModel> sketcher;
      metrics::EvalInputs in;
      in.ae = &stage1;
      in.gan = gan ? &*gan : nullptr;
      if (!ev_tom.empty()) {
        sketcher = tom::SketchModel::load(ev_tom);
        in.tom = {&*sketcher, ev_tom_index};
        in.extractor = sketcher->extractor();
      } else {
        in.extractor = tom::PerceptualExtractor(tom::ExtractorConfig{});
      }
      const auto report = metrics::evaluate(c, in, ev_opts);
      data::atomic_write(ev_out, report.dump(2));
      std::cout << report["mean"].dump(2) << "\n";
    } else if (*serve) {
      auto cfg = service::ServiceConfig::from_file(serve_config);
      service::apply_env_overrides(cfg);
      return service::run(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
