// tom: train the sketch generator and emit multi-checkpoint sketches.

#include <CLI11.hpp>

#include <iostream>

#include "s2i/datastore.hpp"
#include "s2i/log.hpp"
#include "s2i/tom.hpp"

using namespace s2i;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Sketch generator: train once, sample several checkpoints"};
  app.require_subcommand(1);
  std::string level = "info";
  app.add_option("--log-level", level, "debug|info|warn|error|off");

  tom::TomConfig cfg;
  std::string rgb_dir, bank_dir, out, config_file;
  tom::TrainOptions topts;
  auto* train = app.add_subcommand("train", "Train the generator and sample checkpoints");
  train->add_option("--rgb-dir", rgb_dir, "RGB training images")->required();
  train->add_option("--sketch-bank", bank_dir, "Real line sketches")->required();
  train->add_option("--steps", topts.steps, "Training steps");
  train->add_option("--ckpt-every", cfg.schedule.every, "Steps between checkpoints");
  train->add_option("--ckpt-after", cfg.schedule.after, "Warmup steps before the first checkpoint");
  train->add_option("--ckpt-slots", cfg.schedule.slots, "Number of checkpoints");
  train->add_option("--res", cfg.resolution, "Training resolution");
  train->add_option("--batch", cfg.batch_size, "Batch size");
  train->add_option("--seed", cfg.seed, "Random seed");
  train->add_option("--extractor-weights", cfg.extractor.weights,
                    "Optional torch archive with pretrained extractor weights");
  train->add_option("--log-every", topts.log_every, "Steps between log lines");
  train->add_option("--out", out, "Run directory")->required();

  std::string manifest, gen_rgb, gen_out;
  auto* gen = app.add_subcommand("generate", "Emit one sketch per image and checkpoint");
  gen->add_option("--ckpt-manifest", manifest, "Run directory or manifest.json")->required();
  gen->add_option("--rgb-dir", gen_rgb, "Images to sketchify")->required();
  gen->add_option("--out", gen_out, "Sketch directory (catalog.json goes here)")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    log::set_level(log::parse_level(level));
    if (*train) {
      const auto rgb = tom::load_rgb_set(rgb_dir, cfg.resolution);
      const auto bank = tom::SketchStyleBank::load(bank_dir, cfg.resolution);
      log::info("training on ", rgb.size(0), " images with a bank of ", bank.size(),
                " sketches");
      const auto summary = tom::train(cfg, rgb, bank, data::RunLayout{out}, topts);
      std::cout << "checkpoints: " << summary.manifest.entries().size() << "\n";
      for (const auto& e : summary.checkpoint_errors) std::cerr << "checkpoint error: " << e << "\n";
      return summary.checkpoint_errors.empty() ? 0 : 2;
    }
    if (*gen) {
      const auto model = tom::SketchModel::load(manifest);
      const auto catalog = tom::generate_sketches(model, gen_rgb, gen_out);
      std::cout << "pairs: " << catalog.pairs.size() << " orphans: " << catalog.orphans.size()
                << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
