#pragma once

// On-disk state shared by the trainers, the evaluation harness and the
// service: PNG images, the sketch-pair catalog and checkpoint manifests.
//
// Layout conventions:
//   data/rgb/<stem>.png
//   data/sketch/<stem>.skt<k>.png
//   data/catalog.json
//   runs/<name>/ckpt/...
//   runs/<name>/manifest.json
//
// Catalogs and manifests are JSON, written atomically (temp file + rename).
// Paths inside them are stored relative to the directory of the JSON file.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace s2i::data {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- hashing

std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const fs::path& path);

// Short stable digest of a JSON config (sorted keys).
std::string config_hash(const json& config);

// Digest of every parameter and buffer of a module, in registration order.
std::string weights_digest(const torch::nn::Module& module);

// ---------------------------------------------------------------- files

void atomic_write(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

// ---------------------------------------------------------------- images

class ImageDecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// (channels, h, w) float tensor in [-1, 1]. channels is 1 (gray) or 3 (RGB).
torch::Tensor decode_image(const std::string& bytes, int64_t channels);
torch::Tensor load_image(const fs::path& path, int64_t channels);

std::string encode_png(const torch::Tensor& img);
void save_png(const torch::Tensor& img, const fs::path& path);

// Bilinear (antialiased) resize of a (c,h,w) image.
torch::Tensor resize(const torch::Tensor& img, int64_t h, int64_t w);

struct Placement {
  int64_t top = 0;
  int64_t left = 0;
  int64_t height = 0;
  int64_t width = 0;
};

struct Letterboxed {
  torch::Tensor image;  // (c, size, size)
  Placement placement;  // where the scaled source sits inside it
};

// Aspect-preserving fit into size x size. Padding is `pad_value` when set,
// edge replication otherwise.
Letterboxed letterbox(const torch::Tensor& img, int64_t size, std::optional<float> pad_value);
// Inverse of letterbox: crop the placement and resize back to (h, w).
torch::Tensor unletterbox(const torch::Tensor& img, const Placement& placement, int64_t h,
                          int64_t w);

std::vector<fs::path> list_images(const fs::path& dir);

// ---------------------------------------------------------------- catalog

enum class Split { kTrain, kTest };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct SketchPair {
  std::string stem;
  std::string image;                  // relative to the catalog directory
  std::vector<std::string> sketches;  // one per sketch-generator checkpoint
  std::vector<int64_t> checkpoints;   // checkpoint index of each sketch
  Split split = Split::kTrain;
  std::string checksum;  // sha256 of the image file

  bool operator==(const SketchPair&) const = default;
};

struct Catalog {
  std::vector<SketchPair> pairs;     // sorted by stem
  std::vector<std::string> orphans;  // images without sketches
  std::string config_hash;           // of the sketch-generator config, if known
  std::vector<int64_t> checkpoint_ids;
  fs::path root;  // directory the relative paths resolve against

  fs::path resolve(const std::string& rel) const { return root / rel; }
  std::vector<const SketchPair*> in_split(Split s) const;

  bool operator==(const Catalog& o) const {
    return pairs == o.pairs && orphans == o.orphans && config_hash == o.config_hash &&
           checkpoint_ids == o.checkpoint_ids;
  }
};

// Sketch file name for image `stem` and checkpoint index k: <stem>.skt<k>.png
std::string sketch_file_name(const std::string& stem, int64_t k);

// Enumerates rgb_dir and matches sketches named by sketch_file_name in
// sketch_dir. Relative paths are computed against `catalog_dir`.
Catalog build_catalog(const fs::path& rgb_dir, const fs::path& sketch_dir,
                      const fs::path& catalog_dir);

json to_json(const Catalog& c);
Catalog catalog_from_json(const json& j, const fs::path& root);

void save_catalog(const Catalog& c, const fs::path& path);
// With verify, every path must resolve and every checksum must match.
Catalog load_catalog(const fs::path& path, bool verify = true);

// Seeded disjoint train/test assignment; rejects fractions that leave a
// split empty.
Catalog split_dataset(const Catalog& c, double test_fraction, uint64_t seed);

// build_catalog, then the sketch generator's config hash and checkpoint ids
// from sketch_dir/catalog.json when present, then a seeded split (skipped
// when test_fraction is 0).
Catalog build_split_catalog(const fs::path& rgb_dir, const fs::path& sketch_dir,
                            const fs::path& catalog_dir, double test_fraction, uint64_t seed);

// ---------------------------------------------------------------- checkpoints

enum class Role { kTom, kAe, kGan };
std::string to_string(Role r);
Role parse_role(const std::string& s);

class ConfigMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  Role role = Role::kTom;
  int64_t step = 0;
  std::string path;  // relative to the manifest directory
  std::string config_hash;
  json metrics = json::object();

  bool operator==(const CheckpointEntry&) const = default;
};

class CheckpointManifest {
 public:
  CheckpointManifest() = default;
  explicit CheckpointManifest(fs::path root) : root_(std::move(root)) {}

  // Stores the config and returns its hash.
  std::string register_config(const json& config);
  void add(CheckpointEntry entry);

  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  std::vector<CheckpointEntry> by_role(Role role) const;
  const CheckpointEntry& latest(Role role) const;
  bool empty() const { return entries_.empty(); }

  // The stored config of an entry, after checking it still hashes to the
  // entry's config_hash. Throws ConfigMismatch otherwise.
  const json& config_for(const CheckpointEntry& entry) const;
  // Hard error unless `expected` hashes to the entry's config_hash.
  void verify(const CheckpointEntry& entry, const json& expected) const;

  fs::path resolve(const CheckpointEntry& entry) const { return root_ / entry.path; }
  const fs::path& root() const { return root_; }

  json to_json() const;
  void save(const fs::path& path) const;
  static CheckpointManifest load(const fs::path& path);

 private:
  fs::path root_;
  std::vector<CheckpointEntry> entries_;
  std::map<std::string, json> configs_;
};

// runs/<name> helpers.
struct RunLayout {
  fs::path dir;
  fs::path ckpt_dir() const { return dir / "ckpt"; }
  fs::path manifest() const { return dir / "manifest.json"; }
};

// Accepts a run directory or a manifest.json path.
fs::path manifest_path(const fs::path& run_or_manifest);

}  // namespace s2i::data
