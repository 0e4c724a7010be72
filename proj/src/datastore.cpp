#include "s2i/datastore.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace s2i::data {

// ---------------------------------------------------------------- hashing

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t n) { EVP_DigestUpdate(ctx_, data, n); }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned i = 0; i < len; ++i) {
      out.push_back(digits[md[i] >> 4]);
      out.push_back(digits[md[i] & 0xf]);
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string file_sha256(const fs::path& path) { return sha256_hex(read_file(path)); }

std::string config_hash(const json& config) { return sha256_hex(config.dump()).substr(0, 16); }

std::string weights_digest(const torch::nn::Module& module) {
  Sha256 h;
  auto feed = [&](const std::string& name, const torch::Tensor& t) {
    h.update(name.data(), name.size());
    const auto c = t.detach().contiguous().cpu();
    h.update(c.data_ptr(), c.numel() * c.element_size());
  };
  for (const auto& p : module.named_parameters(/*recurse=*/true)) feed(p.key(), p.value());
  for (const auto& b : module.named_buffers(/*recurse=*/true)) feed(b.key(), b.value());
  return h.hex();
}

// ---------------------------------------------------------------- files

void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot write " + tmp.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw std::runtime_error("short write to " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot read " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- images

namespace {

torch::Tensor mat_to_tensor(const cv::Mat& decoded, int64_t channels) {
  cv::Mat m;
  if (channels == 1) {
    if (decoded.channels() == 1) {
      m = decoded;
    } else {
      cv::cvtColor(decoded, m, decoded.channels() == 4 ? cv::COLOR_BGRA2GRAY : cv::COLOR_BGR2GRAY);
    }
  } else {
    if (decoded.channels() == 1) {
      cv::cvtColor(decoded, m, cv::COLOR_GRAY2RGB);
    } else {
      cv::cvtColor(decoded, m, decoded.channels() == 4 ? cv::COLOR_BGRA2RGB : cv::COLOR_BGR2RGB);
    }
  }
  if (m.depth() != CV_8U) {
    m.convertTo(m, CV_8U, 1.0 / 257.0);
  }
  m = m.clone();
  auto t = torch::from_blob(m.data, {m.rows, m.cols, static_cast<int64_t>(m.channels())},
                            torch::kUInt8)
               .clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

cv::Mat tensor_to_mat(const torch::Tensor& img) {
  if (img.dim() != 3 || (img.size(0) != 1 && img.size(0) != 3)) {
    throw std::invalid_argument("encode_png: expected a (1|3, h, w) image");
  }
  auto u8 = img.detach()
                .to(torch::kFloat32)
                .add(1.0)
                .mul(127.5)
                .round()
                .clamp(0, 255)
                .to(torch::kUInt8)
                .permute({1, 2, 0})
                .contiguous();
  const int c = static_cast<int>(img.size(0));
  cv::Mat m(static_cast<int>(img.size(1)), static_cast<int>(img.size(2)), CV_8UC(c),
            u8.data_ptr());
  cv::Mat out;
  if (c == 3) {
    cv::cvtColor(m, out, cv::COLOR_RGB2BGR);
  } else {
    out = m.clone();
  }
  return out;
}

}  // namespace

torch::Tensor decode_image(const std::string& bytes, int64_t channels) {
  if (channels != 1 && channels != 3) {
    throw std::invalid_argument("decode_image: channels must be 1 or 3");
  }
  if (bytes.empty()) {
    throw ImageDecodeError("empty image payload");
  }
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8U, const_cast<char*>(bytes.data()));
  cv::Mat decoded;
  try {
    decoded = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw ImageDecodeError(std::string("cannot decode image: ") + e.what());
  }
  if (decoded.empty()) {
    throw ImageDecodeError("cannot decode image");
  }
  return mat_to_tensor(decoded, channels);
}

torch::Tensor load_image(const fs::path& path, int64_t channels) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::runtime_error& e) {
    throw ImageDecodeError(e.what());
  }
  try {
    return decode_image(bytes, channels);
  } catch (const ImageDecodeError& e) {
    throw ImageDecodeError(path.string() + ": " + e.what());
  }
}

std::string encode_png(const torch::Tensor& img) {
  std::vector<uchar> buf;
  if (!cv::imencode(".png", tensor_to_mat(img), buf)) {
    throw std::runtime_error("PNG encoding failed");
  }
  return std::string(buf.begin(), buf.end());
}

void save_png(const torch::Tensor& img, const fs::path& path) { atomic_write(path, encode_png(img)); }

torch::Tensor resize(const torch::Tensor& img, int64_t h, int64_t w) {
  if (img.size(-2) == h && img.size(-1) == w) {
    return img;
  }
  namespace F = torch::nn::functional;
  const bool down = h < img.size(-2) || w < img.size(-1);
  return F::interpolate(img.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{h, w})
                                              .mode(torch::kBilinear)
                                              .align_corners(false)
                                              .antialias(down))
      .squeeze(0);
}

Letterboxed letterbox(const torch::Tensor& img, int64_t size, std::optional<float> pad_value) {
  const int64_t h = img.size(1), w = img.size(2);
  const double s = static_cast<double>(size) / static_cast<double>(std::max(h, w));
  const int64_t nh = std::clamp<int64_t>(std::llround(h * s), 1, size);
  const int64_t nw = std::clamp<int64_t>(std::llround(w * s), 1, size);
  const auto scaled = resize(img, nh, nw);
  Placement p{(size - nh) / 2, (size - nw) / 2, nh, nw};
  namespace F = torch::nn::functional;
  const std::vector<int64_t> pad{p.left, size - nw - p.left, p.top, size - nh - p.top};
  torch::Tensor out;
  if (pad_value) {
    out = F::pad(scaled.unsqueeze(0), F::PadFuncOptions(pad).mode(torch::kConstant).value(*pad_value));
  } else {
    out = F::pad(scaled.unsqueeze(0), F::PadFuncOptions(pad).mode(torch::kReplicate));
  }
  return Letterboxed{out.squeeze(0), p};
}

torch::Tensor unletterbox(const torch::Tensor& img, const Placement& p, int64_t h, int64_t w) {
  using torch::indexing::Slice;
  const auto crop = img.index({Slice(), Slice(p.top, p.top + p.height), Slice(p.left, p.left + p.width)});
  return resize(crop, h, w);
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) {
    return out;
  }
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------- catalog

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("unknown split: " + s);
}

std::vector<const SketchPair*> Catalog::in_split(Split s) const {
  std::vector<const SketchPair*> out;
  for (const auto& p : pairs) {
    if (p.split == s) out.push_back(&p);
  }
  return out;
}

std::string sketch_file_name(const std::string& stem, int64_t k) {
  return stem + ".skt" + std::to_string(k) + ".png";
}

namespace {

std::string relative_to(const fs::path& p, const fs::path& base) {
  return fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(base)).generic_string();
}

}  // namespace

Catalog build_catalog(const fs::path& rgb_dir, const fs::path& sketch_dir,
                      const fs::path& catalog_dir) {
  static const std::regex kSketchName(R"((.+)\.skt(\d+)\.png)");
  std::map<std::string, std::vector<std::pair<int64_t, fs::path>>> sketches;
  if (fs::is_directory(sketch_dir)) {
    for (const auto& e : fs::directory_iterator(sketch_dir)) {
      std::smatch m;
      const auto name = e.path().filename().string();
      if (e.is_regular_file() && std::regex_match(name, m, kSketchName)) {
        sketches[m[1].str()].emplace_back(std::stoll(m[2].str()), e.path());
      }
    }
  }

  Catalog c;
  c.root = catalog_dir;
  std::map<std::string, fs::path> images;
  for (const auto& p : list_images(rgb_dir)) {
    images.emplace(p.stem().string(), p);
  }
  for (const auto& [stem, path] : images) {
    auto it = sketches.find(stem);
    if (it == sketches.end() || it->second.empty()) {
      c.orphans.push_back(relative_to(path, catalog_dir));
      continue;
    }
    auto list = it->second;
    std::sort(list.begin(), list.end());
    SketchPair pair;
    pair.stem = stem;
    pair.image = relative_to(path, catalog_dir);
    pair.checksum = file_sha256(path);
    for (const auto& [k, sp] : list) {
      pair.checkpoints.push_back(k);
      pair.sketches.push_back(relative_to(sp, catalog_dir));
    }
    c.pairs.push_back(std::move(pair));
  }
  return c;
}

json to_json(const Catalog& c) {
  json pairs = json::array();
  for (const auto& p : c.pairs) {
    pairs.push_back({{"stem", p.stem},
                     {"image", p.image},
                     {"sketches", p.sketches},
                     {"checkpoints", p.checkpoints},
                     {"split", to_string(p.split)},
                     {"checksum", p.checksum}});
  }
  return json{{"version", 1},
              {"config_hash", c.config_hash},
              {"checkpoint_ids", c.checkpoint_ids},
              {"pairs", pairs},
              {"orphans", c.orphans}};
}

Catalog catalog_from_json(const json& j, const fs::path& root) {
  Catalog c;
  c.root = root;
  c.config_hash = j.value("config_hash", "");
  c.checkpoint_ids = j.value("checkpoint_ids", std::vector<int64_t>{});
  c.orphans = j.value("orphans", std::vector<std::string>{});
  for (const auto& pj : j.at("pairs")) {
    SketchPair p;
    p.stem = pj.at("stem").get<std::string>();
    p.image = pj.at("image").get<std::string>();
    p.sketches = pj.at("sketches").get<std::vector<std::string>>();
    p.checkpoints = pj.value("checkpoints", std::vector<int64_t>{});
    p.split = parse_split(pj.value("split", "train"));
    p.checksum = pj.value("checksum", "");
    if (p.sketches.empty()) {
      throw std::invalid_argument("catalog: pair " + p.stem + " has no sketches");
    }
    c.pairs.push_back(std::move(p));
  }
  return c;
}

void save_catalog(const Catalog& c, const fs::path& path) {
  atomic_write(path, to_json(c).dump(2) + "\n");
}

Catalog load_catalog(const fs::path& path, bool verify) {
  const auto j = json::parse(read_file(path));
  auto c = catalog_from_json(j, path.parent_path());
  if (verify) {
    for (const auto& p : c.pairs) {
      const auto img = c.resolve(p.image);
      if (!fs::exists(img)) {
        throw std::runtime_error("catalog: missing image " + img.string());
      }
      if (!p.checksum.empty() && file_sha256(img) != p.checksum) {
        throw std::runtime_error("catalog: checksum mismatch for " + img.string());
      }
      for (const auto& s : p.sketches) {
        if (!fs::exists(c.resolve(s))) {
          throw std::runtime_error("catalog: missing sketch " + c.resolve(s).string());
        }
      }
    }
  }
  return c;
}

Catalog split_dataset(const Catalog& c, double test_fraction, uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split_dataset: test fraction must lie in (0, 1)");
  }
  const size_t n = c.pairs.size();
  const auto n_test = static_cast<size_t>(std::llround(test_fraction * static_cast<double>(n)));
  if (n_test == 0 || n_test >= n) {
    throw std::invalid_argument("split_dataset: fraction leaves a split empty");
  }
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw keeps the permutation portable.
  for (size_t i = n - 1; i > 0; --i) {
    const size_t j = static_cast<size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  Catalog out = c;
  for (size_t i = 0; i < n; ++i) {
    out.pairs[order[i]].split = i < n_test ? Split::kTest : Split::kTrain;
  }
  return out;
}

Catalog build_split_catalog(const fs::path& rgb_dir, const fs::path& sketch_dir,
                            const fs::path& catalog_dir, double test_fraction, uint64_t seed) {
  auto c = build_catalog(rgb_dir, sketch_dir, catalog_dir);
  const auto sketch_catalog = sketch_dir / "catalog.json";
  if (fs::exists(sketch_catalog)) {
    const auto prior = load_catalog(sketch_catalog, false);
    c.config_hash = prior.config_hash;
    c.checkpoint_ids = prior.checkpoint_ids;
  }
  return test_fraction > 0 ? split_dataset(c, test_fraction, seed) : c;
}

// ---------------------------------------------------------------- checkpoints

std::string to_string(Role r) {
  switch (r) {
    case Role::kTom:
      return "tom";
    case Role::kAe:
      return "ae";
    case Role::kGan:
      return "gan";
  }
  return "?";
}

Role parse_role(const std::string& s) {
  if (s == "tom") return Role::kTom;
  if (s == "ae") return Role::kAe;
  if (s == "gan") return Role::kGan;
  throw std::invalid_argument("unknown checkpoint role: " + s);
}

std::string CheckpointManifest::register_config(const json& config) {
  auto h = config_hash(config);
  configs_[h] = config;
  return h;
}

void CheckpointManifest::add(CheckpointEntry entry) {
  if (!configs_.contains(entry.config_hash)) {
    throw std::invalid_argument("CheckpointManifest: entry references an unregistered config");
  }
  entries_.push_back(std::move(entry));
}

std::vector<CheckpointEntry> CheckpointManifest::by_role(Role role) const {
  std::vector<CheckpointEntry> out;
  std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
               [&](const auto& e) { return e.role == role; });
  return out;
}

const CheckpointEntry& CheckpointManifest::latest(Role role) const {
  const CheckpointEntry* best = nullptr;
  for (const auto& e : entries_) {
    if (e.role == role && (!best || e.step >= best->step)) best = &e;
  }
  if (!best) {
    throw std::runtime_error("manifest has no " + to_string(role) + " checkpoint");
  }
  return *best;
}

const json& CheckpointManifest::config_for(const CheckpointEntry& entry) const {
  auto it = configs_.find(entry.config_hash);
  if (it == configs_.end()) {
    throw ConfigMismatch("no config stored for hash " + entry.config_hash);
  }
  if (config_hash(it->second) != entry.config_hash) {
    throw ConfigMismatch("stored config does not hash to " + entry.config_hash);
  }
  return it->second;
}

void CheckpointManifest::verify(const CheckpointEntry& entry, const json& expected) const {
  const auto h = config_hash(expected);
  if (h != entry.config_hash) {
    throw ConfigMismatch("checkpoint " + entry.path + " was produced with config " +
                         entry.config_hash + ", expected " + h);
  }
}

json CheckpointManifest::to_json() const {
  json entries = json::array();
  for (const auto& e : entries_) {
    entries.push_back({{"role", to_string(e.role)},
                       {"step", e.step},
                       {"path", e.path},
                       {"config_hash", e.config_hash},
                       {"metrics", e.metrics}});
  }
  json configs = json::object();
  for (const auto& [h, cfg] : configs_) configs[h] = cfg;
  return json{{"version", 1}, {"configs", configs}, {"entries", entries}};
}

void CheckpointManifest::save(const fs::path& path) const {
  atomic_write(path, to_json().dump(2) + "\n");
}

CheckpointManifest CheckpointManifest::load(const fs::path& path) {
  const auto j = json::parse(read_file(path));
  CheckpointManifest m(path.parent_path());
  for (const auto& [h, cfg] : j.at("configs").items()) {
    m.configs_[h] = cfg;
  }
  for (const auto& ej : j.at("entries")) {
    CheckpointEntry e;
    e.role = parse_role(ej.at("role").get<std::string>());
    e.step = ej.at("step").get<int64_t>();
    e.path = ej.at("path").get<std::string>();
    e.config_hash = ej.at("config_hash").get<std::string>();
    e.metrics = ej.value("metrics", json::object());
    if (!fs::exists(m.resolve(e))) {
      throw std::runtime_error("manifest: missing checkpoint file " + m.resolve(e).string());
    }
    m.entries_.push_back(std::move(e));
  }
  return m;
}

fs::path manifest_path(const fs::path& run_or_manifest) {
  if (fs::is_directory(run_or_manifest)) {
    return run_or_manifest / "manifest.json";
  }
  return run_or_manifest;
}

}  // namespace s2i::data
