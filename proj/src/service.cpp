#include "s2i/service.hpp"

#include <httplib.h>

#include <pthread.h>

#include <csignal>
#include <cstdlib>
#include <regex>

#include "s2i/datastore.hpp"
#include "s2i/log.hpp"

namespace s2i::service {

namespace {

void send_error(httplib::Response& res, int status, const std::string& msg) {
  res.status = status;
  res.set_content(json{{"error", msg}, {"status", status}}.dump(), "application/json");
}

std::optional<std::string> field(const httplib::Request& req, const std::string& name) {
  if (req.has_file(name)) return req.get_file_value(name).content;
  if (req.has_param(name)) return req.get_param_value(name);
  return std::nullopt;
}

std::optional<int64_t> parse_int(const std::string& s) {
  try {
    size_t used = 0;
    const auto v = std::stoll(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::optional<uint64_t> parse_seed(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

bool side_ok(const torch::Tensor& img, const ServiceConfig& cfg) {
  const auto h = img.size(-2), w = img.size(-1);
  return h >= cfg.min_side && w >= cfg.min_side && h <= cfg.max_side && w <= cfg.max_side;
}

std::string side_message(const torch::Tensor& img, const ServiceConfig& cfg) {
  return "image is " + std::to_string(img.size(-1)) + "x" + std::to_string(img.size(-2)) +
         "; sides must lie in [" + std::to_string(cfg.min_side) + ", " +
         std::to_string(cfg.max_side) + "]";
}

const std::regex kStyleId("[A-Za-z0-9_.\\-]+");

std::optional<fs::path> find_style(const fs::path& gallery, const std::string& id) {
  if (!std::regex_match(id, kStyleId) || !fs::is_directory(gallery)) return std::nullopt;
  for (const auto& p : data::list_images(gallery)) {
    if (p.stem().string() == id) return p;
  }
  return std::nullopt;
}

std::string mime_for(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".bmp") return "image/bmp";
  return "image/png";
}

}  // namespace

// ---------------------------------------------------------------- config

ServiceConfig ServiceConfig::from_json(const json& j) {
  ServiceConfig c;
  c.host = j.value("host", c.host);
  c.port = j.value("port", c.port);
  c.run_dir = j.value("run_dir", c.run_dir.string());
  c.min_side = j.value("min_side", c.min_side);
  c.max_side = j.value("max_side", c.max_side);
  c.max_body_bytes = j.value("max_body_bytes", c.max_body_bytes);
  c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
  c.http_threads = j.value("http_threads", c.http_threads);
  if (c.min_side < 1 || c.max_side < c.min_side || c.queue_capacity < 1 || c.http_threads < 1) {
    throw std::invalid_argument("service config: bad limits");
  }
  return c;
}

ServiceConfig ServiceConfig::from_file(const fs::path& path) {
  if (path.empty()) return {};
  return from_json(json::parse(data::read_file(path)));
}

void apply_env_overrides(ServiceConfig& cfg) {
  if (const char* port = std::getenv("S2I_PORT")) {
    const auto v = parse_int(port);
    if (!v || *v < 0 || *v > 65535) throw std::invalid_argument("S2I_PORT is not a port number");
    cfg.port = static_cast<int>(*v);
  }
  if (const char* dir = std::getenv("S2I_RUN_DIR")) cfg.run_dir = dir;
}

// ---------------------------------------------------------------- models

int64_t Models::resolution() const {
  if (ae) return ae->config().resolution;
  if (tom) return tom->resolution();
  return 0;
}

json Models::loaded_checkpoints() const {
  return json{{"tom", tom ? json(tom->checkpoint_steps()) : json::array()},
              {"ae", ae ? json(ae->step()) : json(nullptr)},
              {"gan", gan ? json(gan->step()) : json(nullptr)}};
}

Models load_models(const ServiceConfig& cfg) {
  Models m;
  const auto present = [](const fs::path& dir) { return fs::exists(data::manifest_path(dir)); };
  if (present(cfg.tom_dir())) {
    try {
      m.tom = tom::SketchModel::load(cfg.tom_dir());
    } catch (const std::exception& e) {
      log::error("sketch generator not loaded: ", e.what());
    }
  }
  if (present(cfg.ae_dir())) {
    try {
      m.ae = ae::AeModel::load(cfg.ae_dir());
    } catch (const std::exception& e) {
      log::error("auto-encoder not loaded: ", e.what());
    }
  }
  if (present(cfg.gan_dir())) {
    try {
      auto gan = refine::RefinerModel::load(cfg.gan_dir());
      if (!m.ae || gan.config().ae_config_hash != m.ae->config_hash()) {
        throw data::ConfigMismatch("refiner belongs to a different stage-1 model");
      }
      m.gan = std::move(gan);
    } catch (const std::exception& e) {
      log::error("refiner not loaded: ", e.what());
    }
  }
  return m;
}

// ---------------------------------------------------------------- gate

InferenceGate::Slot& InferenceGate::Slot::operator=(Slot&& o) noexcept {
  if (this != &o) {
    if (gate_) gate_->in_use_.fetch_sub(1);
    gate_ = std::exchange(o.gate_, nullptr);
  }
  return *this;
}

InferenceGate::Slot::~Slot() {
  if (gate_) gate_->in_use_.fetch_sub(1);
}

std::optional<InferenceGate::Slot> InferenceGate::reserve() {
  size_t cur = in_use_.load();
  while (cur < capacity_) {
    if (in_use_.compare_exchange_weak(cur, cur + 1)) return Slot(this);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- service

Service::Service(ServiceConfig cfg)
    : cfg_(std::move(cfg)), server_(std::make_unique<httplib::Server>()),
      gate_(cfg_.queue_capacity) {
  routes();
}

Service::~Service() {
  stop();
  if (loader_.joinable()) loader_.join();
}

std::shared_ptr<const Models> Service::models() const {
  std::lock_guard<std::mutex> lock(models_mu_);
  return models_;
}

void Service::install(Models models) {
  {
    std::lock_guard<std::mutex> lock(models_mu_);
    models_ = std::make_shared<const Models>(std::move(models));
  }
  {
    std::lock_guard<std::mutex> lock(load_mu_);
    loading_ = false;
    ready_ = true;
  }
  load_cv_.notify_all();
}

void Service::begin_load(std::function<void()> before) {
  if (loader_.joinable()) loader_.join();
  ready_ = false;
  loading_ = true;
  loader_ = std::thread([this, before = std::move(before)] {
    if (before) before();
    Models m;
    try {
      m = load_models(cfg_);
    } catch (const std::exception& e) {
      log::error("model load failed: ", e.what());
    }
    install(std::move(m));
    log::info("models loaded from ", cfg_.run_dir.string());
  });
}

void Service::wait_loaded() {
  std::unique_lock<std::mutex> lock(load_mu_);
  load_cv_.wait(lock, [this] { return ready_.load(); });
}

int Service::start() {
  const auto threads = cfg_.http_threads;
  server_->new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  server_->set_payload_max_length(cfg_.max_body_bytes);
  if (cfg_.port == 0) {
    port_ = server_->bind_to_any_port(cfg_.host);
  } else {
    port_ = server_->bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1;
  }
  if (port_ <= 0) {
    throw std::runtime_error("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  }
  listener_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void Service::wait() {
  if (listener_.joinable()) listener_.join();
}

void Service::stop() {
  if (server_) server_->stop();
  if (listener_.joinable()) listener_.join();
}

void Service::routes() {
  auto& svr = *server_;
  svr.set_exception_handler([](const httplib::Request&, httplib::Response& res,
                               std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    }
    log::error("request failed: ", msg);
    send_error(res, 500, msg);
  });

  svr.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    const auto m = models();
    if (!ready_ || !m) {
      res.status = 503;
      res.set_content(json{{"status", loading_ ? "loading" : "not_loaded"},
                           {"version", kVersion}}
                          .dump(),
                      "application/json");
      return;
    }
    res.set_header(kResolutionHeader, std::to_string(m->resolution()));
    res.set_content(json{{"status", "ok"},
                         {"loaded_checkpoints", m->loaded_checkpoints()},
                         {"resolution", m->resolution()},
                         {"version", kVersion}}
                        .dump(),
                    "application/json");
  });

  svr.Get("/styles", [this](const httplib::Request&, httplib::Response& res) {
    json list = json::array();
    if (fs::is_directory(cfg_.gallery_dir())) {
      for (const auto& p : data::list_images(cfg_.gallery_dir())) {
        const auto id = p.stem().string();
        if (!std::regex_match(id, kStyleId)) continue;
        list.push_back({{"id", id}, {"thumbnail_url", "/styles/" + id}});
      }
    }
    res.set_content(list.dump(), "application/json");
  });

  svr.Get(R"(/styles/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto path = find_style(cfg_.gallery_dir(), req.matches[1]);
    if (!path) return send_error(res, 404, "unknown style '" + std::string(req.matches[1]) + "'");
    std::string bytes;
    try {
      bytes = data::read_file(*path);
    } catch (const std::exception&) {
      return send_error(res, 404, "style image disappeared");
    }
    res.set_content(bytes, mime_for(*path));
  });

  svr.Post("/sketchify", [this](const httplib::Request& req, httplib::Response& res) {
    auto slot = gate_.reserve();
    if (!slot) return send_error(res, 429, "inference queue is full");
    const auto m = models();
    if (!ready_ || !m || !m->tom) return send_error(res, 503, "sketch generator not loaded");
    const auto& sketcher = *m->tom;
    const int64_t res_px = sketcher.resolution();
    res.set_header(kResolutionHeader, std::to_string(res_px));

    const auto image = field(req, "image");
    if (!image) return send_error(res, 400, "missing 'image' upload");
    const auto idx_s = field(req, "checkpoint_index").value_or("0");
    const auto idx = parse_int(idx_s);
    if (!idx) return send_error(res, 400, "checkpoint_index must be an integer");
    if (*idx < 0 || *idx >= sketcher.num_checkpoints()) {
      return send_error(res, 404, "unknown checkpoint index " + std::to_string(*idx) + " (have " +
                                      std::to_string(sketcher.num_checkpoints()) + ")");
    }
    torch::Tensor img;
    try {
      img = data::decode_image(*image, 3);
    } catch (const data::ImageDecodeError& e) {
      return send_error(res, 400, e.what());
    }
    if (!side_ok(img, cfg_)) return send_error(res, 422, side_message(img, cfg_));

    const auto out = gate_.run([&] {
      const auto boxed = data::letterbox(img, res_px, std::nullopt);
      const auto sketch = sketcher.sketchify(boxed.image, *idx).squeeze(0);
      return data::unletterbox(sketch, boxed.placement, img.size(1), img.size(2));
    });
    res.set_content(data::encode_png(out), "image/png");
  });

  svr.Post("/synthesize", [this](const httplib::Request& req, httplib::Response& res) {
    auto slot = gate_.reserve();
    if (!slot) return send_error(res, 429, "inference queue is full");
    const auto m = models();
    if (!ready_ || !m) return send_error(res, 503, "models not loaded");

    const auto stage = field(req, "stage").value_or("ae");
    if (stage != "ae" && stage != "gan") {
      return send_error(res, 400, "stage must be 'ae' or 'gan'");
    }
    if (!m->ae) return send_error(res, 503, "auto-encoder not loaded");
    if (stage == "gan" && !m->gan) return send_error(res, 503, "refiner not loaded");
    const auto& ae = *m->ae;
    const int64_t res_px = ae.config().resolution;
    res.set_header(kResolutionHeader, std::to_string(res_px));

    const auto seed = parse_seed(field(req, "seed").value_or("0"));
    if (!seed) return send_error(res, 400, "seed must be a non-negative integer");
    const auto sketch_bytes = field(req, "sketch");
    if (!sketch_bytes) return send_error(res, 400, "missing 'sketch' upload");

    std::string style_bytes;
    if (req.has_file("style")) {
      style_bytes = req.get_file_value("style").content;
    } else if (const auto id = field(req, "style_id")) {
      const auto path = find_style(cfg_.gallery_dir(), *id);
      if (!path) return send_error(res, 404, "unknown style '" + *id + "'");
      try {
        style_bytes = data::read_file(*path);
      } catch (const std::exception&) {
        return send_error(res, 404, "style image disappeared");
      }
    } else {
      return send_error(res, 400, "provide a 'style' upload or a 'style_id'");
    }

    torch::Tensor sketch, style;
    try {
      sketch = data::decode_image(*sketch_bytes, 1);
      style = data::decode_image(style_bytes, 3);
    } catch (const data::ImageDecodeError& e) {
      return send_error(res, 400, e.what());
    }
    if (!side_ok(sketch, cfg_)) return send_error(res, 422, "sketch: " + side_message(sketch, cfg_));
    if (!side_ok(style, cfg_)) return send_error(res, 422, "style: " + side_message(style, cfg_));

    const auto out = gate_.run([&] {
      const auto sk = data::letterbox(sketch, res_px, 1.0f);
      const auto st = data::letterbox(style, res_px, std::nullopt);
      auto img = ae.infer(sk.image, st.image);
      if (stage == "gan") {
        const auto& gan = *m->gan;
        const auto code = gan.config().use_style_skip ? ae.encode_style(st.image) : torch::Tensor();
        img = gan.refine(img, code, *seed);
      }
      return data::unletterbox(img, sk.placement, sketch.size(1), sketch.size(2));
    });
    res.set_content(data::encode_png(out), "image/png");
  });
}

int run(const ServiceConfig& cfg) {
  // Block before any thread exists so every worker inherits the mask and the
  // signal is only ever consumed by sigwait below.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  Service svc(cfg);
  const int port = svc.start();
  log::info("serving on ", cfg.host, ":", port, " (run dir ", cfg.run_dir.string(), ")");
  svc.begin_load();
  int sig = 0;
  sigwait(&stop_signals, &sig);
  log::info("signal ", sig, ", shutting down");
  svc.stop();
  return 0;
}

}  // namespace s2i::service
