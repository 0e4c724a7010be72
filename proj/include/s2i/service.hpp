#pragma once

// HTTP inference service over frozen checkpoints.
//
//   POST /sketchify   multipart: image (file), checkpoint_index (int, default 0)
//   POST /synthesize  multipart: sketch (file), style (file) or style_id,
//                     stage ("ae" | "gan", default "ae"), seed (default 0)
//   GET  /styles      gallery listing [{id, thumbnail_url}]
//   GET  /styles/<id> gallery image
//   GET  /health      {status, loaded_checkpoints, resolution, version}
//
// Status codes: 400 malformed input, 404 unknown checkpoint / style, 422
// image side outside [min_side, max_side], 429 work queue full, 503 model
// not loaded (or still loading).

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "s2i/model.hpp"
#include "s2i/refiner.hpp"
#include "s2i/tom.hpp"

namespace httplib {
class Server;
}

namespace s2i::service {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kResolutionHeader = "X-Model-Resolution";

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  // Holds tom/, ae/, gan/ run directories and gallery/ images.
  fs::path run_dir = "runs/serve";
  int64_t min_side = 16;
  int64_t max_side = 2048;
  size_t max_body_bytes = 32u << 20;
  // Requests admitted at once (running plus waiting); more get 429.
  size_t queue_capacity = 4;
  size_t http_threads = 8;

  fs::path tom_dir() const { return run_dir / "tom"; }
  fs::path ae_dir() const { return run_dir / "ae"; }
  fs::path gan_dir() const { return run_dir / "gan"; }
  fs::path gallery_dir() const { return run_dir / "gallery"; }

  // Empty path gives the defaults.
  static ServiceConfig from_file(const fs::path& path);
  static ServiceConfig from_json(const json& j);
};

// S2I_PORT and S2I_RUN_DIR take precedence over the file.
void apply_env_overrides(ServiceConfig& cfg);

struct Models {
  std::optional<tom::SketchModel> tom;
  std::optional<ae::AeModel> ae;
  std::optional<refine::RefinerModel> gan;

  int64_t resolution() const;
  json loaded_checkpoints() const;
};

// Loads whatever the run directory holds. Missing stages stay empty; a
// refiner trained on a different stage-1 model is rejected.
Models load_models(const ServiceConfig& cfg);

// Bounded admission plus serialized execution.
class InferenceGate {
 public:
  explicit InferenceGate(size_t capacity) : capacity_(capacity) {}

  class Slot {
   public:
    Slot() = default;
    explicit Slot(InferenceGate* gate) : gate_(gate) {}
    Slot(Slot&& o) noexcept : gate_(std::exchange(o.gate_, nullptr)) {}
    Slot& operator=(Slot&& o) noexcept;
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;
    ~Slot();

   private:
    InferenceGate* gate_ = nullptr;
  };

  // Empty when capacity is exhausted.
  std::optional<Slot> reserve();
  // Runs fn under the device lock.
  template <typename Fn>
  auto run(Fn&& fn) {
    std::lock_guard<std::mutex> lock(device_);
    return fn();
  }

  size_t in_use() const { return in_use_.load(); }
  size_t capacity() const { return capacity_; }

 private:
  size_t capacity_;
  std::atomic<size_t> in_use_{0};
  std::mutex device_;
};

class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds (port 0 picks a free one) and serves on a background thread.
  int start();
  void stop();
  // Blocks until the listener exits.
  void wait();
  int port() const { return port_; }

  // Loads models from the run directory on a background thread. `before`
  // runs first on that thread; tests use it to hold the service in the
  // loading state.
  void begin_load(std::function<void()> before = {});
  void wait_loaded();
  // Installs already-loaded models directly.
  void install(Models models);

  bool ready() const { return ready_.load(); }
  InferenceGate& gate() { return gate_; }
  const ServiceConfig& config() const { return cfg_; }

 private:
  void routes();

  ServiceConfig cfg_;
  std::unique_ptr<httplib::Server> server_;
  std::thread listener_;
  std::thread loader_;
  int port_ = 0;
  InferenceGate gate_;
  std::shared_ptr<const Models> models_;
  mutable std::mutex models_mu_;
  std::atomic<bool> ready_{false};
  std::atomic<bool> loading_{false};
  std::mutex load_mu_;
  std::condition_variable load_cv_;

  std::shared_ptr<const Models> models() const;
};

// Blocking entry point for `s2i serve`.
int run(const ServiceConfig& cfg);

}  // namespace s2i::service
