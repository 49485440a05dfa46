#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sat3d/inference.hpp"
#include "sat3d/netblocks/model.hpp"

namespace sat3d::serve {

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path checkpoint;
  double idle_timeout_s = 1800;
  std::string cors_origin = "*";
  double confidence_threshold = 0.3;
  double overlap = 0.5;
  int max_steps = 1000;                  // per session
  std::filesystem::path trace_dir;       // empty = keep traces in memory only
  std::size_t idempotency_cache = 256;   // remembered keys per session

  // SAT3D_CHECKPOINT and SAT3D_PORT override the matching fields.
  static ServeConfig from_env(ServeConfig base);
};

// Exactly what the service feeds the model for an uploaded volume.
Volume model_input(const Volume& v);

// Transport-independent response.
struct Reply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
  std::map<std::string, std::string> headers;

  nlohmann::json json() const { return nlohmann::json::parse(body); }
};

enum class Layer { Image, Mask, Confidence };

struct Session {
  using Clock = std::chrono::steady_clock;

  std::string id;
  Volume volume;  // as uploaded
  Volume input;   // model_input(volume)
  std::optional<BinaryMask> gt;
  PromptState state;
  ScalarGrid prob;
  ConfidenceMap conf;
  BinaryMask pred;
  std::vector<double> dice;  // per step, when a gt is registered
  std::string checkpoint_id;
  std::chrono::system_clock::time_point created;
  std::atomic<Clock::rep> last_used{0};  // steady-clock ticks
  inference::NetStepModel model;
  std::map<std::string, Reply> replies;  // idempotency cache
  std::vector<std::string> reply_order;
  std::mutex mutex;

  Session(const netblocks::Sat3dNet& net, double overlap) : model(net, overlap) {}
};

// Session store and request handlers. Handlers lock only the session they
// touch, so distinct sessions proceed concurrently; the network is shared
// read-only.
class Service {
 public:
  using Clock = Session::Clock;

  Service(std::shared_ptr<const netblocks::Sat3dNet> net, ServeConfig cfg, std::string checkpoint_id = "");

  // Body: native-format volume bytes, or JSON {"path": ..., "gt_path"?: ...}
  // naming server-side files.
  Reply create_session(const std::string& body, const std::string& content_type,
                       const std::string& idempotency_key = "");
  // Body: {"point": [i, j, k], "label": 0|1}.
  Reply add_prompt(const std::string& id, const std::string& body, const std::string& idempotency_key = "");
  // Body: native-format mask bytes or JSON {"path": ...}.
  Reply set_ground_truth(const std::string& id, const std::string& body, const std::string& content_type);
  Reply get_session(const std::string& id);
  Reply get_slice(const std::string& id, const std::string& axis, const std::string& index, const std::string& layer);
  // Whole layer in the native format.
  Reply get_layer(const std::string& id, const std::string& layer);
  Reply delete_session(const std::string& id);
  Reply health();

  // Drops sessions idle longer than the timeout; returns how many.
  std::size_t sweep();
  std::size_t session_count();
  void set_clock(std::function<Clock::time_point()> now) { now_ = std::move(now); }
  const ServeConfig& config() const { return cfg_; }

 private:
  struct Lookup {
    std::shared_ptr<Session> session;
    std::optional<Reply> error;
  };
  Lookup find(const std::string& id);
  void run_step(Session& s);
  nlohmann::json step_json(const Session& s) const;
  void persist_trace(const Session& s) const;
  std::string new_id();

  std::shared_ptr<const netblocks::Sat3dNet> net_;
  ServeConfig cfg_;
  std::string checkpoint_id_;
  std::function<Clock::time_point()> now_ = [] { return Clock::now(); };
  std::mutex mutex_;  // guards the maps below, never held during model calls
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, Clock::time_point> expired_;
  std::map<std::string, Reply> create_replies_;
  std::uint64_t counter_ = 0;
  std::uint64_t salt_;
};

// cpp-httplib front end with CORS. Routes:
//   GET  /health
//   POST /sessions                         -> 201
//   GET  /sessions/{id}
//   DELETE /sessions/{id}
//   POST /sessions/{id}/prompts
//   POST /sessions/{id}/gt
//   GET  /sessions/{id}/slice?axis=x|y|z&index=k&layer=image|mask|confidence
//   GET  /sessions/{id}/layers/{image|mask|confidence}
// Mutating calls honour an Idempotency-Key header.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds to host:port (port 0 picks a free port); returns the bound port.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  bool run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sat3d::serve
