#include "sat3d/serve.hpp"

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <random>

#include "sat3d/metrics.hpp"
#include "sat3d/promptloop.hpp"
#include "sat3d/volgrid/io.hpp"
#include "sat3d/volgrid/preprocess.hpp"

// After Eigen: <resolv.h> defines a _res macro that clashes with Eigen internals.
#include <httplib.h>

namespace sat3d::serve {

static_assert(std::endian::native == std::endian::little, "slab transport assumes a little-endian host");

namespace {

Reply json_reply(int status, const nlohmann::json& j) {
  Reply r;
  r.status = status;
  r.body = j.dump();
  return r;
}

Reply error_reply(int status, const std::string& kind, const std::string& message) {
  return json_reply(status, {{"error", kind}, {"message", message}});
}

int status_for(const Error& e) {
  const std::string k = e.kind();
  if (k == "prompt_bounds" || k == "budget_exceeded") return 422;
  if (k == "checkpoint" || k == "training") return 500;
  return 400;
}

// Runs a handler and maps exceptions to error replies.
template <typename F>
Reply guarded(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    return error_reply(status_for(e), e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_reply(400, "format", e.what());
  } catch (const std::exception& e) {
    return error_reply(500, "internal", e.what());
  }
}

bool is_json(const std::string& content_type) {
  return content_type.find("json") != std::string::npos;
}

Layer parse_layer(const std::string& s) {
  if (s == "image") return Layer::Image;
  if (s == "mask") return Layer::Mask;
  if (s == "confidence") return Layer::Confidence;
  throw ConfigError("unknown layer '" + s + "' (image, mask or confidence)");
}

int parse_axis(const std::string& s) {
  if (s == "x" || s == "0") return 0;
  if (s == "y" || s == "1") return 1;
  if (s == "z" || s == "2") return 2;
  throw ConfigError("unknown axis '" + s + "' (x, y or z)");
}

// Window/level hints from the 1st and 99th percentiles.
nlohmann::json window_hint(const ScalarGrid& g) {
  std::vector<float> v(g.values().data(), g.values().data() + g.size());
  if (v.empty()) return {{"level", 0.0}, {"width", 1.0}};
  auto pick = [&](double q) {
    const auto at = std::size_t(q * double(v.size() - 1));
    std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(at), v.end());
    return double(v[at]);
  };
  const double lo = pick(0.01), hi = pick(0.99);
  return {{"level", (lo + hi) / 2}, {"width", std::max(hi - lo, 1e-6)}};
}

template <typename Scalar>
std::string slab_bytes(const Grid<Scalar>& g, int axis, int index, int& rows, int& cols) {
  const Extent3 e = g.extent();
  const int ra = axis == 0 ? 1 : 0, ca = axis == 2 ? 1 : 2;
  rows = e[ra];
  cols = e[ca];
  std::vector<Scalar> out(std::size_t(rows) * std::size_t(cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      Voxel v{};
      v[axis] = index;
      v[ra] = r;
      v[ca] = c;
      out[std::size_t(r) * std::size_t(cols) + std::size_t(c)] = g.at(v);
    }
  return std::string(reinterpret_cast<const char*>(out.data()), out.size() * sizeof(Scalar));
}

Session::Clock::rep ticks(Session::Clock::time_point t) { return t.time_since_epoch().count(); }

}  // namespace

ServeConfig ServeConfig::from_env(ServeConfig base) {
  if (const char* c = std::getenv("SAT3D_CHECKPOINT"); c && *c) base.checkpoint = c;
  if (const char* p = std::getenv("SAT3D_PORT"); p && *p) {
    char* end = nullptr;
    const long port = std::strtol(p, &end, 10);
    if (*end != '\0' || port < 0 || port > 65535) throw ConfigError(std::string("bad SAT3D_PORT: ") + p);
    base.port = int(port);
  }
  return base;
}

Volume model_input(const Volume& v) {
  if (v.data.channels() != 1) throw ShapeError("expected a single-channel volume");
  try {
    return volgrid::znormalize(v);
  } catch (const DegenerateInputError&) {
    return v;  // nothing above zero: feed the raw intensities
  }
}

Service::Service(std::shared_ptr<const netblocks::Sat3dNet> net, ServeConfig cfg, std::string checkpoint_id)
    : net_(std::move(net)), cfg_(std::move(cfg)), checkpoint_id_(std::move(checkpoint_id)) {
  if (!net_) throw ConfigError("service needs a model");
  if (!(cfg_.confidence_threshold > 0 && cfg_.confidence_threshold < 1))
    throw ConfigError("confidence threshold must lie in (0, 1)");
  if (!(cfg_.idle_timeout_s > 0)) throw ConfigError("idle timeout must be positive");
  salt_ = std::random_device{}();
  salt_ = (salt_ << 32) ^ std::random_device{}();
}

std::string Service::new_id() {
  std::mt19937_64 g(salt_ ^ (++counter_ * 0x9E3779B97F4A7C15ull));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(g()));
  return buf;
}

std::size_t Service::sweep() {
  const auto now = now_();
  const auto limit = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(cfg_.idle_timeout_s));
  std::lock_guard lock(mutex_);
  std::size_t n = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - Clock::time_point(Clock::duration(it->second->last_used.load())) > limit) {
      expired_[it->first] = now;
      it = sessions_.erase(it);
      ++n;
    } else {
      ++it;
    }
  }
  return n;
}

std::size_t Service::session_count() {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

Service::Lookup Service::find(const std::string& id) {
  sweep();
  std::lock_guard lock(mutex_);
  if (expired_.count(id)) return {nullptr, error_reply(410, "gone", "session " + id + " expired")};
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return {nullptr, error_reply(404, "not_found", "no session " + id)};
  it->second->last_used = ticks(now_());
  return {it->second, std::nullopt};
}

void Service::run_step(Session& s) {
  auto rec = promptloop::refine_step(s.model, s.input, s.state, cfg_.max_steps, cfg_.confidence_threshold);
  s.prob = std::move(rec.output.prob);
  s.conf = std::move(rec.output.conf);
  s.pred = std::move(rec.pred);
  if (s.gt) {
    BinaryMask p = s.pred;
    p.spacing = s.gt->spacing;
    s.dice.push_back(metrics::dsc(p, *s.gt));
  }
  persist_trace(s);
}

nlohmann::json Service::step_json(const Session& s) const {
  const std::string base = "/sessions/" + s.id;
  nlohmann::json j = {{"id", s.id},
                      {"step", s.state.step},
                      {"points", s.state.points.size()},
                      {"mask", base + "/layers/mask"},
                      {"confidence", base + "/layers/confidence"},
                      {"foreground", s.pred.count()}};
  if (!s.dice.empty()) j["dice"] = s.dice.back();
  return j;
}

void Service::persist_trace(const Session& s) const {
  if (cfg_.trace_dir.empty()) return;
  std::vector<std::vector<int>> pts;
  for (const auto& p : s.state.points) pts.push_back({p.coord[0], p.coord[1], p.coord[2], p.label});
  nlohmann::json j = {{"id", s.id}, {"checkpoint", s.checkpoint_id}, {"step", s.state.step}, {"points", pts}};
  if (!s.dice.empty()) j["dice"] = s.dice;
  std::filesystem::create_directories(cfg_.trace_dir);
  const auto path = cfg_.trace_dir / (s.id + ".json");
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << j.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

Reply Service::create_session(const std::string& body, const std::string& content_type,
                              const std::string& key) {
  if (!key.empty()) {
    std::lock_guard lock(mutex_);
    if (auto it = create_replies_.find(key); it != create_replies_.end()) return it->second;
  }
  Reply r = guarded([&] {
    auto s = std::make_shared<Session>(*net_, cfg_.overlap);
    if (is_json(content_type)) {
      const auto j = nlohmann::json::parse(body);
      s->volume = volgrid::load_volume(j.at("path").get<std::string>());
      if (j.contains("gt_path")) s->gt = volgrid::load_mask(j.at("gt_path").get<std::string>());
    } else {
      s->volume = volgrid::decode_volume(body);
    }
    s->input = model_input(s->volume);
    if (s->gt && s->gt->extent() != s->volume.extent()) throw ShapeError("ground truth does not match the volume");
    s->state = PromptState(s->volume.extent(), s->volume.spacing);
    s->checkpoint_id = checkpoint_id_;
    s->created = std::chrono::system_clock::now();
    s->last_used = ticks(now_());
    {
      std::lock_guard lock(mutex_);
      s->id = new_id();
    }
    {
      std::lock_guard lock(s->mutex);
      run_step(*s);  // eager unprompted prediction
    }
    {
      std::lock_guard lock(mutex_);
      sessions_[s->id] = s;
    }
    const Extent3 e = s->volume.extent();
    nlohmann::json j = step_json(*s);
    j["shape"] = {e.h, e.w, e.d};
    j["spacing"] = {s->volume.spacing.sx, s->volume.spacing.sy, s->volume.spacing.sz};
    j["checkpoint"] = checkpoint_id_;
    return json_reply(201, j);
  });
  if (!key.empty() && r.status == 201) {
    std::lock_guard lock(mutex_);
    create_replies_.emplace(key, r);
  }
  return r;
}

Reply Service::add_prompt(const std::string& id, const std::string& body, const std::string& key) {
  auto [s, err] = find(id);
  if (err) return *err;
  std::lock_guard lock(s->mutex);
  if (!key.empty())
    if (auto it = s->replies.find(key); it != s->replies.end()) return it->second;
  Reply r = guarded([&] {
    const auto j = nlohmann::json::parse(body);
    const auto& pt = j.at("point");
    if (!pt.is_array() || pt.size() != 3) throw FormatError("point must be [i, j, k]");
    const Voxel v{pt.at(0).get<int>(), pt.at(1).get<int>(), pt.at(2).get<int>()};
    const int label = j.value("label", 1);
    if (label != 0 && label != 1) throw FormatError("label must be 0 or 1");
    if (!s->volume.extent().contains(v)) throw PromptBoundsError("point outside the volume");
    // Only touch the state once the step is known to be admissible.
    if (s->state.step >= cfg_.max_steps) throw BudgetExceededError("session step limit reached");
    s->state.points.push_back({v, label});
    try {
      run_step(*s);
    } catch (...) {
      s->state.points.pop_back();
      throw;
    }
    return json_reply(200, step_json(*s));
  });
  if (!key.empty()) {
    s->replies.emplace(key, r);
    s->reply_order.push_back(key);
    if (s->reply_order.size() > cfg_.idempotency_cache) {
      s->replies.erase(s->reply_order.front());
      s->reply_order.erase(s->reply_order.begin());
    }
  }
  return r;
}

Reply Service::set_ground_truth(const std::string& id, const std::string& body, const std::string& content_type) {
  auto [s, err] = find(id);
  if (err) return *err;
  std::lock_guard lock(s->mutex);
  return guarded([&] {
    BinaryMask gt = is_json(content_type)
                        ? volgrid::load_mask(nlohmann::json::parse(body).at("path").get<std::string>())
                        : volgrid::decode_mask(body);
    if (gt.extent() != s->volume.extent()) throw ShapeError("ground truth does not match the volume");
    s->gt = std::move(gt);
    s->dice.clear();
    BinaryMask p = s->pred;
    p.spacing = s->gt->spacing;
    s->dice.push_back(metrics::dsc(p, *s->gt));
    return json_reply(200, step_json(*s));
  });
}

Reply Service::get_session(const std::string& id) {
  auto [s, err] = find(id);
  if (err) return *err;
  std::lock_guard lock(s->mutex);
  nlohmann::json j = step_json(*s);
  const Extent3 e = s->volume.extent();
  j["shape"] = {e.h, e.w, e.d};
  j["spacing"] = {s->volume.spacing.sx, s->volume.spacing.sy, s->volume.spacing.sz};
  j["checkpoint"] = s->checkpoint_id;
  j["created"] = std::chrono::duration_cast<std::chrono::seconds>(s->created.time_since_epoch()).count();
  std::vector<std::vector<int>> pts;
  for (const auto& p : s->state.points) pts.push_back({p.coord[0], p.coord[1], p.coord[2], p.label});
  j["prompts"] = pts;
  if (!s->dice.empty()) j["dice_history"] = s->dice;
  return json_reply(200, j);
}

Reply Service::get_slice(const std::string& id, const std::string& axis_s, const std::string& index_s,
                         const std::string& layer_s) {
  auto [s, err] = find(id);
  if (err) return *err;
  std::lock_guard lock(s->mutex);
  return guarded([&] {
    const int axis = parse_axis(axis_s);
    const Layer layer = parse_layer(layer_s.empty() ? "image" : layer_s);
    std::size_t used = 0;
    int index = 0;
    try {
      index = std::stoi(index_s, &used);
    } catch (const std::exception&) {
      throw ConfigError("slice index must be an integer");
    }
    if (used != index_s.size()) throw ConfigError("slice index must be an integer");
    const Extent3 e = s->volume.extent();
    if (index < 0 || index >= e[axis]) throw ConfigError("slice index out of range");
    Reply r;
    r.content_type = "application/octet-stream";
    int rows = 0, cols = 0;
    nlohmann::json meta = {{"axis", std::string(1, "xyz"[axis])}, {"index", index}, {"layer", layer_s.empty() ? "image" : layer_s}};
    switch (layer) {
      case Layer::Image:
        r.body = slab_bytes(s->volume.data, axis, index, rows, cols);
        meta["dtype"] = "f32le";
        meta["window"] = window_hint(s->volume.data);
        break;
      case Layer::Mask:
        r.body = slab_bytes(s->pred.data, axis, index, rows, cols);
        meta["dtype"] = "u8";
        meta["window"] = {{"level", 0.5}, {"width", 1.0}};
        break;
      case Layer::Confidence:
        r.body = slab_bytes(s->conf, axis, index, rows, cols);
        meta["dtype"] = "f32le";
        meta["window"] = {{"level", 0.5}, {"width", 1.0}};
        break;
    }
    meta["rows"] = rows;
    meta["cols"] = cols;
    meta["step"] = s->state.step;
    r.headers["X-Slab-Meta"] = meta.dump();
    return r;
  });
}

Reply Service::get_layer(const std::string& id, const std::string& layer_s) {
  auto [s, err] = find(id);
  if (err) return *err;
  std::lock_guard lock(s->mutex);
  return guarded([&] {
    Reply r;
    r.content_type = "application/octet-stream";
    switch (parse_layer(layer_s)) {
      case Layer::Image:
        r.body = volgrid::encode_volume(s->volume);
        break;
      case Layer::Mask:
        r.body = volgrid::encode_mask(s->pred);
        break;
      case Layer::Confidence: {
        Volume c;
        c.data = s->conf;
        c.spacing = s->volume.spacing;
        r.body = volgrid::encode_volume(c);
        break;
      }
    }
    r.headers["X-Step"] = std::to_string(s->state.step);
    return r;
  });
}

Reply Service::delete_session(const std::string& id) {
  std::lock_guard lock(mutex_);
  if (sessions_.erase(id) == 0) {
    if (expired_.count(id)) return error_reply(410, "gone", "session " + id + " expired");
    return error_reply(404, "not_found", "no session " + id);
  }
  expired_[id] = now_();
  return json_reply(200, {{"deleted", id}});
}

Reply Service::health() {
  std::lock_guard lock(mutex_);
  return json_reply(200, {{"status", "ok"},
                          {"checkpoint", checkpoint_id_},
                          {"sessions", sessions_.size()},
                          {"crop", {net_->config().crop.h, net_->config().crop.w, net_->config().crop.d}}});
}

// --- HTTP front end ------------------------------------------------------------

struct HttpServer::Impl {
  Service* service;
  httplib::Server server;
};

namespace {

void send(httplib::Response& res, const Reply& r) {
  res.status = r.status;
  for (const auto& [k, v] : r.headers) res.set_header(k, v);
  res.set_content(r.body, r.content_type);
}

std::string header(const httplib::Request& req, const char* name) {
  return req.has_header(name) ? req.get_header_value(name) : std::string();
}

}  // namespace

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>()) {
  impl_->service = &service;
  auto& svr = impl_->server;
  Service* svc = &service;
  svr.set_default_headers({{"Access-Control-Allow-Origin", service.config().cors_origin},
                           {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type, Idempotency-Key"},
                           {"Access-Control-Expose-Headers", "X-Slab-Meta, X-Step"}});
  svr.set_payload_max_length(std::size_t(2) << 30);
  svr.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  svr.Get("/health", [svc](const httplib::Request&, httplib::Response& res) { send(res, svc->health()); });
  svr.Post("/sessions", [svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->create_session(req.body, header(req, "Content-Type"), header(req, "Idempotency-Key")));
  });
  svr.Get(R"(/sessions/([0-9a-f]+))", [svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->get_session(req.matches[1]));
  });
  svr.Delete(R"(/sessions/([0-9a-f]+))", [svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->delete_session(req.matches[1]));
  });
  svr.Post(R"(/sessions/([0-9a-f]+)/prompts)", [svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->add_prompt(req.matches[1], req.body, header(req, "Idempotency-Key")));
  });
  svr.Post(R"(/sessions/([0-9a-f]+)/gt)", [svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->set_ground_truth(req.matches[1], req.body, header(req, "Content-Type")));
  });
  svr.Get(R"(/sessions/([0-9a-f]+)/slice)", [svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->get_slice(req.matches[1], req.get_param_value("axis"), req.get_param_value("index"),
                             req.get_param_value("layer")));
  });
  svr.Get(R"(/sessions/([0-9a-f]+)/layers/([a-z]+))", [svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->get_layer(req.matches[1], req.matches[2]));
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  if (!impl_->server.bind_to_port(host, port)) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

bool HttpServer::run() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace sat3d::serve
