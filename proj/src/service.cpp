#include "bonesound/service.hpp"

#include <algorithm>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "bonesound/error.hpp"

namespace bonesound {

std::optional<std::string> Subscription::next(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mutex_);
  cv_.wait_for(lock, timeout, [&] { return !queue_.empty() || closed_; });
  if (queue_.empty()) return std::nullopt;
  std::string msg = std::move(queue_.front());
  queue_.pop_front();
  return msg;
}

bool Subscription::closed() const {
  std::lock_guard lock(mutex_);
  return closed_;
}

bool Subscription::overflowed() const {
  std::lock_guard lock(mutex_);
  return overflowed_;
}

void Subscription::close() {
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  cv_.notify_all();
}

bool Subscription::offer(std::string message) {
  {
    std::lock_guard lock(mutex_);
    if (closed_) return false;
    if (queue_.size() >= capacity_) {
      overflowed_ = true;
      closed_ = true;
      queue_.clear();
    } else {
      queue_.push_back(std::move(message));
    }
  }
  cv_.notify_all();
  return !overflowed();
}

std::shared_ptr<Subscription> EventHub::subscribe() {
  auto s = std::make_shared<Subscription>(capacity_);
  std::lock_guard lock(mutex_);
  subs_.push_back(s);
  return s;
}

void EventHub::publish(const GestureEvent& event, std::optional<Action> action) {
  const std::string msg = sse_message(event, action);
  std::lock_guard lock(mutex_);
  std::erase_if(subs_, [&](const std::shared_ptr<Subscription>& s) {
    if (s->offer(msg)) return false;
    if (s->overflowed()) ++dropped_;
    return true;
  });
}

void EventHub::close_all() {
  std::lock_guard lock(mutex_);
  for (auto& s : subs_) s->close();
  subs_.clear();
}

std::size_t EventHub::subscribers() const {
  std::lock_guard lock(mutex_);
  return subs_.size();
}

std::uint64_t EventHub::dropped_clients() const {
  std::lock_guard lock(mutex_);
  return dropped_;
}

GestureService::GestureService(ServiceConfig cfg, Hooks hooks)
    : cfg_(std::move(cfg)), hooks_(std::move(hooks)), hub_(cfg_.client_queue) {}

GestureService::~GestureService() { stop(); }

void GestureService::start() {
  server_ = std::make_unique<httplib::Server>();
  auto& srv = *server_;
  const std::size_t workers = cfg_.max_clients + 4;
  srv.new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
  // httplib's default sets SO_REUSEPORT, which lets a second server bind the
  // same port silently. SO_REUSEADDR alone still allows quick restarts.
  srv.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  // A peer that stops reading holds its worker for at most this long.
  srv.set_write_timeout(2, 0);
  started_ = std::chrono::steady_clock::now();

  srv.Get("/health", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });

  srv.Get("/state", [this](const httplib::Request&, httplib::Response& res) {
    const double up = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    nlohmann::ordered_json j{{"model_id", cfg_.model_id},
                             {"epsilon", hooks_.epsilon ? hooks_.epsilon() : 0.0},
                             {"uptime_s", up},
                             {"events_emitted", hooks_.events_emitted ? hooks_.events_emitted() : 0},
                             {"detector_mode", cfg_.detector_mode}};
    res.set_content(j.dump(), "application/json");
  });

  srv.Post("/config", [this](const httplib::Request& req, httplib::Response& res) {
    auto fail = [&](const std::string& why) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", why}}.dump(), "application/json");
    };
    nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) return fail("body must be a JSON object");
    for (const auto& [key, value] : body.items()) {
      if (key != "epsilon") return fail("unknown field " + key);
    }
    if (body.contains("epsilon")) {
      const auto& e = body["epsilon"];
      if (!e.is_number()) return fail("epsilon must be a number");
      if (!hooks_.set_epsilon) return fail("epsilon is not adjustable");
      try {
        hooks_.set_epsilon(e.get<double>());
      } catch (const Error& err) {
        return fail(err.what());
      }
    }
    res.set_content(nlohmann::json{{"epsilon", hooks_.epsilon ? hooks_.epsilon() : 0.0}}.dump(),
                    "application/json");
  });

  srv.Get("/events", [this](const httplib::Request&, httplib::Response& res) {
    if (hub_.subscribers() >= cfg_.max_clients) {
      res.status = 503;
      res.set_content("too many clients", "text/plain");
      return;
    }
    auto sub = hub_.subscribe();
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream",
        [sub](std::size_t, httplib::DataSink& sink) {
          if (auto msg = sub->next(std::chrono::milliseconds(250))) {
            return sink.write(msg->data(), msg->size());
          }
          if (sub->closed()) {
            sink.done();
            return true;
          }
          // SSE comment; lets a dead connection surface as a write failure.
          static constexpr char kKeepAlive[] = ": keepalive\n\n";
          return sink.write(kKeepAlive, sizeof(kKeepAlive) - 1);
        },
        [sub](bool) { sub->close(); });
  });

  if (cfg_.ui_dir) {
    if (!srv.set_mount_point("/ui", cfg_.ui_dir->string())) {
      throw Error(ErrorCode::Io, "ui directory not found: " + cfg_.ui_dir->string());
    }
  }

  if (cfg_.port == 0) {
    port_ = srv.bind_to_any_port(cfg_.host);
    if (port_ <= 0) throw Error(ErrorCode::PortInUse, "could not bind any port on " + cfg_.host);
  } else {
    if (!srv.bind_to_port(cfg_.host, cfg_.port)) {
      throw Error(ErrorCode::PortInUse, "port " + std::to_string(cfg_.port) + " is not available");
    }
    port_ = cfg_.port;
  }
  thread_ = std::thread([&srv] { srv.listen_after_bind(); });
  srv.wait_until_ready();
}

void GestureService::stop() {
  hub_.close_all();
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
  server_.reset();
}

GestureService::Hooks hooks_for(StreamProcessor& processor) {
  return {[&processor] { return processor.epsilon(); },
          [&processor](double e) { processor.set_epsilon(e); },
          [&processor] { return processor.events_emitted(); }};
}

}  // namespace bonesound
