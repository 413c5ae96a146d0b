#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "bonesound/pipeline.hpp"

namespace httplib {
class Server;
}

namespace bonesound {

/// One client's view of the event stream. Messages are pre-rendered SSE
/// frames. The hub closes a subscription whose queue overflows.
class Subscription {
 public:
  explicit Subscription(std::size_t capacity) : capacity_(capacity) {}

  /// Waits up to `timeout` for the next message. Empty on timeout or once
  /// closed and drained.
  std::optional<std::string> next(std::chrono::milliseconds timeout);
  bool closed() const;
  bool overflowed() const;
  void close();

 private:
  friend class EventHub;
  bool offer(std::string message);  // false on overflow

  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::string> queue_;
  bool closed_ = false;
  bool overflowed_ = false;
};

/// Fan-out of events to any number of subscribers. publish() never blocks
/// on a slow subscriber; it drops that subscriber instead.
class EventHub {
 public:
  explicit EventHub(std::size_t per_client_capacity = 256) : capacity_(per_client_capacity) {}

  std::shared_ptr<Subscription> subscribe();
  void publish(const GestureEvent& event, std::optional<Action> action);
  void close_all();

  std::size_t subscribers() const;
  std::uint64_t dropped_clients() const;

 private:
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::vector<std::shared_ptr<Subscription>> subs_;
  std::uint64_t dropped_ = 0;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8765;  // 0 picks a free port
  std::string model_id;
  std::string detector_mode = "adaptive";
  std::optional<std::filesystem::path> ui_dir;  // served under /ui/
  std::size_t client_queue = 256;
  std::size_t max_clients = 32;
};

/// HTTP front of a running pipeline:
///   GET /events   server-sent events, one `data: {...}` frame per gesture
///   GET /state    {model_id, epsilon, uptime_s, events_emitted, detector_mode}
///   POST /config  {"epsilon": x}; 400 with {"error": ...} when invalid
///   GET /health   200 "ok"
///   GET /ui/...   static files, when ui_dir is set
class GestureService {
 public:
  struct Hooks {
    std::function<double()> epsilon;
    std::function<void(double)> set_epsilon;  // throws Error{InvalidArgument}
    std::function<std::uint64_t()> events_emitted;
  };

  GestureService(ServiceConfig cfg, Hooks hooks);
  ~GestureService();
  GestureService(const GestureService&) = delete;
  GestureService& operator=(const GestureService&) = delete;

  /// Binds and starts serving on a background thread. Throws
  /// Error{PortInUse} when the port cannot be bound.
  void start();
  void stop();
  int port() const { return port_; }

  void publish(const GestureEvent& event, std::optional<Action> action) { hub_.publish(event, action); }
  EventHub& hub() { return hub_; }

 private:
  ServiceConfig cfg_;
  Hooks hooks_;
  EventHub hub_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::chrono::steady_clock::time_point started_;
};

/// Hooks bound to a StreamProcessor. The processor must outlive the service.
GestureService::Hooks hooks_for(StreamProcessor& processor);

}  // namespace bonesound
