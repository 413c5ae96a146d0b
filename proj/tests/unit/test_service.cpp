#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <fstream>
#include <limits>
#include <thread>

#include <nlohmann/json.hpp>

#include "bonesound/error.hpp"
#include "bonesound/service.hpp"
#include "support/temp_dir.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a _res macro that
// clashes with Eigen parameter names.
#include <httplib.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

using namespace bonesound;
using namespace std::chrono_literals;
using bonesound::testing_support::TempDir;

namespace {

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Io;
}

GestureEvent event(std::uint64_t seq) {
  return {seq, 0.5 * static_cast<double>(seq), gesture_at(static_cast<int>(seq % 5)), 0.9,
          {0.9, 0.025, 0.025, 0.025, 0.025}};
}

// Settable epsilon behind the service hooks, validated like the pipeline.
struct FakePipeline {
  std::atomic<double> eps = 0.7;
  std::atomic<std::uint64_t> emitted = 0;
  GestureService::Hooks hooks() {
    return {[this] { return eps.load(); },
            [this](double e) {
              if (!(e >= 0.6 && e <= 1.0)) throw Error(ErrorCode::InvalidArgument, "epsilon out of range");
              eps = e;
            },
            [this] { return emitted.load(); }};
  }
};

ServiceConfig any_port() {
  ServiceConfig c;
  c.port = 0;
  c.model_id = "model-x";
  return c;
}

// Reads SSE frames from /events until `want` data frames arrived or the
// stream ends; returns the parsed payloads.
struct SseReader {
  std::vector<nlohmann::json> frames;
  std::string buffer;
  std::atomic<std::size_t> received = 0;

  void run(int port, std::size_t want, std::chrono::milliseconds per_frame_delay = 0ms) {
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(10, 0);
    cli.Get("/events", [&](const char* data, std::size_t len) {
      buffer.append(data, len);
      for (std::size_t end; (end = buffer.find("\n\n")) != std::string::npos;) {
        const std::string frame = buffer.substr(0, end);
        buffer.erase(0, end + 2);
        if (frame.rfind("data: ", 0) == 0) {
          frames.push_back(nlohmann::json::parse(frame.substr(6)));
          received = frames.size();
          if (per_frame_delay.count()) std::this_thread::sleep_for(per_frame_delay);
        }
      }
      return frames.size() < want;
    });
  }
};

bool wait_for(const std::function<bool()>& cond, std::chrono::milliseconds limit = 5000ms) {
  const auto end = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < end) {
    if (cond()) return true;
    std::this_thread::sleep_for(5ms);
  }
  return cond();
}

}  // namespace

TEST(EventHub, FanOutInOrder) {
  EventHub hub(64);
  auto a = hub.subscribe();
  auto b = hub.subscribe();
  for (std::uint64_t s = 1; s <= 20; ++s) hub.publish(event(s), Action::ZoomIn);
  for (auto& sub : {a, b}) {
    for (std::uint64_t s = 1; s <= 20; ++s) {
      const auto msg = sub->next(0ms);
      ASSERT_TRUE(msg);
      EXPECT_EQ(*msg, sse_message(event(s), Action::ZoomIn));
    }
    EXPECT_FALSE(sub->next(0ms));
  }
  EXPECT_EQ(hub.subscribers(), 2u);
}

TEST(EventHub, OverflowDropsOnlyThatSubscriber) {
  EventHub hub(4);
  auto slow = hub.subscribe();
  auto fast = hub.subscribe();
  for (std::uint64_t s = 1; s <= 10; ++s) {
    hub.publish(event(s), std::nullopt);
    ASSERT_TRUE(fast->next(0ms));
  }
  EXPECT_TRUE(slow->overflowed());
  EXPECT_TRUE(slow->closed());
  EXPECT_FALSE(slow->next(0ms));
  EXPECT_FALSE(fast->closed());
  EXPECT_EQ(hub.subscribers(), 1u);
  EXPECT_EQ(hub.dropped_clients(), 1u);
}

TEST(EventHub, CloseAllWakesWaiters) {
  EventHub hub;
  auto sub = hub.subscribe();
  std::thread closer([&] {
    std::this_thread::sleep_for(50ms);
    hub.close_all();
  });
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_FALSE(sub->next(5000ms));
  EXPECT_LT(std::chrono::steady_clock::now() - t0, 2000ms);
  closer.join();
  EXPECT_TRUE(sub->closed());
  EXPECT_FALSE(sub->overflowed());
  EXPECT_EQ(hub.subscribers(), 0u);
}

TEST(Service, HealthAndState) {
  FakePipeline fp;
  fp.emitted = 42;
  ServiceConfig cfg = any_port();
  cfg.detector_mode = "absolute";
  GestureService svc(cfg, fp.hooks());
  svc.start();
  httplib::Client cli("127.0.0.1", svc.port());
  auto h = cli.Get("/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(h->body, "ok");

  auto s = cli.Get("/state");
  ASSERT_TRUE(s);
  EXPECT_EQ(s->status, 200);
  const auto j = nlohmann::ordered_json::parse(s->body);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"model_id", "epsilon", "uptime_s", "events_emitted", "detector_mode"}));
  EXPECT_EQ(j["model_id"], "model-x");
  EXPECT_EQ(j["epsilon"], 0.7);
  EXPECT_GE(j["uptime_s"].get<double>(), 0.0);
  EXPECT_EQ(j["events_emitted"], 42);
  EXPECT_EQ(j["detector_mode"], "absolute");
  svc.stop();
}

TEST(Service, ConfigValidation) {
  FakePipeline fp;
  GestureService svc(any_port(), fp.hooks());
  svc.start();
  httplib::Client cli("127.0.0.1", svc.port());
  auto post = [&](const std::string& body) { return cli.Post("/config", body, "application/json"); };

  auto ok = post(R"({"epsilon":0.6})");
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->status, 200);
  EXPECT_EQ(nlohmann::json::parse(ok->body)["epsilon"], 0.6);
  EXPECT_EQ(fp.eps.load(), 0.6);

  for (const char* bad : {R"({"epsilon":1.5})", R"({"epsilon":"high"})", R"({"gain":2})", "[0.6]", "not json", ""}) {
    auto r = post(bad);
    ASSERT_TRUE(r) << bad;
    EXPECT_EQ(r->status, 400) << bad;
    const auto j = nlohmann::json::parse(r->body, nullptr, false);
    ASSERT_TRUE(j.is_object()) << bad;
    EXPECT_TRUE(j.contains("error")) << bad;
  }
  EXPECT_EQ(fp.eps.load(), 0.6);

  auto empty = post("{}");
  ASSERT_TRUE(empty);
  EXPECT_EQ(empty->status, 200);
}

TEST(Service, ConfigReachesStreamProcessor) {
  StreamProcessor proc{Model{}};
  GestureService svc(any_port(), hooks_for(proc));
  svc.start();
  httplib::Client cli("127.0.0.1", svc.port());
  auto r = cli.Post("/config", R"({"epsilon":0.65})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(proc.epsilon(), 0.65);
  auto bad = cli.Post("/config", R"({"epsilon":0.1})", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(proc.epsilon(), 0.65);
}

TEST(Service, MidStreamClientSeesOnlyLaterEvents) {
  FakePipeline fp;
  GestureService svc(any_port(), fp.hooks());
  svc.start();
  for (std::uint64_t s = 1; s <= 3; ++s) svc.publish(event(s), Action::ZoomIn);

  SseReader reader;
  std::thread t([&] { reader.run(svc.port(), 3); });
  ASSERT_TRUE(wait_for([&] { return svc.hub().subscribers() == 1; }));
  for (std::uint64_t s = 4; s <= 6; ++s) svc.publish(event(s), Action::ZoomIn);
  t.join();
  ASSERT_EQ(reader.frames.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(reader.frames[i]["seq"], 4 + i);
    EXPECT_EQ(reader.frames[i]["action"], "zoom_in");
  }
}

TEST(Service, SixteenClientsReceiveEveryEventOnceInOrder) {
  FakePipeline fp;
  GestureService svc(any_port(), fp.hooks());
  svc.start();
  constexpr int kClients = 16;
  constexpr std::uint64_t kEvents = 200;
  std::vector<SseReader> readers(kClients);
  std::vector<std::thread> threads;
  for (auto& r : readers) threads.emplace_back([&] { r.run(svc.port(), kEvents); });
  ASSERT_TRUE(wait_for([&] { return svc.hub().subscribers() == kClients; }));
  for (std::uint64_t s = 1; s <= kEvents; ++s) {
    svc.publish(event(s), std::nullopt);
    if (s % 20 == 0) std::this_thread::sleep_for(2ms);
  }
  for (auto& t : threads) t.join();
  for (const auto& r : readers) {
    ASSERT_EQ(r.frames.size(), kEvents);
    for (std::uint64_t s = 1; s <= kEvents; ++s) EXPECT_EQ(r.frames[s - 1]["seq"], s);
  }
  EXPECT_EQ(svc.hub().dropped_clients(), 0u);
}

TEST(Service, SlowClientIsDroppedWithoutStallingOthers) {
  FakePipeline fp;
  ServiceConfig cfg = any_port();
  cfg.client_queue = 64;
  GestureService svc(cfg, fp.hooks());
  svc.start();

  // A peer that subscribes and then never reads, with a tiny receive buffer
  // so the server's socket backs up quickly.
  const int stuck = ::socket(AF_INET, SOCK_STREAM, 0);
  ASSERT_GE(stuck, 0);
  int small = 4096;
  ::setsockopt(stuck, SOL_SOCKET, SO_RCVBUF, &small, sizeof(small));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(svc.port()));
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ASSERT_EQ(::connect(stuck, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)), 0);
  const std::string req = "GET /events HTTP/1.1\r\nHost: 127.0.0.1\r\n\r\n";
  ASSERT_EQ(::send(stuck, req.data(), req.size(), 0), static_cast<ssize_t>(req.size()));

  SseReader fast;
  std::thread tf([&] { fast.run(svc.port(), std::numeric_limits<std::size_t>::max()); });
  ASSERT_TRUE(wait_for([&] { return svc.hub().subscribers() == 2; }));

  const auto t0 = std::chrono::steady_clock::now();
  std::uint64_t published = 0;
  while (svc.hub().dropped_clients() == 0 && published < 200000) {
    svc.publish(event(++published), std::nullopt);
    if (published % 16 == 0) std::this_thread::sleep_for(1ms);
  }
  for (int k = 0; k < 50; ++k) svc.publish(event(++published), std::nullopt);
  const auto elapsed = std::chrono::steady_clock::now() - t0;
  EXPECT_EQ(svc.hub().dropped_clients(), 1u);
  EXPECT_EQ(svc.hub().subscribers(), 1u);
  EXPECT_LT(elapsed, 30000ms);

  EXPECT_TRUE(wait_for([&] { return fast.received.load() == published; }));
  svc.stop();
  tf.join();
  ::close(stuck);
  ASSERT_EQ(fast.frames.size(), published);
  for (std::uint64_t s = 1; s <= published; ++s) ASSERT_EQ(fast.frames[s - 1]["seq"], s);
}

TEST(Service, ClientLimit) {
  FakePipeline fp;
  ServiceConfig cfg = any_port();
  cfg.max_clients = 1;
  GestureService svc(cfg, fp.hooks());
  svc.start();
  SseReader first;
  std::thread t([&] { first.run(svc.port(), 1); });
  ASSERT_TRUE(wait_for([&] { return svc.hub().subscribers() == 1; }));
  httplib::Client cli("127.0.0.1", svc.port());
  auto r = cli.Get("/events");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 503);
  svc.publish(event(1), std::nullopt);
  t.join();
  EXPECT_EQ(first.frames.size(), 1u);
}

TEST(Service, PortInUse) {
  FakePipeline fp;
  GestureService a(any_port(), fp.hooks());
  a.start();
  ServiceConfig cfg;
  cfg.port = a.port();
  GestureService b(cfg, fp.hooks());
  EXPECT_EQ(code_of([&] { b.start(); }), ErrorCode::PortInUse);
}

TEST(Service, StaticUi) {
  TempDir dir;
  std::ofstream(dir.path() / "index.html") << "<html>viewer</html>";
  FakePipeline fp;
  ServiceConfig cfg = any_port();
  cfg.ui_dir = dir.path();
  GestureService svc(cfg, fp.hooks());
  svc.start();
  httplib::Client cli("127.0.0.1", svc.port());
  auto r = cli.Get("/ui/index.html");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->body, "<html>viewer</html>");
  auto missing = cli.Get("/ui/none.js");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);

  ServiceConfig bad = any_port();
  bad.ui_dir = dir.path() / "absent";
  GestureService svc2(bad, fp.hooks());
  EXPECT_EQ(code_of([&] { svc2.start(); }), ErrorCode::Io);
}

TEST(Service, StopIsIdempotentAndEndsStreams) {
  FakePipeline fp;
  GestureService svc(any_port(), fp.hooks());
  svc.start();
  SseReader r;
  std::thread t([&] { r.run(svc.port(), 10); });
  ASSERT_TRUE(wait_for([&] { return svc.hub().subscribers() == 1; }));
  const auto t0 = std::chrono::steady_clock::now();
  svc.stop();
  t.join();
  EXPECT_LT(std::chrono::steady_clock::now() - t0, 3000ms);
  EXPECT_TRUE(r.frames.empty());
  svc.stop();
}
