#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <istream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bonesound/detector.hpp"
#include "bonesound/eval.hpp"
#include "bonesound/features.hpp"
#include "bonesound/filter.hpp"
#include "bonesound/model.hpp"

namespace bonesound {

struct GestureEvent {
  std::uint64_t seq = 0;
  double t = 0;  // stream seconds
  Gesture gesture = Gesture::Pinch;
  double p = 0;
  std::array<double, kNumGestures> probs{};
};

// ---------------------------------------------------------------------------
// Actions

enum class Action { ZoomIn, ZoomOut, RotateLeft, RotateRight, DefaultView, ScrollUp, ScrollDown, GoBack, Exit, Reserved };
enum class AppContext { WebBrowser, ObjectViewer };

std::string_view action_name(Action a);
std::string_view context_name(AppContext c);
AppContext parse_context(std::string_view name);

struct ActionMapping {
  AppContext context = AppContext::ObjectViewer;
  std::array<Action, kNumGestures> map{};

  static ActionMapping for_context(AppContext context);
};

Action map_action(Gesture g, const ActionMapping& mapping);
Action map_action(const GestureEvent& event, const ActionMapping& mapping);

/// {"seq","t","gesture","p","probs"[,"action"]} in that key order.
nlohmann::ordered_json event_json(const GestureEvent& event, std::optional<Action> action = std::nullopt);
/// One server-sent-events message: "data: <json>\n\n".
std::string sse_message(const GestureEvent& event, std::optional<Action> action);

// ---------------------------------------------------------------------------
// Two-stage stream processing

struct PipelineConfig {
  DetectorConfig detector{};
  NmsConfig nms{};
  BandpassDesign band{};
  MfccConfig mfcc{};
};

struct TriggerRecord {
  double stream_time = 0;  // when stage 1 fired
  double peak_time = 0;
  double max_prob = 0;     // best window probability of the candidate
  int events = 0;          // events emitted for it
};

/// Filter -> ring buffer -> detector -> 11 windows -> model -> NMS. Feed raw
/// canonical-rate samples in any chunking; work happens on every full
/// detector step. Not thread-safe except for set_epsilon/epsilon.
class StreamProcessor {
 public:
  StreamProcessor(const Model& model, PipelineConfig cfg = {});

  std::vector<GestureEvent> push(std::span<const double> samples);

  void set_epsilon(double epsilon);  // throws Error{InvalidArgument}
  double epsilon() const { return epsilon_.load(); }
  const PipelineConfig& config() const { return cfg_; }

  /// Time just past the newest processed sample.
  double stream_time() const { return static_cast<double>(processed_) / rate_; }
  std::uint64_t triggers() const { return trigger_log_.size(); }
  std::uint64_t inferences() const { return inferences_; }
  std::uint64_t events_emitted() const { return seq_.load(); }
  const std::vector<TriggerRecord>& trigger_log() const { return trigger_log_; }

 private:
  void tick(std::vector<GestureEvent>& out);

  Model model_;
  PipelineConfig cfg_;
  int rate_;
  Eigen::Index step_n_;
  BiquadCascade filter_;
  FilterState state_;
  MfccExtractor extractor_;
  RingBuffer ring_;
  EventDetector detector_;
  std::atomic<double> epsilon_;
  std::vector<double> pending_;
  std::vector<double> scratch_;
  std::uint64_t processed_ = 0;
  std::uint64_t inferences_ = 0;
  std::atomic<std::uint64_t> seq_ = 0;
  std::optional<double> last_event_t_;
  std::vector<TriggerRecord> trigger_log_;
};

// ---------------------------------------------------------------------------
// Sources

class AudioSource {
 public:
  virtual ~AudioSource() = default;
  /// Fills up to out.size() canonical-rate samples; 0 means end of stream.
  /// Throws Error{SourceLost} when the device or pipe fails.
  virtual std::size_t read(std::span<double> out) = 0;
};

class ReplaySource final : public AudioSource {
 public:
  /// realtime: pace reads to the wall clock instead of running flat out.
  explicit ReplaySource(const AudioClip& clip, bool realtime = false);
  std::size_t read(std::span<double> out) override;

 private:
  AudioClip clip_;
  Eigen::Index pos_ = 0;
  bool realtime_;
  std::optional<std::chrono::steady_clock::time_point> start_;
};

/// Signed 16-bit little-endian mono PCM from a byte stream (for example a
/// recorder piping into stdin), resampled to the canonical rate.
class PcmStreamSource final : public AudioSource {
 public:
  PcmStreamSource(std::istream& in, int sample_rate_hz = kCanonicalRate);
  std::size_t read(std::span<double> out) override;

 private:
  std::istream* in_;
  int rate_;
  double phase_ = 0;
  std::optional<double> prev_;
  std::vector<double> raw_;
};

struct RunOptions {
  double chunk_s = 0.1;
  std::size_t queue_capacity = 64;
  const std::atomic<bool>* stop = nullptr;
};

struct RunStats {
  double stream_s = 0;
  double wall_s = 0;
  std::uint64_t events = 0;
  std::uint64_t triggers = 0;
  std::uint64_t inferences = 0;
};

/// Reader thread -> bounded queue -> processor on the calling thread; each
/// event goes to `on_event` in stream order.
RunStats run_stream(AudioSource& source, StreamProcessor& processor,
                    const std::function<void(const GestureEvent&)>& on_event, const RunOptions& opts = {});

// ---------------------------------------------------------------------------
// False alarms

struct FalseAlarmProfile {
  double duration_s = 0;
  std::uint64_t triggers = 0;
  std::uint64_t inferences = 0;
  std::vector<double> max_probs;        // one per stage-1 trigger
  std::array<std::uint64_t, 10> histogram{};  // max_probs in [0.1k, 0.1(k+1))
  std::uint64_t above_epsilon = 0;
  std::uint64_t above_secondary = 0;
  double per_hour_epsilon = 0;
  double per_hour_secondary = 0;
};

/// Runs the full pipeline over a gesture-free stream and records every
/// trigger's best window probability.
FalseAlarmProfile false_alarm_profile(const Model& model, const AudioClip& stream, const PipelineConfig& cfg = {});
std::string format_profile(const FalseAlarmProfile& profile, const NmsConfig& nms);

double median(std::vector<double> values);

}  // namespace bonesound
