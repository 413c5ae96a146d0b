#include "bonesound/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <mutex>
#include <sstream>
#include <thread>

#include "bonesound/error.hpp"

namespace bonesound {

std::string_view action_name(Action a) {
  switch (a) {
    case Action::ZoomIn: return "zoom_in";
    case Action::ZoomOut: return "zoom_out";
    case Action::RotateLeft: return "rotate_left";
    case Action::RotateRight: return "rotate_right";
    case Action::DefaultView: return "default_view";
    case Action::ScrollUp: return "scroll_up";
    case Action::ScrollDown: return "scroll_down";
    case Action::GoBack: return "go_back";
    case Action::Exit: return "exit";
    case Action::Reserved: return "reserved";
  }
  return "reserved";
}

std::string_view context_name(AppContext c) {
  return c == AppContext::WebBrowser ? "web_browser" : "object_viewer";
}

AppContext parse_context(std::string_view name) {
  if (name == "web_browser") return AppContext::WebBrowser;
  if (name == "object_viewer") return AppContext::ObjectViewer;
  throw Error(ErrorCode::InvalidArgument, "unknown application context '" + std::string(name) + "'");
}

ActionMapping ActionMapping::for_context(AppContext context) {
  // pinch, rub_up, rub_down, flick, open_palm
  if (context == AppContext::WebBrowser) {
    return {context, {Action::Reserved, Action::ScrollUp, Action::ScrollDown, Action::GoBack, Action::Exit}};
  }
  return {context, {Action::ZoomIn, Action::RotateRight, Action::RotateLeft, Action::ZoomOut, Action::DefaultView}};
}

Action map_action(Gesture g, const ActionMapping& mapping) { return mapping.map[static_cast<std::size_t>(index_of(g))]; }

Action map_action(const GestureEvent& event, const ActionMapping& mapping) { return map_action(event.gesture, mapping); }

nlohmann::ordered_json event_json(const GestureEvent& e, std::optional<Action> action) {
  nlohmann::ordered_json j;
  j["seq"] = e.seq;
  j["t"] = e.t;
  j["gesture"] = gesture_name(e.gesture);
  j["p"] = e.p;
  j["probs"] = e.probs;
  if (action) j["action"] = action_name(*action);
  return j;
}

std::string sse_message(const GestureEvent& e, std::optional<Action> action) {
  return "data: " + event_json(e, action).dump() + "\n\n";
}

// ---------------------------------------------------------------------------

StreamProcessor::StreamProcessor(const Model& model, PipelineConfig cfg)
    : model_(model),
      cfg_(cfg),
      rate_(cfg.band.sample_rate_hz),
      step_n_(static_cast<Eigen::Index>(std::llround(cfg.detector.step_s * cfg.band.sample_rate_hz))),
      filter_(design_bandpass(cfg.band)),
      state_(filter_),
      extractor_(cfg.mfcc),
      ring_(cfg.band.sample_rate_hz, cfg.detector.window_s),
      detector_(cfg.detector, cfg.band.sample_rate_hz),
      epsilon_(cfg.nms.epsilon) {
  cfg_.nms.validate();
  if (cfg.mfcc.sample_rate_hz != rate_) throw Error(ErrorCode::RateMismatch, "filter and feature rates differ");
  if (std::abs(cfg.detector.crop_s - 1.0) > 1e-9) {
    throw Error(ErrorCode::InvalidArgument, "the classifier needs 1 s candidate crops");
  }
  scratch_.resize(static_cast<std::size_t>(step_n_));
}

void StreamProcessor::set_epsilon(double epsilon) {
  if (!(epsilon >= cfg_.nms.secondary_epsilon && epsilon <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "epsilon must lie in [" + std::to_string(cfg_.nms.secondary_epsilon) + ", 1]");
  }
  epsilon_.store(epsilon);
}

std::vector<GestureEvent> StreamProcessor::push(std::span<const double> samples) {
  std::vector<GestureEvent> out;
  pending_.insert(pending_.end(), samples.begin(), samples.end());
  std::size_t used = 0;
  const auto step = static_cast<std::size_t>(step_n_);
  while (pending_.size() - used >= step) {
    state_.process(std::span<const double>(pending_.data() + used, step), scratch_);
    ring_.push(scratch_);
    processed_ += step;
    used += step;
    tick(out);
  }
  pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(used));
  return out;
}

void StreamProcessor::tick(std::vector<GestureEvent>& out) {
  const double now = stream_time();
  auto cand = detector_.scan(ring_, now);
  if (!cand) return;

  const auto frames = segment_windows(cand->samples, extractor_);
  std::vector<Eigen::MatrixXd> inputs;
  inputs.reserve(frames.size());
  for (const auto& f : frames) inputs.push_back(f.values);
  const auto preds = predict_batch(model_, std::span<const Eigen::MatrixXd>(inputs));
  inferences_ += preds.size();

  TriggerRecord rec{now, cand->peak_time, 0.0, 0};
  for (const auto& p : preds) rec.max_prob = std::max(rec.max_prob, p.max_prob);

  const auto det = window_detections(preds, cand->t_start, cfg_.mfcc.window_s, kSegmentStep_s);
  const double window = cfg_.nms.suppression_window_s;
  for (const Detection& d : nms(std::span<const Detection>(det), epsilon_.load(), window)) {
    if (last_event_t_ && d.t - *last_event_t_ <= window) continue;
    last_event_t_ = d.t;
    out.push_back({++seq_, d.t, d.gesture, d.p, d.probs});
    ++rec.events;
  }
  trigger_log_.push_back(rec);
}

// ---------------------------------------------------------------------------

ReplaySource::ReplaySource(const AudioClip& clip, bool realtime) : clip_(to_canonical(clip)), realtime_(realtime) {}

std::size_t ReplaySource::read(std::span<double> out) {
  const auto n = std::min<Eigen::Index>(static_cast<Eigen::Index>(out.size()), clip_.size() - pos_);
  if (n <= 0) return 0;
  if (realtime_) {
    const auto now = std::chrono::steady_clock::now();
    if (!start_) start_ = now;
    const auto due = *start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                   std::chrono::duration<double>(static_cast<double>(pos_ + n) / clip_.sample_rate_hz));
    std::this_thread::sleep_until(due);
  }
  std::copy_n(clip_.samples.data() + pos_, n, out.begin());
  pos_ += n;
  return static_cast<std::size_t>(n);
}

PcmStreamSource::PcmStreamSource(std::istream& in, int sample_rate_hz) : in_(&in), rate_(sample_rate_hz) {
  if (sample_rate_hz <= 0) throw Error(ErrorCode::InvalidArgument, "sample rate must be positive");
}

std::size_t PcmStreamSource::read(std::span<double> out) {
  if (out.empty()) return 0;
  const double ratio = static_cast<double>(rate_) / kCanonicalRate;  // input samples per output sample
  const auto want = static_cast<std::size_t>(std::ceil(static_cast<double>(out.size()) * ratio)) + 1;
  std::vector<char> bytes(want * 2);
  in_->read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in_->bad()) throw Error(ErrorCode::SourceLost, "audio input stream failed");
  const auto got = static_cast<std::size_t>(in_->gcount()) / 2;
  for (std::size_t i = 0; i < got; ++i) {
    const auto lo = static_cast<unsigned char>(bytes[2 * i]);
    const auto hi = static_cast<unsigned char>(bytes[2 * i + 1]);
    raw_.push_back(static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8))) / 32768.0);
  }
  std::size_t n = 0;
  if (rate_ == kCanonicalRate) {
    n = std::min(out.size(), raw_.size());
    std::copy_n(raw_.begin(), n, out.begin());
    raw_.erase(raw_.begin(), raw_.begin() + static_cast<std::ptrdiff_t>(n));
    return n;
  }
  // Streaming linear interpolation; phase_ is the position of the next
  // output sample relative to raw_[0], prev_ the sample before raw_[0].
  while (n < out.size()) {
    const auto i = static_cast<std::size_t>(std::floor(phase_));
    if (i + 1 >= raw_.size()) break;
    const double frac = phase_ - static_cast<double>(i);
    out[n++] = raw_[i] + frac * (raw_[i + 1] - raw_[i]);
    phase_ += ratio;
  }
  const auto drop = std::min(static_cast<std::size_t>(std::floor(phase_)), raw_.size());
  raw_.erase(raw_.begin(), raw_.begin() + static_cast<std::ptrdiff_t>(drop));
  phase_ -= static_cast<double>(drop);
  return n;
}

namespace {

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(T v) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return q_.size() < capacity_; });
    q_.push_back(std::move(v));
    not_empty_.notify_one();
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !q_.empty() || closed_; });
    if (q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    not_full_.notify_one();
    return v;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<T> q_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
};

}  // namespace

RunStats run_stream(AudioSource& source, StreamProcessor& processor,
                    const std::function<void(const GestureEvent&)>& on_event, const RunOptions& opts) {
  const auto chunk = static_cast<std::size_t>(std::llround(opts.chunk_s * kCanonicalRate));
  if (chunk == 0) throw Error(ErrorCode::InvalidArgument, "chunk must hold at least one sample");
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t events_before = processor.events_emitted();

  BoundedQueue<std::vector<double>> queue(std::max<std::size_t>(opts.queue_capacity, 1));
  std::exception_ptr reader_error;
  std::thread reader([&] {
    try {
      std::vector<double> buf(chunk);
      while (!(opts.stop && opts.stop->load())) {
        const std::size_t n = source.read(buf);
        if (n == 0) break;
        queue.push(std::vector<double>(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n)));
      }
    } catch (...) {
      reader_error = std::current_exception();
    }
    queue.close();
  });

  std::exception_ptr worker_error;
  try {
    while (auto block = queue.pop()) {
      for (const GestureEvent& e : processor.push(*block)) {
        if (on_event) on_event(e);
      }
    }
  } catch (...) {
    worker_error = std::current_exception();
    // Drain so the reader can finish.
    while (queue.pop()) {
    }
  }
  reader.join();
  if (worker_error) std::rethrow_exception(worker_error);
  if (reader_error) std::rethrow_exception(reader_error);

  RunStats s;
  s.stream_s = processor.stream_time();
  s.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  s.events = processor.events_emitted() - events_before;
  s.triggers = processor.triggers();
  s.inferences = processor.inferences();
  return s;
}

// ---------------------------------------------------------------------------

FalseAlarmProfile false_alarm_profile(const Model& model, const AudioClip& stream, const PipelineConfig& cfg) {
  StreamProcessor proc(model, cfg);
  const AudioClip clip = to_canonical(stream);
  proc.push(std::span<const double>(clip.samples.data(), static_cast<std::size_t>(clip.size())));

  FalseAlarmProfile f;
  f.duration_s = clip.duration_s();
  f.triggers = proc.triggers();
  f.inferences = proc.inferences();
  for (const auto& t : proc.trigger_log()) {
    f.max_probs.push_back(t.max_prob);
    ++f.histogram[std::min<std::size_t>(9, static_cast<std::size_t>(t.max_prob * 10.0))];
    if (t.max_prob >= cfg.nms.epsilon) ++f.above_epsilon;
    if (t.max_prob >= cfg.nms.secondary_epsilon) ++f.above_secondary;
  }
  const double hours = f.duration_s / 3600.0;
  if (hours > 0) {
    f.per_hour_epsilon = static_cast<double>(f.above_epsilon) / hours;
    f.per_hour_secondary = static_cast<double>(f.above_secondary) / hours;
  }
  return f;
}

std::string format_profile(const FalseAlarmProfile& f, const NmsConfig& nms) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "stream %.1f s, %llu triggers, %llu window inferences\n", f.duration_s,
                static_cast<unsigned long long>(f.triggers), static_cast<unsigned long long>(f.inferences));
  os << line;
  for (std::size_t k = 0; k < f.histogram.size(); ++k) {
    std::snprintf(line, sizeof line, "  [%.1f, %.1f%c %llu\n", 0.1 * static_cast<double>(k),
                  0.1 * static_cast<double>(k + 1), k + 1 == f.histogram.size() ? ']' : ')',
                  static_cast<unsigned long long>(f.histogram[k]));
    os << line;
  }
  std::snprintf(line, sizeof line, "false alarms at %.2f: %llu (%.1f per hour)\n", nms.epsilon,
                static_cast<unsigned long long>(f.above_epsilon), f.per_hour_epsilon);
  os << line;
  std::snprintf(line, sizeof line, "false alarms at %.2f: %llu (%.1f per hour)\n", nms.secondary_epsilon,
                static_cast<unsigned long long>(f.above_secondary), f.per_hour_secondary);
  os << line;
  return os.str();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace bonesound
