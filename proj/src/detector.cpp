#include "bonesound/detector.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "bonesound/error.hpp"

namespace bonesound {

void DetectorConfig::validate() const {
  auto fail = [](const char* what) { throw Error(ErrorCode::InvalidArgument, what); };
  if (!(window_s > 0.0 && step_s > 0.0)) fail("window and step must be positive");
  if (!(0.0 <= center_lo_s && center_lo_s < center_hi_s && center_hi_s <= window_s)) {
    fail("need 0 <= center_lo < center_hi <= window");
  }
  if (!(crop_s > 0.0 && crop_s <= window_s)) fail("need 0 < crop <= window");
  if (mode == ThresholdMode::Adaptive && !(k > 0.0)) fail("adaptive multiplier must be positive");
  if (mode == ThresholdMode::Absolute && !(peak_threshold > 0.0 && peak_threshold <= 1.0)) {
    fail("absolute threshold must lie in (0, 1]");
  }
  if (refractory_s < 0.0) fail("refractory must be non-negative");
}

double noise_floor(const Eigen::Ref<const Eigen::VectorXd>& recent, int sample_rate_hz) {
  const auto min_n = static_cast<Eigen::Index>(std::ceil(0.5 * sample_rate_hz));
  if (recent.size() < min_n) {
    throw Error(ErrorCode::InsufficientData, "noise floor needs at least 0.5 s of samples");
  }
  const Eigen::Index n = std::min<Eigen::Index>(recent.size(), 2 * sample_rate_hz);
  std::vector<double> mags(static_cast<std::size_t>(n));
  const auto tail = recent.tail(n);
  for (Eigen::Index i = 0; i < n; ++i) mags[static_cast<std::size_t>(i)] = std::abs(tail[i]);

  const std::size_t mid = mags.size() / 2;
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(mid), mags.end());
  const double upper = mags[mid];
  if (mags.size() % 2 == 1) return upper;
  const double lower = *std::max_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

EventDetector::EventDetector(DetectorConfig cfg, int sample_rate_hz)
    : cfg_(cfg),
      rate_(sample_rate_hz),
      window_n_(static_cast<Eigen::Index>(std::llround(cfg.window_s * sample_rate_hz))) {
  cfg_.validate();
}

void EventDetector::reset() {
  last_trigger_.reset();
  last_peak_.reset();
}

double EventDetector::trigger_level(const Eigen::Ref<const Eigen::VectorXd>& window) const {
  if (cfg_.mode == ThresholdMode::Absolute) return cfg_.peak_threshold;
  return std::max(cfg_.k * noise_floor(window, rate_), cfg_.absolute_floor);
}

std::optional<CandidateSegment> EventDetector::scan(const RingBuffer& buf, double stream_time) {
  if (buf.size() < window_n_) return std::nullopt;
  const Eigen::VectorXd window = buf.last(window_n_);
  return scan(window, stream_time);
}

std::optional<CandidateSegment> EventDetector::scan(const Eigen::Ref<const Eigen::VectorXd>& window,
                                                    double stream_time) {
  if (window.size() < window_n_) return std::nullopt;
  const auto w = window.tail(window_n_);
  if (last_trigger_ && stream_time < *last_trigger_ + cfg_.refractory_s - 1e-9) return std::nullopt;

  const double level = trigger_level(w);
  const double t0 = stream_time - static_cast<double>(window_n_) / rate_;
  const auto lo = static_cast<Eigen::Index>(std::llround(cfg_.center_lo_s * rate_));
  const auto hi = static_cast<Eigen::Index>(std::llround(cfg_.center_hi_s * rate_));

  // A sample only counts if it lies a full refractory period after the
  // previous trigger's peak, so one long burst sliding through the center
  // region cannot fire twice.
  Eigen::Index best = -1;
  double best_amp = level;
  for (Eigen::Index i = lo; i < hi; ++i) {
    const double a = std::abs(w[i]);
    if (a <= best_amp) continue;
    const double t = t0 + static_cast<double>(i) / rate_;
    if (last_peak_ && t < *last_peak_ + cfg_.refractory_s) continue;
    best = i;
    best_amp = a;
  }
  if (best < 0) return std::nullopt;

  const auto crop_n = static_cast<Eigen::Index>(std::llround(cfg_.crop_s * rate_));
  const Eigen::Index crop_start = (window_n_ - crop_n) / 2;

  CandidateSegment seg;
  seg.samples = w.segment(crop_start, crop_n);
  seg.sample_rate_hz = rate_;
  seg.t_start = t0 + static_cast<double>(crop_start) / rate_;
  seg.peak_time = t0 + static_cast<double>(best) / rate_;
  seg.peak_amplitude = best_amp;
  seg.trigger_level = level;

  last_trigger_ = stream_time;
  last_peak_ = seg.peak_time;
  return seg;
}

}  // namespace bonesound
