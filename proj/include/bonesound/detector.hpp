#pragma once

#include <Eigen/Core>

#include <optional>

#include "bonesound/audio.hpp"

namespace bonesound {

enum class ThresholdMode { Adaptive, Absolute };

struct DetectorConfig {
  double window_s = 2.0;
  double step_s = 0.1;
  double center_lo_s = 0.5;
  double center_hi_s = 1.0;
  double crop_s = 1.0;
  ThresholdMode mode = ThresholdMode::Adaptive;
  double k = 6.0;                 // adaptive multiplier on the noise floor
  double peak_threshold = 0.05;   // absolute mode level
  double absolute_floor = 0.01;   // lower bound on the adaptive level
  double refractory_s = 0.5;

  /// Throws Error{InvalidArgument} when an invariant is violated.
  void validate() const;
};

/// The 1 s crop handed to the classifier once the gate fires.
struct CandidateSegment {
  Eigen::VectorXd samples;
  int sample_rate_hz = kCanonicalRate;
  double t_start = 0.0;        // stream time of samples[0]
  double peak_time = 0.0;      // stream time of the triggering peak
  double peak_amplitude = 0.0;
  double trigger_level = 0.0;
};

/// Median absolute amplitude over the most recent 2 s of `recent`.
/// Throws Error{InsufficientData} for fewer than 0.5 s of samples.
double noise_floor(const Eigen::Ref<const Eigen::VectorXd>& recent,
                   int sample_rate_hz = kCanonicalRate);

/// Stage-1 amplitude gate. Owns its trigger history; feed it one window per
/// step, in stream order.
class EventDetector {
 public:
  explicit EventDetector(DetectorConfig cfg = {}, int sample_rate_hz = kCanonicalRate);

  /// `stream_time` is the time just past the newest sample in the buffer.
  /// Returns nothing until the buffer holds a full window.
  std::optional<CandidateSegment> scan(const RingBuffer& buf, double stream_time);
  std::optional<CandidateSegment> scan(const Eigen::Ref<const Eigen::VectorXd>& window,
                                       double stream_time);

  double trigger_level(const Eigen::Ref<const Eigen::VectorXd>& window) const;
  const DetectorConfig& config() const { return cfg_; }
  Eigen::Index window_samples() const { return window_n_; }
  void reset();

 private:
  DetectorConfig cfg_;
  int rate_;
  Eigen::Index window_n_;
  std::optional<double> last_trigger_;
  std::optional<double> last_peak_;
};

}  // namespace bonesound
