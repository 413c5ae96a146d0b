#pragma once

#include <array>
#include <complex>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bonesound/audio.hpp"

namespace bonesound {

/// One second-order section, normalized so a0 == 1:
///   H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0, a1 = 0.0, a2 = 0.0;

  bool stable() const { return std::abs(a2) < 1.0 && std::abs(a1) < 1.0 + a2; }
  std::complex<double> response(double omega) const;
};

struct BandpassDesign {
  double low_hz = 10.0;
  double high_hz = 500.0;
  int prototype_order = 4;
  int sample_rate_hz = kCanonicalRate;
};

struct BiquadCascade {
  std::vector<Biquad> sections;
  BandpassDesign meta;

  /// Complex response at frequency_hz, evaluated on the unit circle.
  std::complex<double> response(double frequency_hz) const;
  double gain(double frequency_hz) const { return std::abs(response(frequency_hz)); }
};

/// Butterworth band-pass: analog low-pass prototype of the given (even)
/// order, low-pass to band-pass transform, then bilinear transform with
/// pre-warped edges. Each section is scaled to unit gain at the digital
/// center frequency, so the cascade has unit gain there.
BiquadCascade design_bandpass(double low_hz, double high_hz, int prototype_order,
                              int sample_rate_hz);
inline BiquadCascade design_bandpass(const BandpassDesign& d) {
  return design_bandpass(d.low_hz, d.high_hz, d.prototype_order, d.sample_rate_hz);
}

/// Per-stream direct-form-II-transposed state. Not shareable between
/// streams; the cascade itself is.
class FilterState {
 public:
  explicit FilterState(const BiquadCascade& filter);

  double process(double x);
  void process(std::span<const double> in, std::span<double> out);
  void reset();

  const BiquadCascade& filter() const { return *filter_; }

 private:
  const BiquadCascade* filter_;
  std::vector<std::array<double, 2>> state_;
};

/// Causal filtering from zero initial state. Throws Error{RateMismatch}.
AudioClip apply(const BiquadCascade& filter, const AudioClip& clip);

nlohmann::json to_json(const BiquadCascade& filter);
BiquadCascade cascade_from_json(const nlohmann::json& j);

}  // namespace bonesound
