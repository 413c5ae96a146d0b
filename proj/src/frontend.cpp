#include "bonesound/frontend.hpp"

#include <cmath>
#include <random>

#include "bonesound/error.hpp"

namespace bonesound {

Frontend::Frontend(const BandpassDesign& band, const MfccConfig& mfcc)
    : filter(design_bandpass(band)), extractor(mfcc) {
  if (band.sample_rate_hz != mfcc.sample_rate_hz) {
    throw Error(ErrorCode::RateMismatch, "filter and feature sample rates differ");
  }
}

AudioClip Frontend::condition(const AudioClip& raw) const {
  if (raw.sample_rate_hz == filter.meta.sample_rate_hz) return apply(filter, raw);
  return apply(filter, resample_linear(raw, filter.meta.sample_rate_hz));
}

namespace {

void check_segment(const AudioClip& clip) {
  if (clip.size() != clip.sample_rate_hz) {
    throw Error(ErrorCode::WrongSegmentLength,
                "expected a 1 s clip, got " + std::to_string(clip.size()) + " samples");
  }
}

}  // namespace

MfccFrame Frontend::window_features(const AudioClip& raw, double offset_s) const {
  const AudioClip clip = condition(raw);
  check_segment(clip);
  const Eigen::Index len = extractor.config().window_samples();
  const auto offset = static_cast<Eigen::Index>(std::llround(offset_s * clip.sample_rate_hz));
  if (offset < 0 || offset + len > clip.size()) {
    throw Error(ErrorCode::InvalidArgument, "window offset falls outside the clip");
  }
  MfccFrame f = extractor(clip.samples.segment(offset, len));
  f.t_start = static_cast<double>(offset) / clip.sample_rate_hz;
  return f;
}

void WindowPlacement::validate() const {
  if (!(offset_jitter_s >= 0.0 && offset_jitter_s <= Frontend::kCenterOffset_s)) {
    throw Error(ErrorCode::InvalidArgument, "window jitter must lie in [0, 0.25] s");
  }
}

double WindowPlacement::offset(std::size_t index) const {
  if (offset_jitter_s <= 0.0) return Frontend::kCenterOffset_s;
  std::mt19937_64 rng(derive_seed(seed, index));
  return Frontend::kCenterOffset_s + std::uniform_real_distribution<double>(-offset_jitter_s, offset_jitter_s)(rng);
}

std::vector<MfccFrame> Frontend::windows(const AudioClip& raw) const {
  const AudioClip clip = condition(raw);
  check_segment(clip);
  return segment_windows(clip.samples, extractor);
}

const Frontend& default_frontend() {
  static const Frontend f;
  return f;
}

InMemorySource materialize(const SampleSource& src) {
  InMemorySource out;
  for (std::size_t i = 0; i < src.size(); ++i) out.add(src.features(i), src.label(i));
  return out;
}

}  // namespace bonesound
