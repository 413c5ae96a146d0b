#pragma once

#include <vector>

#include "bonesound/augment.hpp"
#include "bonesound/features.hpp"
#include "bonesound/filter.hpp"
#include "bonesound/model.hpp"

namespace bonesound {

/// Band-pass filter plus MFCC extractor shared by training, evaluation and
/// the live pipeline.
struct Frontend {
  BiquadCascade filter;
  MfccExtractor extractor;

  explicit Frontend(const BandpassDesign& band = {}, const MfccConfig& mfcc = {});

  /// Canonical rate, then band-pass from zero state.
  AudioClip condition(const AudioClip& raw) const;

  /// Start offset (s) of the centered 0.5 s window inside a 1 s segment.
  static constexpr double kCenterOffset_s = 0.25;

  /// Features of the 0.5 s window starting at offset_s inside a 1 s raw
  /// clip. Throws Error{WrongSegmentLength} or Error{InvalidArgument}.
  MfccFrame window_features(const AudioClip& raw, double offset_s) const;
  MfccFrame center_features(const AudioClip& raw) const { return window_features(raw, kCenterOffset_s); }
  /// All eleven windows of a 1 s raw clip.
  std::vector<MfccFrame> windows(const AudioClip& raw) const;
};

const Frontend& default_frontend();

/// Where each training window sits in its clip: the center offset moved by
/// a uniform draw in [-offset_jitter_s, offset_jitter_s], seeded per index.
struct WindowPlacement {
  double offset_jitter_s = 0.0;
  std::uint64_t seed = 0;

  double offset(std::size_t index) const;
  /// Throws Error{InvalidArgument} unless 0 <= jitter <= 0.25 s, the range
  /// that keeps a 0.5 s window inside a 1 s clip.
  void validate() const;
};

/// Training samples rendered on demand from labeled audio.
class ClipFeatureSource final : public SampleSource {
 public:
  explicit ClipFeatureSource(const ClipSource& clips, WindowPlacement placement = {},
                             const Frontend& frontend = default_frontend())
      : clips_(&clips), placement_(placement), frontend_(&frontend) {
    placement_.validate();
  }
  std::size_t size() const override { return clips_->size(); }
  int label(std::size_t i) const override { return index_of(clips_->label(i)); }
  Eigen::MatrixXd features(std::size_t i) const override {
    return frontend_->window_features(clips_->clip(i), placement_.offset(i)).values;
  }

 private:
  const ClipSource* clips_;
  WindowPlacement placement_;
  const Frontend* frontend_;
};

/// Precomputes every sample of `src` once.
InMemorySource materialize(const SampleSource& src);

}  // namespace bonesound
