#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bonesound/audio.hpp"
#include "bonesound/gesture.hpp"

namespace bonesound {

/// splitmix64 of (master, index): per-record seeds that do not depend on
/// generation order.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

// ---------------------------------------------------------------------------
// Clip collections

struct LabeledClip {
  std::string id;
  Gesture label = Gesture::Pinch;
  AudioClip clip;
};

/// Random-access labeled audio; implementations may render on demand but
/// must be deterministic in the index.
class ClipSource {
 public:
  virtual ~ClipSource() = default;
  virtual std::size_t size() const = 0;
  virtual Gesture label(std::size_t i) const = 0;
  virtual std::string id(std::size_t i) const = 0;
  virtual AudioClip clip(std::size_t i) const = 0;
};

class VectorClipSource final : public ClipSource {
 public:
  explicit VectorClipSource(std::vector<LabeledClip> clips) : clips_(std::move(clips)) {}
  std::size_t size() const override { return clips_.size(); }
  Gesture label(std::size_t i) const override { return clips_[i].label; }
  std::string id(std::size_t i) const override { return clips_[i].id; }
  AudioClip clip(std::size_t i) const override { return clips_[i].clip; }
  const std::vector<LabeledClip>& clips() const { return clips_; }

 private:
  std::vector<LabeledClip> clips_;
};

struct NoiseClip {
  std::string id;
  AudioClip clip;
};

// ---------------------------------------------------------------------------
// Mixing

struct MixResult {
  AudioClip mixed;
  double noise_scale = 0.0;
  Eigen::Index noise_offset = 0;
  double clipped_fraction = 0.0;
};

/// Adds a seeded random sub-clip of `noise`, scaled so that
/// 10 log10(P_clean / P_noise) == snr_db over the clean clip's extent, then
/// hard-clips to [-1, 1]. The clean signal is not rescaled.
/// Throws Error{NoiseTooShort} or Error{SilentClean}.
MixResult mix_at_snr(const AudioClip& clean, const AudioClip& noise, double snr_db, std::uint64_t seed);

struct AugmentConfig {
  int ratio = 10;
  double snr_lo_db = 0.0;
  double snr_hi_db = 20.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// The random choices behind one augmented copy.
struct AugmentDraw {
  std::size_t source_index = 0;
  int copy = 0;
  std::size_t noise_index = 0;
  double snr_db = 0.0;
  std::uint64_t mix_seed = 0;
};

/// ratio draws per clean record, each from a seed derived from
/// (cfg.seed, source_index * ratio + copy).
AugmentDraw draw_augmentation(std::size_t source_index, int copy, std::size_t n_noise, const AugmentConfig& cfg);
std::vector<AugmentDraw> plan_augmentation(std::size_t n_clean, std::size_t n_noise, const AugmentConfig& cfg);

struct AugmentedClip {
  std::string id;
  std::string source_id;
  std::string noise_id;
  Gesture label = Gesture::Pinch;
  double snr_db = 0.0;
  double clipped_fraction = 0.0;
  AudioClip clip;
};

std::string augmented_id(const std::string& source_id, int copy);

/// ratio augmented copies per clean clip (originals are not included).
std::vector<AugmentedClip> augment_dataset(const ClipSource& clean, std::span<const NoiseClip> noise,
                                           const AugmentConfig& cfg);

/// Lazily rendered augmented copies of `clean`, index = source * ratio + copy.
class AugmentedClipSource final : public ClipSource {
 public:
  AugmentedClipSource(const ClipSource& clean, std::span<const NoiseClip> noise, AugmentConfig cfg);
  std::size_t size() const override { return clean_->size() * static_cast<std::size_t>(cfg_.ratio); }
  Gesture label(std::size_t i) const override;
  std::string id(std::size_t i) const override;
  AudioClip clip(std::size_t i) const override;
  AugmentDraw draw(std::size_t i) const;

 private:
  const ClipSource* clean_;
  std::span<const NoiseClip> noise_;
  AugmentConfig cfg_;
};

// ---------------------------------------------------------------------------
// Synthetic corpus

enum class NoiseKind { Pink, Brown, Babble };
std::string_view noise_kind_name(NoiseKind kind);
NoiseKind parse_noise_kind(std::string_view name);

/// Seeded colored noise normalized to RMS 0.1. Pink has a -3 dB/octave power
/// density slope, brown -6 dB/octave above 10 Hz; babble is a sum of
/// amplitude-modulated harmonic voices.
AudioClip synth_noise(NoiseKind kind, double duration_s, std::uint64_t seed, int sample_rate_hz = kCanonicalRate);

struct SynthJitter {
  double amplitude_db = 3.0;     // +/- uniform, in dB
  double duration_frac = 0.2;    // +/- relative
  double frequency_frac = 0.1;   // +/- relative
  double time_shift_s = 0.05;    // +/- placement around the clip center

  static SynthJitter none() { return {0.0, 0.0, 0.0, 0.0}; }
};

/// Class templates, all energy inside 10-500 Hz:
///   pinch     one 60 ms damped burst at 80 Hz
///   rub_up    300 ms chirp 50 -> 250 Hz
///   rub_down  300 ms chirp 250 -> 50 Hz
///   flick     two 15 ms clicks at 250 Hz, 40 ms apart
///   open_palm two 80 ms low-band (40-100 Hz) bursts, 150 ms apart
/// The event is centered in a clip of clip_s seconds (<= 1 s); the peak is
/// scaled to peak_amplitude before the background floor is added.
struct SynthGestureSpec {
  Gesture label = Gesture::Pinch;
  SynthJitter jitter{};
  double peak_amplitude = 0.5;
  /// RMS of the white sensor-noise floor under the event; 0 for silence.
  double background_rms = 0.002;
  double clip_s = 1.0;
  int sample_rate_hz = kCanonicalRate;
};

LabeledClip synth_gesture(const SynthGestureSpec& spec, std::uint64_t seed);

}  // namespace bonesound
