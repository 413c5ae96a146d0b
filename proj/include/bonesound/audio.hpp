#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <filesystem>
#include <mutex>
#include <span>

namespace bonesound {

inline constexpr int kCanonicalRate = 16000;

/// Mono PCM signal. Samples are nominally in [-1, 1].
struct AudioClip {
  Eigen::VectorXd samples;
  int sample_rate_hz = kCanonicalRate;

  AudioClip() = default;
  AudioClip(Eigen::VectorXd s, int rate) : samples(std::move(s)), sample_rate_hz(rate) {}

  Eigen::Index size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate_hz; }
};

enum class WavEncoding { Pcm16, Float32 };

/// Reads RIFF/WAVE PCM16 or float32, mono or stereo. Stereo is averaged to
/// mono and int16 is scaled by 1/32768.
AudioClip load_wav(const std::filesystem::path& path);
AudioClip decode_wav(std::span<const unsigned char> bytes);

void save_wav(const AudioClip& clip, const std::filesystem::path& path,
              WavEncoding encoding = WavEncoding::Pcm16);

/// Linear interpolation onto a uniform grid at target_hz. Output length is
/// round(len * target / source). Samples past the last input sample are
/// extrapolated from the final segment, so affine signals map exactly.
AudioClip resample_linear(const AudioClip& clip, int target_hz);

/// Resamples to the canonical rate if needed.
AudioClip to_canonical(const AudioClip& clip);

/// Fixed-capacity circular store holding the most recent samples of a
/// stream. One writer, any number of readers; reads return value copies.
class RingBuffer {
 public:
  explicit RingBuffer(int sample_rate_hz = kCanonicalRate, double capacity_seconds = 2.0);

  /// Throws Error{ChunkTooLarge} when chunk.size() > capacity().
  void push(std::span<const double> chunk);

  /// The last n samples in time order; n must not exceed size().
  Eigen::VectorXd last(Eigen::Index n) const;
  Eigen::VectorXd snapshot() const { return last(size()); }

  Eigen::Index capacity() const { return static_cast<Eigen::Index>(store_.size()); }
  Eigen::Index size() const;
  bool full() const { return size() == capacity(); }
  /// Total number of samples ever pushed; the write head position.
  std::size_t total_written() const;
  int sample_rate_hz() const { return rate_; }

 private:
  int rate_;
  Eigen::VectorXd store_;
  std::size_t written_ = 0;
  mutable std::mutex mutex_;
};

}  // namespace bonesound
