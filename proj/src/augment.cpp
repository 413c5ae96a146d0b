#include "bonesound/augment.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include <unsupported/Eigen/FFT>

#include "bonesound/error.hpp"

namespace bonesound {

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

MixResult mix_at_snr(const AudioClip& clean, const AudioClip& noise, double snr_db, std::uint64_t seed) {
  if (noise.sample_rate_hz != clean.sample_rate_hz) {
    throw Error(ErrorCode::RateMismatch, "noise and clean clips differ in sample rate");
  }
  if (noise.size() < clean.size()) {
    throw Error(ErrorCode::NoiseTooShort, "noise clip shorter than clean clip");
  }
  const double p_clean = clean.samples.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(clean.size(), 1));
  if (clean.size() == 0 || p_clean < 1e-12) throw Error(ErrorCode::SilentClean, "clean clip power below 1e-12");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, noise.size() - clean.size());
  MixResult out;
  out.noise_offset = pick(rng);
  const auto sub = noise.samples.segment(out.noise_offset, clean.size());
  const double p_noise = sub.squaredNorm() / static_cast<double>(clean.size());
  if (p_noise <= 0.0) throw Error(ErrorCode::InvalidArgument, "selected noise segment is silent");

  out.noise_scale = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
  Eigen::VectorXd mixed = clean.samples + out.noise_scale * sub;
  Eigen::Index clipped = 0;
  for (Eigen::Index i = 0; i < mixed.size(); ++i) {
    if (std::abs(mixed[i]) > 1.0) {
      mixed[i] = std::clamp(mixed[i], -1.0, 1.0);
      ++clipped;
    }
  }
  out.clipped_fraction = static_cast<double>(clipped) / static_cast<double>(mixed.size());
  out.mixed = AudioClip(std::move(mixed), clean.sample_rate_hz);
  return out;
}

void AugmentConfig::validate() const {
  if (ratio < 1) throw Error(ErrorCode::InvalidArgument, "augmentation ratio must be >= 1");
  if (!(snr_lo_db <= snr_hi_db)) throw Error(ErrorCode::InvalidArgument, "snr range must be ordered");
}

AugmentDraw draw_augmentation(std::size_t source_index, int copy, std::size_t n_noise, const AugmentConfig& cfg) {
  if (n_noise == 0) throw Error(ErrorCode::InvalidArgument, "noise corpus is empty");
  std::mt19937_64 rng(derive_seed(cfg.seed, source_index * static_cast<std::size_t>(cfg.ratio) +
                                                static_cast<std::size_t>(copy)));
  AugmentDraw d;
  d.source_index = source_index;
  d.copy = copy;
  d.noise_index = std::uniform_int_distribution<std::size_t>(0, n_noise - 1)(rng);
  d.snr_db = std::uniform_real_distribution<double>(cfg.snr_lo_db, cfg.snr_hi_db)(rng);
  d.mix_seed = rng();
  return d;
}

std::vector<AugmentDraw> plan_augmentation(std::size_t n_clean, std::size_t n_noise, const AugmentConfig& cfg) {
  cfg.validate();
  std::vector<AugmentDraw> out;
  out.reserve(n_clean * static_cast<std::size_t>(cfg.ratio));
  for (std::size_t i = 0; i < n_clean; ++i) {
    for (int c = 0; c < cfg.ratio; ++c) out.push_back(draw_augmentation(i, c, n_noise, cfg));
  }
  return out;
}

std::string augmented_id(const std::string& source_id, int copy) {
  return source_id + "_aug" + std::to_string(copy);
}

std::vector<AugmentedClip> augment_dataset(const ClipSource& clean, std::span<const NoiseClip> noise,
                                           const AugmentConfig& cfg) {
  if (clean.size() == 0) throw Error(ErrorCode::InvalidArgument, "clean set is empty");
  std::vector<AugmentedClip> out;
  for (const AugmentDraw& d : plan_augmentation(clean.size(), noise.size(), cfg)) {
    const auto& n = noise[d.noise_index];
    MixResult mix = mix_at_snr(clean.clip(d.source_index), n.clip, d.snr_db, d.mix_seed);
    AugmentedClip a;
    a.source_id = clean.id(d.source_index);
    a.id = augmented_id(a.source_id, d.copy);
    a.noise_id = n.id;
    a.label = clean.label(d.source_index);
    a.snr_db = d.snr_db;
    a.clipped_fraction = mix.clipped_fraction;
    a.clip = std::move(mix.mixed);
    out.push_back(std::move(a));
  }
  return out;
}

AugmentedClipSource::AugmentedClipSource(const ClipSource& clean, std::span<const NoiseClip> noise,
                                         AugmentConfig cfg)
    : clean_(&clean), noise_(noise), cfg_(cfg) {
  cfg_.validate();
  if (noise_.empty()) throw Error(ErrorCode::InvalidArgument, "noise corpus is empty");
}

AugmentDraw AugmentedClipSource::draw(std::size_t i) const {
  const auto r = static_cast<std::size_t>(cfg_.ratio);
  return draw_augmentation(i / r, static_cast<int>(i % r), noise_.size(), cfg_);
}

Gesture AugmentedClipSource::label(std::size_t i) const {
  return clean_->label(i / static_cast<std::size_t>(cfg_.ratio));
}

std::string AugmentedClipSource::id(std::size_t i) const {
  const auto r = static_cast<std::size_t>(cfg_.ratio);
  return augmented_id(clean_->id(i / r), static_cast<int>(i % r));
}

AudioClip AugmentedClipSource::clip(std::size_t i) const {
  const AugmentDraw d = draw(i);
  return mix_at_snr(clean_->clip(d.source_index), noise_[d.noise_index].clip, d.snr_db, d.mix_seed).mixed;
}

// ---------------------------------------------------------------------------

std::string_view noise_kind_name(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::Pink: return "pink";
    case NoiseKind::Brown: return "brown";
    case NoiseKind::Babble: return "babble";
  }
  return "unknown";
}

NoiseKind parse_noise_kind(std::string_view name) {
  if (name == "pink") return NoiseKind::Pink;
  if (name == "brown") return NoiseKind::Brown;
  if (name == "babble" || name == "babble-like") return NoiseKind::Babble;
  throw Error(ErrorCode::InvalidArgument, "unknown noise kind '" + std::string(name) + "'");
}

namespace {

void normalize_rms(Eigen::VectorXd& x, double target) {
  const double rms = std::sqrt(x.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(x.size(), 1)));
  if (rms > 0.0) x *= target / rms;
}

// White Gaussian noise shaped in the frequency domain by |H(f)| = f^-exponent
// above `corner_hz` (zero below it).
Eigen::VectorXd shaped_noise(Eigen::Index n, int rate, double exponent, double corner_hz, std::mt19937_64& rng) {
  Eigen::Index len = 1;
  while (len < n) len <<= 1;
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::VectorXd white(len);
  for (Eigen::Index i = 0; i < len; ++i) white[i] = gauss(rng);

  Eigen::FFT<double> fft;
  Eigen::VectorXcd spec;
  fft.fwd(spec, white);
  const double bin_hz = static_cast<double>(rate) / static_cast<double>(len);
  for (Eigen::Index k = 0; k < len; ++k) {
    const Eigen::Index kk = std::min(k, len - k);
    const double f = static_cast<double>(kk) * bin_hz;
    spec[k] *= f < corner_hz ? 0.0 : std::pow(f, -exponent);
  }
  Eigen::VectorXd shaped;
  fft.inv(shaped, spec);
  return shaped.head(n);
}

Eigen::VectorXd babble(Eigen::Index n, int rate, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  constexpr int kVoices = 6;
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (int v = 0; v < kVoices; ++v) {
    const double f0 = 100.0 + 120.0 * u(rng);
    const double vibrato = 2.0 + 3.0 * u(rng);
    const double syllable = 3.0 + 3.0 * u(rng);
    const double phase_env = two_pi * u(rng);
    const double phase_vib = two_pi * u(rng);
    double phase = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / rate;
      const double f = f0 * (1.0 + 0.05 * std::sin(two_pi * vibrato * t + phase_vib));
      phase += two_pi * f / rate;
      double voice = 0.0;
      for (int h = 1; h <= 10; ++h) voice += std::sin(h * phase) / h;
      const double env = std::pow(std::max(0.0, std::sin(two_pi * syllable * t + phase_env)), 2.0);
      out[i] += env * voice;
    }
  }
  return out;
}

}  // namespace

AudioClip synth_noise(NoiseKind kind, double duration_s, std::uint64_t seed, int sample_rate_hz) {
  if (!(duration_s > 0.0)) throw Error(ErrorCode::InvalidArgument, "noise duration must be positive");
  const auto n = static_cast<Eigen::Index>(std::llround(duration_s * sample_rate_hz));
  std::mt19937_64 rng(seed);
  Eigen::VectorXd x;
  switch (kind) {
    case NoiseKind::Pink: x = shaped_noise(n, sample_rate_hz, 0.5, 1.0, rng); break;
    case NoiseKind::Brown: x = shaped_noise(n, sample_rate_hz, 1.0, 10.0, rng); break;
    case NoiseKind::Babble: x = babble(n, sample_rate_hz, rng); break;
  }
  normalize_rms(x, 0.1);
  x = x.cwiseMax(-1.0).cwiseMin(1.0);
  return AudioClip(std::move(x), sample_rate_hz);
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double hann(double t, double width) {
  if (t < 0.0 || t > width) return 0.0;
  return 0.5 - 0.5 * std::cos(kTwoPi * t / width);
}

// Tukey window with 20% cosine tapers.
double tukey(double t, double width) {
  if (t < 0.0 || t > width) return 0.0;
  const double taper = 0.2 * width;
  if (t < taper) return 0.5 - 0.5 * std::cos(std::numbers::pi * t / taper);
  if (t > width - taper) return 0.5 - 0.5 * std::cos(std::numbers::pi * (width - t) / taper);
  return 1.0;
}

}  // namespace

LabeledClip synth_gesture(const SynthGestureSpec& spec, std::uint64_t seed) {
  if (index_of(spec.label) < 0 || index_of(spec.label) >= kNumGestures) {
    throw Error(ErrorCode::UnknownClass, "unknown gesture class");
  }
  if (!(spec.clip_s > 0.0 && spec.clip_s <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "synthetic clip duration must lie in (0, 1] s");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  const SynthJitter& j = spec.jitter;
  const double amp = spec.peak_amplitude * std::pow(10.0, j.amplitude_db * sym(rng) / 20.0);
  const double dur = 1.0 + j.duration_frac * sym(rng);
  const double freq = 1.0 + j.frequency_frac * sym(rng);
  const double shift = j.time_shift_s * sym(rng);
  std::array<double, 3> phases{};
  for (double& p : phases) p = kTwoPi * (0.5 + 0.5 * sym(rng));

  const int rate = spec.sample_rate_hz;
  const auto n = static_cast<Eigen::Index>(std::llround(spec.clip_s * rate));
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);

  double length = 0.0;  // event length in seconds
  std::function<double(double)> event;
  switch (spec.label) {
    case Gesture::Pinch: {
      length = 0.060 * dur;
      const double f = 80.0 * freq, tau = 0.015 * dur, attack = 0.008 * dur;
      event = [=](double t) {
        if (t < 0.0 || t > length) return 0.0;
        const double rise = t < attack ? 0.5 - 0.5 * std::cos(std::numbers::pi * t / attack) : 1.0;
        const double tail = t > 0.8 * length ? 0.5 + 0.5 * std::cos(std::numbers::pi * (t - 0.8 * length) / (0.2 * length)) : 1.0;
        return rise * tail * std::exp(-t / tau) * std::sin(kTwoPi * f * t);
      };
      break;
    }
    case Gesture::RubUp:
    case Gesture::RubDown: {
      length = 0.300 * dur;
      const bool up = spec.label == Gesture::RubUp;
      const double f0 = (up ? 50.0 : 250.0) * freq, f1 = (up ? 250.0 : 50.0) * freq;
      event = [=](double t) {
        const double phase = kTwoPi * (f0 * t + (f1 - f0) * t * t / (2.0 * length));
        return tukey(t, length) * std::sin(phase);
      };
      break;
    }
    case Gesture::Flick: {
      const double click = 0.015 * dur, gap = 0.040 * dur, f = 250.0 * freq;
      length = gap + click;
      event = [=](double t) {
        return (hann(t, click) + hann(t - gap, click)) * std::sin(kTwoPi * f * t);
      };
      break;
    }
    case Gesture::OpenPalm: {
      const double burst = 0.080 * dur, gap = 0.150 * dur;
      length = gap + burst;
      const std::array<double, 3> fs{40.0 * freq, 70.0 * freq, 100.0 * freq};
      event = [=](double t) {
        double s = 0.0;
        for (std::size_t k = 0; k < fs.size(); ++k) s += std::sin(kTwoPi * fs[k] * t + phases[k]);
        return (hann(t, burst) + 0.8 * hann(t - gap, burst)) * s;
      };
      break;
    }
  }

  const double start = std::clamp(0.5 * spec.clip_s - 0.5 * length + shift, 0.0, std::max(0.0, spec.clip_s - length));
  for (Eigen::Index i = 0; i < n; ++i) x[i] = event(static_cast<double>(i) / rate - start);
  const double peak = x.cwiseAbs().maxCoeff();
  if (peak > 0.0) x *= amp / peak;
  if (spec.background_rms > 0.0) {
    std::mt19937_64 floor_rng(derive_seed(seed, 0xF100));
    std::normal_distribution<double> gauss(0.0, spec.background_rms);
    for (Eigen::Index i = 0; i < n; ++i) x[i] += gauss(floor_rng);
  }

  return LabeledClip{std::string(gesture_name(spec.label)) + "_" + std::to_string(seed), spec.label,
                     AudioClip(std::move(x), rate)};
}

}  // namespace bonesound
