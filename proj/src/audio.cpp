#include "bonesound/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "bonesound/error.hpp"

namespace bonesound {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
}

}  // namespace

AudioClip decode_wav(std::span<const unsigned char> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw Error(ErrorCode::CorruptHeader, "not a RIFF/WAVE stream");
  }

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16 || body + len > bytes.size()) {
        throw Error(ErrorCode::CorruptHeader, "truncated fmt chunk");
      }
      const unsigned char* f = bytes.data() + body;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
      if (format == kFormatExtensible) {
        if (len < 40) throw Error(ErrorCode::CorruptHeader, "truncated extensible fmt chunk");
        format = read_u16(f + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      // Some writers leave the streaming placeholder length; clamp to file.
      data_len = std::min<std::size_t>(len, bytes.size() - body);
      break;
    }
    pos = body + len + (len & 1U);
  }

  if (!have_fmt) throw Error(ErrorCode::CorruptHeader, "missing fmt chunk");
  if (data == nullptr) throw Error(ErrorCode::CorruptHeader, "missing data chunk");
  if (rate == 0) throw Error(ErrorCode::CorruptHeader, "zero sample rate");
  if (channels != 1 && channels != 2) {
    throw Error(ErrorCode::UnsupportedFormat, "channel count " + std::to_string(channels));
  }
  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw Error(ErrorCode::UnsupportedFormat,
                "format tag " + std::to_string(format) + " with " + std::to_string(bits) + " bits");
  }

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frame = bytes_per_sample * channels;
  const auto frames = static_cast<Eigen::Index>(data_len / frame);

  Eigen::VectorXd out(frames);
  for (Eigen::Index i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::uint16_t c = 0; c < channels; ++c) {
      const unsigned char* s = data + static_cast<std::size_t>(i) * frame + c * bytes_per_sample;
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16(s)) / 32768.0;
      } else {
        float v;
        std::uint32_t raw = read_u32(s);
        std::memcpy(&v, &raw, sizeof v);
        acc += v;
      }
    }
    out[i] = acc / channels;
  }
  return AudioClip(std::move(out), static_cast<int>(rate));
}

AudioClip load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode_wav(bytes);
}

void save_wav(const AudioClip& clip, const std::filesystem::path& path, WavEncoding encoding) {
  const bool pcm16 = encoding == WavEncoding::Pcm16;
  const std::uint16_t bits = pcm16 ? 16 : 32;
  const std::uint32_t data_len = static_cast<std::uint32_t>(clip.size()) * (bits / 8);

  std::vector<unsigned char> out;
  out.reserve(44 + data_len);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_len);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, pcm16 ? kFormatPcm : kFormatFloat);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate_hz));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate_hz) * (bits / 8));
  put_u16(out, bits / 8);
  put_u16(out, bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_len);

  for (Eigen::Index i = 0; i < clip.size(); ++i) {
    if (pcm16) {
      const double scaled = std::round(clip.samples[i] * 32768.0);
      const auto v = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
      put_u16(out, static_cast<std::uint16_t>(v));
    } else {
      const float v = static_cast<float>(clip.samples[i]);
      std::uint32_t raw;
      std::memcpy(&raw, &v, sizeof raw);
      put_u32(out, raw);
    }
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

AudioClip resample_linear(const AudioClip& clip, int target_hz) {
  if (target_hz <= 0) throw Error(ErrorCode::InvalidArgument, "target rate must be positive");
  if (target_hz == clip.sample_rate_hz || clip.size() == 0) {
    return AudioClip(clip.samples, target_hz);
  }
  const double ratio = static_cast<double>(clip.sample_rate_hz) / target_hz;
  const auto n_out = static_cast<Eigen::Index>(
      std::llround(static_cast<double>(clip.size()) * target_hz / clip.sample_rate_hz));
  const Eigen::Index n_in = clip.size();

  Eigen::VectorXd out(n_out);
  for (Eigen::Index i = 0; i < n_out; ++i) {
    const double x = static_cast<double>(i) * ratio;
    if (n_in == 1) {
      out[i] = clip.samples[0];
      continue;
    }
    auto lo = static_cast<Eigen::Index>(std::floor(x));
    lo = std::min(lo, n_in - 2);
    const double frac = x - static_cast<double>(lo);
    out[i] = clip.samples[lo] + frac * (clip.samples[lo + 1] - clip.samples[lo]);
  }
  return AudioClip(std::move(out), target_hz);
}

AudioClip to_canonical(const AudioClip& clip) {
  return clip.sample_rate_hz == kCanonicalRate ? clip : resample_linear(clip, kCanonicalRate);
}

RingBuffer::RingBuffer(int sample_rate_hz, double capacity_seconds)
    : rate_(sample_rate_hz),
      store_(Eigen::VectorXd::Zero(
          static_cast<Eigen::Index>(std::llround(capacity_seconds * sample_rate_hz)))) {
  if (sample_rate_hz <= 0 || store_.size() == 0) {
    throw Error(ErrorCode::InvalidArgument, "ring buffer needs positive rate and capacity");
  }
}

void RingBuffer::push(std::span<const double> chunk) {
  const auto cap = static_cast<std::size_t>(store_.size());
  if (chunk.size() > cap) {
    throw Error(ErrorCode::ChunkTooLarge,
                std::to_string(chunk.size()) + " samples exceeds capacity " + std::to_string(cap));
  }
  std::lock_guard lock(mutex_);
  for (double s : chunk) {
    store_[static_cast<Eigen::Index>(written_ % cap)] = s;
    ++written_;
  }
}

Eigen::Index RingBuffer::size() const {
  std::lock_guard lock(mutex_);
  return static_cast<Eigen::Index>(std::min<std::size_t>(written_, store_.size()));
}

std::size_t RingBuffer::total_written() const {
  std::lock_guard lock(mutex_);
  return written_;
}

Eigen::VectorXd RingBuffer::last(Eigen::Index n) const {
  std::lock_guard lock(mutex_);
  const auto cap = static_cast<std::size_t>(store_.size());
  const auto held = std::min<std::size_t>(written_, cap);
  if (n < 0 || static_cast<std::size_t>(n) > held) {
    throw Error(ErrorCode::InsufficientData,
                "requested " + std::to_string(n) + " of " + std::to_string(held) + " samples");
  }
  Eigen::VectorXd out(n);
  const std::size_t start = written_ - static_cast<std::size_t>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out[i] = store_[static_cast<Eigen::Index>((start + static_cast<std::size_t>(i)) % cap)];
  }
  return out;
}

}  // namespace bonesound
